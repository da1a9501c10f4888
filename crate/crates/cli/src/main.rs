use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sparsemm_core::cache::decode_step;
use sparsemm_core::sim::{read_corpus, write_corpus};
use sparsemm_core::{
    aggregate_gqa_scores, allocate, chase_corpus, compress_prefill, run_budget_sweep, run_cost_model,
    run_masking_study, run_rho_sweep, seed, write_table, AllocationConfig, AllocatorKind, ExperimentConfig,
    ModelGeometry, PlanFile, PlantedHeadSet, ScoreFile, SyntheticModel, TraceRecord,
};

#[derive(Parser)]
#[command(name = "sparsemm", version, about = "Visual-head guided KV-cache compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace corpus with planted visual heads.
    Generate(GenerateArgs),
    /// Score every head of a trace corpus.
    Chase(ChaseArgs),
    /// Turn a score file into a per-head budget plan.
    Allocate(AllocateArgs),
    /// Compress one trace record's prompt cache under a plan.
    Compress(CompressArgs),
    /// Run an experiment from a config file.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Defaults to `--heads` (no grouping).
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    planted_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    strength: f64,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// Fixed prompt length; random sample shapes otherwise.
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Emitted tokens per sample when `--prompt-len` is set.
    #[arg(long, default_value_t = 8)]
    output_len: usize,
    /// Also record observation-window rows of this size.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ChaseArgs {
    /// Directory of trace records.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Global budget B over all kv heads.
    #[arg(long)]
    budget: u64,
    #[arg(long, default_value_t = sparsemm_core::allocator::DEFAULT_RHO)]
    rho: f64,
    #[arg(long, default_value_t = sparsemm_core::allocator::DEFAULT_WINDOW)]
    window: u64,
    #[arg(long, default_value = "sparsemm")]
    policy: String,
    /// Query heads per kv head; scores are summed per group first.
    #[arg(long, default_value_t = 1)]
    group: usize,
    /// Seed for the random policy.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompressArgs {
    /// Trace record with observation-window rows.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Eviction report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Per-head kept positions as CSV.
    #[arg(long)]
    heads_csv: Option<PathBuf>,
    /// Per-step recall as CSV.
    #[arg(long)]
    recall_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Sweep,
    Rho,
    Mask,
    Cost,
}

impl Experiment {
    fn name(self) -> &'static str {
        match self {
            Experiment::Sweep => "sweep",
            Experiment::Rho => "rho",
            Experiment::Mask => "mask",
            Experiment::Cost => "cost",
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; all cores when omitted.
    #[arg(long)]
    jobs: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<sparsemm_core::Error>())
                .map_or("cli", |e| e.kind());
            let err = json!({ "error": { "kind": kind, "message": message(&e) } });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}

/// The error chain joined with `: `, dropping links already quoted by the
/// link above them.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for link in e.chain() {
        let text = link.to_string();
        if !parts.last().is_some_and(|p| p.ends_with(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn run(command: Command) -> anyhow::Result<Value> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Chase(a) => chase(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Compress(a) => compress(a),
        Command::Bench(a) => bench(a),
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<Value> {
    let geometry = ModelGeometry {
        layers: a.layers,
        query_heads: a.heads,
        kv_heads: a.kv_heads.unwrap_or(a.heads),
        head_dim: 64,
    };
    if a.samples == 0 {
        bail!(sparsemm_core::Error::InvalidInput("--samples must be at least 1".into()));
    }
    let planted = PlantedHeadSet::random(
        &geometry,
        a.planted_fraction,
        a.strength,
        seed::derive(a.seed, &[seed::label("planted")]),
    )?;
    let model = SyntheticModel::with_params(
        geometry,
        planted,
        seed::derive(a.seed, &[seed::label("model")]),
        Default::default(),
    )?;
    let corpus_seed = seed::derive(a.seed, &[seed::label("corpus")]);
    let records = (0..a.samples)
        .map(|i| {
            let s = seed::derive(corpus_seed, &[i as u64]);
            let sample = match a.prompt_len {
                Some(lp) => model.sample_with_prompt_len(lp, a.output_len, s)?,
                None => model.random_sample(s)?,
            };
            let trace = model.trace(&sample, s)?;
            let window = a.window.map(|w| model.window(&sample, s, w)).transpose()?;
            Ok(TraceRecord::new(sample, trace, window))
        })
        .collect::<sparsemm_core::Result<Vec<_>>>()?;
    let paths = write_corpus(&a.out, &records).with_context(|| format!("writing corpus to {}", a.out.display()))?;
    Ok(json!({
        "command": "generate",
        "samples": paths.len(),
        "out": a.out,
        "planted": model.planted().entries(),
    }))
}

fn chase(a: ChaseArgs) -> anyhow::Result<Value> {
    let records = read_corpus(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let pairs: Vec<_> = records.iter().map(|r| (&r.sample, r.trace())).collect();
    let scores = chase_corpus(&pairs)?;
    let file = ScoreFile::from_corpus(&scores);
    file.write(&a.out)?;
    Ok(json!({
        "command": "chase",
        "samples": records.len(),
        "corpus_tokens": scores.corpus_tokens,
        "skipped_tokens": scores.skipped_tokens,
        "top_heads": scores.matrix.top_heads(5),
        "out": a.out,
    }))
}

fn allocate_cmd(a: AllocateArgs) -> anyhow::Result<Value> {
    let bytes = std::fs::read(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
    let file: ScoreFile = serde_json::from_slice(&bytes).map_err(sparsemm_core::Error::from)?;
    let scores = aggregate_gqa_scores(&file.matrix()?, a.group)?;
    let kind: AllocatorKind = a.policy.parse()?;
    let config = AllocationConfig::new(a.budget).with_window(a.window).with_rho(a.rho);
    let plan = allocate(kind, &scores, config, a.seed)?;
    PlanFile::new(&plan, &bytes).write(&a.out)?;
    Ok(json!({
        "command": "allocate",
        "allocator": kind.as_str(),
        "total": plan.total(),
        "min": plan.budgets.iter().min(),
        "max": plan.budgets.iter().max(),
        "warnings": plan.warnings,
        "out": a.out,
    }))
}

fn compress(a: CompressArgs) -> anyhow::Result<Value> {
    let record: TraceRecord = read_json(&a.trace)?;
    record.validate()?;
    let plan = PlanFile::read(&a.plan)?.to_plan()?;
    let window = record
        .window_trace()?
        .ok_or_else(|| sparsemm_core::Error::InvalidInput("trace record has no observation-window rows".into()))?;
    let w = plan.config.window as usize;
    let lp = record.sample.prompt_len();
    if window.size != w && lp > w {
        bail!(sparsemm_core::Error::InvalidInput(format!(
            "trace window is {} but the plan's window is {w}",
            window.size
        )));
    }
    let geometry = ModelGeometry {
        layers: record.layers,
        query_heads: record.heads,
        kv_heads: plan.shape.kv_heads,
        head_dim: 1,
    };
    let (mut cache, mut report) = compress_prefill(&window.heads, &geometry, &plan, w)?;
    for (t, rows) in record.rows.iter().enumerate() {
        report.recall.push(decode_step(&mut cache, rows, None, t)?.recall);
    }
    report.write_json(&a.out)?;
    if let Some(p) = &a.heads_csv {
        report.write_heads_csv(create(p)?)?;
    }
    if let Some(p) = &a.recall_csv {
        report.write_recall_csv(create(p)?)?;
    }
    let mean = if report.recall.is_empty() {
        None
    } else {
        Some(report.recall.iter().sum::<f64>() / report.recall.len() as f64)
    };
    Ok(json!({
        "command": "compress",
        "prompt_len": lp,
        "total_kept": report.total_kept,
        "mean_recall": mean,
        "out": a.out,
    }))
}

fn bench(a: BenchArgs) -> anyhow::Result<Value> {
    let mut config = match &a.config {
        Some(p) => ExperimentConfig::read(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let out_dir = a
        .out_dir
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = a.jobs {
        if j == 0 {
            bail!(sparsemm_core::Error::InvalidInput("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build()?;
    let name = a.experiment.name();
    let (rows, paths) = pool.install(|| -> anyhow::Result<_> {
        Ok(match a.experiment {
            Experiment::Sweep => {
                let rows = run_budget_sweep(&config)?;
                (rows.len(), write_table(&out_dir, name, &rows)?)
            }
            Experiment::Rho => {
                let rows = run_rho_sweep(&config)?;
                (rows.len(), write_table(&out_dir, name, &rows)?)
            }
            Experiment::Mask => {
                let rows = run_masking_study(&config)?;
                (rows.len(), write_table(&out_dir, name, &rows)?)
            }
            Experiment::Cost => {
                let rows = run_cost_model(&config)?;
                (rows.len(), write_table(&out_dir, name, &rows)?)
            }
        })
    })?;
    Ok(json!({
        "command": format!("bench {name}"),
        "rows": rows,
        "csv": paths.csv,
        "json": paths.json,
    }))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes).map_err(sparsemm_core::Error::from)?)
}

fn create(path: &Path) -> anyhow::Result<std::fs::File> {
    std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}
