//! Seeded experiment harness: budget sweep, ρ sweep, head-masking study
//! and the slot cost model.
//!
//! Every replicate derives its own seed from the experiment seed, and every
//! component of a replicate (planting, model, corpus, decode samples, random
//! plans, random masks) derives from that. Cells run in parallel and are
//! merged in cell order, so output bytes do not depend on thread count.

mod config;
mod output;

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{CostConfig, ExperimentConfig, PlantedSpec};
pub use output::{write_table, TablePaths};

use crate::allocator::{allocate, AllocationConfig, AllocatorKind};
use crate::cache::PlanPolicy;
use crate::chaser::{aggregate_gqa_scores, chase_corpus, HeadScoreMatrix};
use crate::error::Result;
use crate::seed;
use crate::sim::{
    decode_sample, fraction_count, generate_ocr_samples, mask_heads, token_regions, AttentionTrace, CachePolicy,
    OcrSample, PlantedHeadSet, SyntheticModel,
};

/// One (policy, budget, ρ, replicate) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub policy: String,
    /// Per-head budget; the plan total is this times the kv-head count.
    pub budget: u64,
    pub total_budget: u64,
    pub rho: f64,
    pub replicate: usize,
    pub seed: u64,
    /// Mean attention-mass recall over decode steps and samples.
    pub recall: f64,
    pub peak_slots: usize,
    /// Slot reads per decode sample.
    pub slot_touches: f64,
    pub recovery_precision: f64,
    pub recovery_recall: f64,
    pub mask: Option<String>,
    pub mask_fraction: Option<f64>,
    pub masked_heads: Option<usize>,
    /// Share of corpus attention on the emitted token's patches.
    pub grounding: Option<f64>,
    pub grounding_drop: Option<f64>,
    pub recovery_drop: Option<f64>,
}

/// Closed-form slot accounting for one prompt length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub prompt_len: u64,
    pub output_len: u64,
    pub budget: u64,
    pub kv_heads: u64,
    pub full_peak_slots: u64,
    pub compressed_peak_slots: u64,
    pub peak_ratio: f64,
    pub full_touches: u64,
    pub compressed_touches: u64,
    /// Full over compressed slot reads.
    pub touch_speedup: f64,
}

/// Planted model, its corpus scores and their recovery quality.
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub model: SyntheticModel,
    pub corpus: Vec<(OcrSample, AttentionTrace)>,
    /// Query-head scores.
    pub scores: HeadScoreMatrix,
    /// Scores summed per kv head.
    pub kv_scores: HeadScoreMatrix,
    pub recovery: Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub precision: f64,
    pub recall: f64,
}

/// Overlap between the `k` best-scored heads and the planted set, with `k`
/// the planted fraction of all query heads.
pub fn recovery(scores: &HeadScoreMatrix, planted: &PlantedHeadSet, fraction: f64) -> Recovery {
    let k = fraction_count(fraction, scores.len());
    let top = scores.top_heads(k);
    let truth = planted.heads();
    let hits = top.iter().filter(|h| truth.contains(h)).count() as f64;
    Recovery {
        precision: if top.is_empty() { 0.0 } else { hits / top.len() as f64 },
        recall: if truth.is_empty() { 1.0 } else { hits / truth.len() as f64 },
    }
}

const PLANTED: &str = "planted";
const MODEL: &str = "model";
const CORPUS: &str = "corpus";
const DECODE: &str = "decode";
const RANDOM_PLAN: &str = "random-plan";
const RANDOM_MASK: &str = "random-mask";

/// Builds the planted model for replicate `index` and chases its corpus.
pub fn prepare_replicate(config: &ExperimentConfig, index: usize) -> Result<Replicate> {
    let run_seed = seed::derive(config.seed, &[index as u64]);
    let geometry = config.geometry;
    let planted = config.planted.build(&geometry, seed::derive(run_seed, &[seed::label(PLANTED)]))?;
    let model = SyntheticModel::with_params(
        geometry,
        planted,
        seed::derive(run_seed, &[seed::label(MODEL)]),
        config.sim,
    )?;
    let corpus = generate_ocr_samples(&model, config.corpus_size, seed::derive(run_seed, &[seed::label(CORPUS)]))?;
    let scores = chase_corpus(&corpus)?.matrix;
    let kv_scores = aggregate_gqa_scores(&scores, geometry.group())?;
    let recovery = recovery(&scores, model.planted(), config.planted.fraction_of(&geometry));
    Ok(Replicate {
        index,
        seed: run_seed,
        model,
        corpus,
        scores,
        kv_scores,
        recovery,
    })
}

fn prepare_all(config: &ExperimentConfig) -> Result<Vec<Replicate>> {
    config.validate()?;
    (0..config.replicates)
        .into_par_iter()
        .map(|r| prepare_replicate(config, r))
        .collect()
}

/// Decode outcome of one policy, averaged over the replicate's decode samples.
struct PolicyOutcome {
    recall: f64,
    peak_slots: usize,
    slot_touches: f64,
}

/// Decodes the replicate's decode samples on `model` under every policy.
fn decode_policies(
    config: &ExperimentConfig,
    rep: &Replicate,
    model: &SyntheticModel,
    policies: &[PlanPolicy],
) -> Result<Vec<PolicyOutcome>> {
    let dyn_policies: Vec<&dyn CachePolicy> = policies.iter().map(|p| p as &dyn CachePolicy).collect();
    let mut acc: Vec<PolicyOutcome> = policies
        .iter()
        .map(|_| PolicyOutcome {
            recall: 0.0,
            peak_slots: 0,
            slot_touches: 0.0,
        })
        .collect();
    let n = config.decode_samples as f64;
    for i in 0..config.decode_samples {
        let s = seed::derive(rep.seed, &[seed::label(DECODE), i as u64]);
        let sample = model.sample_with_prompt_len(config.prompt_len, config.output_len, s)?;
        let records = decode_sample(model, &sample, s, config.window, &dyn_policies)?;
        for (a, r) in acc.iter_mut().zip(records) {
            a.recall += r.mean_recall() / n;
            a.peak_slots = a.peak_slots.max(r.peak_retained);
            a.slot_touches += r.slot_touches() as f64 / n;
        }
    }
    Ok(acc)
}

fn plan_policy(
    config: &ExperimentConfig,
    rep: &Replicate,
    kind: AllocatorKind,
    budget: u64,
    rho: f64,
) -> Result<PlanPolicy> {
    let alloc = AllocationConfig::new(budget * config.geometry.num_kv_heads() as u64)
        .with_window(config.window as u64)
        .with_rho(rho);
    let plan_seed = seed::derive(rep.seed, &[seed::label(RANDOM_PLAN), budget]);
    let plan = allocate(kind, &rep.kv_scores, alloc, plan_seed)?;
    Ok(PlanPolicy::new(plan, config.window))
}

#[allow(clippy::too_many_arguments)]
fn row(
    experiment: &str,
    config: &ExperimentConfig,
    rep: &Replicate,
    policy: &str,
    budget: u64,
    rho: f64,
    out: &PolicyOutcome,
) -> ResultRow {
    ResultRow {
        experiment: experiment.to_string(),
        policy: policy.to_string(),
        budget,
        total_budget: budget * config.geometry.num_kv_heads() as u64,
        rho,
        replicate: rep.index,
        seed: rep.seed,
        recall: out.recall,
        peak_slots: out.peak_slots,
        slot_touches: out.slot_touches,
        recovery_precision: rep.recovery.precision,
        recovery_recall: rep.recovery.recall,
        mask: None,
        mask_fraction: None,
        masked_heads: None,
        grounding: None,
        grounding_drop: None,
        recovery_drop: None,
    }
}

/// One row per (replicate, budget, policy), in that nesting order.
pub fn run_budget_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let reps = prepare_all(config)?;
    let kinds = config.policy_kinds()?;
    let cells: Vec<(usize, u64)> = (0..reps.len())
        .flat_map(|r| config.budgets.iter().map(move |&b| (r, b)))
        .collect();
    let nested: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(r, budget)| {
            let rep = &reps[r];
            let policies = kinds
                .iter()
                .map(|&k| plan_policy(config, rep, k, budget, config.rho))
                .collect::<Result<Vec<_>>>()?;
            let outcomes = decode_policies(config, rep, &rep.model, &policies)?;
            Ok(kinds
                .iter()
                .zip(&outcomes)
                .map(|(k, o)| row("sweep", config, rep, k.as_str(), budget, config.rho, o))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// SparseMM at every (replicate, budget, ρ).
pub fn run_rho_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let reps = prepare_all(config)?;
    let cells: Vec<(usize, u64)> = (0..reps.len())
        .flat_map(|r| config.budgets.iter().map(move |&b| (r, b)))
        .collect();
    let nested: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|&(r, budget)| {
            let rep = &reps[r];
            let policies = config
                .rhos
                .iter()
                .map(|&rho| plan_policy(config, rep, AllocatorKind::SparseMM, budget, rho))
                .collect::<Result<Vec<_>>>()?;
            let outcomes = decode_policies(config, rep, &rep.model, &policies)?;
            Ok(config
                .rhos
                .iter()
                .zip(&outcomes)
                .map(|(&rho, o)| row("rho", config, rep, AllocatorKind::SparseMM.as_str(), budget, rho, o))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}

/// Mean share of each head's attention that lands on the emitted token's
/// patches, over every corpus token that has a box.
pub fn corpus_grounding(corpus: &[(OcrSample, AttentionTrace)]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for (sample, trace) in corpus {
        let heads = (trace.layers * trace.heads) as f64;
        for (t, region) in token_regions(sample).iter().enumerate() {
            let Some(region) = region else { continue };
            let mass: f64 = trace.rows[t]
                .iter()
                .map(|row| region.iter().map(|&j| row[j]).sum::<f64>())
                .sum();
            sum += mass / heads;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Which heads a masking cell silences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Top,
    Random,
}

impl MaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskKind::None => "none",
            MaskKind::Top => "top",
            MaskKind::Random => "random",
        }
    }
}

/// The heads masked for one cell. Random masks are drawn from all query
/// heads, keyed by the fraction's index so paired replicates share nothing
/// but the seed path.
pub fn mask_set(rep: &Replicate, kind: MaskKind, fraction: f64, fraction_index: usize) -> BTreeSet<(usize, usize)> {
    let geometry = rep.model.geometry();
    let n = geometry.num_query_heads();
    let k = fraction_count(fraction, n);
    match kind {
        MaskKind::None => BTreeSet::new(),
        MaskKind::Top => rep.scores.top_heads(k).into_iter().collect(),
        MaskKind::Random => {
            let mut rng = seed::rng(rep.seed, &[seed::label(RANDOM_MASK), fraction_index as u64]);
            sample_indices(&mut rng, n, k)
                .into_iter()
                .map(|i| (i / geometry.query_heads, i % geometry.query_heads))
                .collect()
        }
    }
}

/// Per replicate: an unmasked baseline row, then top and random masks at
/// each configured fraction. Corpus grounding and planted-head recovery are
/// re-measured on the masked model with the same corpus seeds; decode recall
/// uses the unmasked SparseMM plan at the first configured budget.
pub fn run_masking_study(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let reps = prepare_all(config)?;
    let mut cells: Vec<(usize, MaskKind, f64, usize)> = Vec::new();
    for r in 0..reps.len() {
        cells.push((r, MaskKind::None, 0.0, 0));
        for (fi, &f) in config.mask_fractions.iter().enumerate() {
            cells.push((r, MaskKind::Top, f, fi));
            cells.push((r, MaskKind::Random, f, fi));
        }
    }
    let baselines: Vec<f64> = reps.iter().map(|rep| corpus_grounding(&rep.corpus)).collect();
    let budget = config.budgets[0];
    let planted_fraction = config.planted.fraction_of(&config.geometry);
    cells
        .par_iter()
        .map(|&(r, kind, fraction, fi)| {
            let rep = &reps[r];
            let heads = mask_set(rep, kind, fraction, fi);
            let model = mask_heads(&rep.model, &heads)?;
            let (grounding, rec) = if heads.is_empty() {
                (baselines[r], rep.recovery)
            } else {
                let corpus_seed = seed::derive(rep.seed, &[seed::label(CORPUS)]);
                let corpus = generate_ocr_samples(&model, config.corpus_size, corpus_seed)?;
                let scores = chase_corpus(&corpus)?.matrix;
                (
                    corpus_grounding(&corpus),
                    recovery(&scores, rep.model.planted(), planted_fraction),
                )
            };
            let policy = plan_policy(config, rep, AllocatorKind::SparseMM, budget, config.rho)?;
            let outcome = decode_policies(config, rep, &model, std::slice::from_ref(&policy))?.remove(0);
            let mut out = row("mask", config, rep, AllocatorKind::SparseMM.as_str(), budget, config.rho, &outcome);
            out.recovery_precision = rec.precision;
            out.recovery_recall = rec.recall;
            out.mask = Some(kind.as_str().to_string());
            out.mask_fraction = Some(fraction);
            out.masked_heads = Some(heads.len());
            out.grounding = Some(grounding);
            out.grounding_drop = Some(baselines[r] - grounding);
            out.recovery_drop = Some(rep.recovery.recall - rec.recall);
            Ok(out)
        })
        .collect()
}

/// Peak slots and decode slot reads, full cache against a per-head budget.
///
/// Step `t` reads the `b + t` slots held before appending its own token,
/// and the cache ends at `b + out` slots per head. `b` is capped at the
/// prompt length.
pub fn cost_row(prompt_len: u64, output_len: u64, budget: u64, kv_heads: u64) -> CostRow {
    let b = budget.min(prompt_len);
    let tail = output_len * output_len.saturating_sub(1) / 2;
    let full_peak = kv_heads * (prompt_len + output_len);
    let comp_peak = kv_heads * (b + output_len);
    let full_touches = kv_heads * (output_len * prompt_len + tail);
    let comp_touches = kv_heads * (output_len * b + tail);
    CostRow {
        prompt_len,
        output_len,
        budget,
        kv_heads,
        full_peak_slots: full_peak,
        compressed_peak_slots: comp_peak,
        peak_ratio: comp_peak as f64 / full_peak as f64,
        full_touches,
        compressed_touches: comp_touches,
        touch_speedup: if comp_touches == 0 {
            1.0
        } else {
            full_touches as f64 / comp_touches as f64
        },
    }
}

pub fn run_cost_model(config: &ExperimentConfig) -> Result<Vec<CostRow>> {
    config.validate()?;
    let kv_heads = config.geometry.num_kv_heads() as u64;
    Ok(config
        .cost
        .prompt_lens
        .iter()
        .map(|&lp| cost_row(lp, config.cost.output_len, config.cost.budget, kv_heads))
        .collect())
}
