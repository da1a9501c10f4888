//! Per-head KV-cache budget allocation.
//!
//! The SparseMM allocator splits a global budget `B` over `N` kv heads in
//! three layers:
//!
//! 1. every head keeps a local window of `w` slots, costing `N·w`;
//! 2. a share `ρ` of what is left, `ρ·(B − N·w)`, is spread evenly, giving
//!    each head `r = ρ·(B − N·w) / N` more;
//! 3. the rest, `(1 − ρ)·(B − N·w)`, goes to heads in proportion to their
//!    visual scores.
//!
//! The real-valued budgets `w + r + b_score` are rounded with the largest
//! remainder method (ties to the lower flat index) so that the integer plan
//! sums to exactly `B`.
//!
//! Baselines share the same rounding: an even split, a linearly decaying
//! pyramid over layers, random scores fed through SparseMM, and a per-layer
//! adaptive split that fixes each layer at `B/L` and divides it by score.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chaser::HeadScoreMatrix;
use crate::error::{invalid, Error, Result};
use crate::seed;

pub const DEFAULT_WINDOW: u64 = 32;
pub const DEFAULT_RHO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationConfig {
    /// Cache slots across all kv heads.
    pub total_budget: u64,
    pub window: u64,
    pub rho: f64,
}

impl AllocationConfig {
    pub fn new(total_budget: u64) -> Self {
        Self {
            total_budget,
            window: DEFAULT_WINDOW,
            rho: DEFAULT_RHO,
        }
    }

    pub fn with_window(mut self, window: u64) -> Self {
        self.window = window;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    fn check_rho(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }

    fn check_window_floor(&self, heads: usize) -> Result<()> {
        self.check_rho()?;
        let required = heads as u64 * self.window;
        if self.total_budget < required {
            return Err(Error::InfeasibleBudget {
                budget: self.total_budget,
                required,
            });
        }
        Ok(())
    }
}

/// Layer × kv-head layout of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanShape {
    pub layers: usize,
    pub kv_heads: usize,
}

impl PlanShape {
    pub fn new(layers: usize, kv_heads: usize) -> Result<Self> {
        if layers == 0 || kv_heads == 0 {
            return Err(invalid("plan shape needs at least one layer and one head"));
        }
        Ok(Self { layers, kv_heads })
    }

    pub fn heads(&self) -> usize {
        self.layers * self.kv_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocatorKind {
    SparseMM,
    Uniform,
    Pyramid,
    Random,
    Ada,
}

impl AllocatorKind {
    pub const ALL: [AllocatorKind; 5] = [
        AllocatorKind::SparseMM,
        AllocatorKind::Uniform,
        AllocatorKind::Pyramid,
        AllocatorKind::Random,
        AllocatorKind::Ada,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AllocatorKind::SparseMM => "sparsemm",
            AllocatorKind::Uniform => "uniform",
            AllocatorKind::Pyramid => "pyramid",
            AllocatorKind::Random => "random",
            AllocatorKind::Ada => "ada",
        }
    }
}

impl fmt::Display for AllocatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AllocatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown allocator '{s}'")))
    }
}

/// Real-valued intermediates of the three-part split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitBookkeeping {
    /// `B − N·w`
    pub remain1: f64,
    /// `B − N·w − ρ(B − N·w)`
    pub remain2: f64,
    /// Even per-head share `ρ(B − N·w) / N`.
    pub uniform_share: f64,
}

/// Integer budget per `(layer, kv head)`, summing to the global budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub shape: PlanShape,
    pub budgets: Vec<u64>,
    pub config: AllocationConfig,
    pub allocator: AllocatorKind,
    pub bookkeeping: Option<SplitBookkeeping>,
    pub warnings: Vec<String>,
}

impl BudgetPlan {
    pub fn get(&self, layer: usize, kv_head: usize) -> u64 {
        self.budgets[layer * self.shape.kv_heads + kv_head]
    }

    pub fn total(&self) -> u64 {
        self.budgets.iter().sum()
    }

    pub fn layer_total(&self, layer: usize) -> u64 {
        let k = self.shape.kv_heads;
        self.budgets[layer * k..(layer + 1) * k].iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.budgets.chunks(self.shape.kv_heads).map(<[u64]>::to_vec).collect()
    }
}

/// Largest-remainder rounding of non-negative real quotas to integers that
/// sum to `total`. Equal remainders go to the lower index. Quotas within
/// 1e-9 of an integer are snapped to it first, so `63.999…` from float
/// noise floors to 64 rather than 63.
pub fn apportion(quotas: &[f64], total: u64) -> Vec<u64> {
    const SNAP: f64 = 1e-9;
    if quotas.is_empty() {
        return Vec::new();
    }
    let snapped: Vec<f64> = quotas
        .iter()
        .map(|&q| {
            let r = q.round();
            if (q - r).abs() <= SNAP * r.abs().max(1.0) {
                r
            } else {
                q
            }
        })
        .collect();
    let mut out: Vec<u64> = snapped.iter().map(|q| q.max(0.0).floor() as u64).collect();
    let rem = |i: usize| snapped[i] - snapped[i].floor();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let assigned: u64 = out.iter().sum();
    if assigned < total {
        order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
        let mut need = total - assigned;
        for &i in order.iter().cycle() {
            if need == 0 {
                break;
            }
            out[i] += 1;
            need -= 1;
        }
    } else if assigned > total {
        order.sort_by(|&a, &b| rem(a).total_cmp(&rem(b)).then(b.cmp(&a)));
        let mut excess = assigned - total;
        while excess > 0 {
            let before = excess;
            for &i in &order {
                if excess == 0 {
                    break;
                }
                if out[i] > 0 {
                    out[i] -= 1;
                    excess -= 1;
                }
            }
            if before == excess {
                break;
            }
        }
    }
    out
}

pub fn allocate_sparsemm(scores: &HeadScoreMatrix, config: AllocationConfig) -> Result<BudgetPlan> {
    let shape = PlanShape::new(scores.layers(), scores.heads())?;
    split_three_part(shape, scores.as_slice(), config, AllocatorKind::SparseMM)
}

fn split_three_part(shape: PlanShape, scores: &[f64], config: AllocationConfig, kind: AllocatorKind) -> Result<BudgetPlan> {
    let n = shape.heads();
    config.check_window_floor(n)?;
    let b = config.total_budget as f64;
    let w = config.window as f64;
    let remain1 = b - n as f64 * w;
    let uniform_share = config.rho * remain1 / n as f64;
    let remain2 = remain1 - config.rho * remain1;
    let total_score: f64 = scores.iter().sum();
    let mut warnings = Vec::new();
    let quotas: Vec<f64> = if total_score > 0.0 {
        scores
            .iter()
            .map(|s| w + uniform_share + remain2 * s / total_score)
            .collect()
    } else {
        warnings.push("all head scores are zero; score share split evenly".to_string());
        vec![w + uniform_share + remain2 / n as f64; n]
    };
    Ok(BudgetPlan {
        shape,
        budgets: apportion(&quotas, config.total_budget),
        config,
        allocator: kind,
        bookkeeping: Some(SplitBookkeeping {
            remain1,
            remain2,
            uniform_share,
        }),
        warnings,
    })
}

/// Even split: `floor(B/N)` each, the remainder to the lowest indices.
pub fn allocate_uniform(shape: PlanShape, config: AllocationConfig) -> Result<BudgetPlan> {
    config.check_rho()?;
    let n = shape.heads() as u64;
    if config.total_budget < n {
        return Err(Error::InfeasibleBudget {
            budget: config.total_budget,
            required: n,
        });
    }
    let base = config.total_budget / n;
    let extra = config.total_budget % n;
    let budgets = (0..n).map(|i| base + u64::from(i < extra)).collect();
    Ok(BudgetPlan {
        shape,
        budgets,
        config,
        allocator: AllocatorKind::Uniform,
        bookkeeping: None,
        warnings: Vec::new(),
    })
}

/// Pyramid: after the window floor, layer `l` of `L` receives a share of
/// the excess proportional to `L − l`, so per-layer totals decrease
/// linearly from the first layer to the last. Heads within a layer split
/// evenly.
pub fn allocate_pyramid(shape: PlanShape, config: AllocationConfig) -> Result<BudgetPlan> {
    let n = shape.heads();
    config.check_window_floor(n)?;
    let excess = config.total_budget as f64 - (n as u64 * config.window) as f64;
    let layers = shape.layers as f64;
    let weight_sum = layers * (layers + 1.0) / 2.0;
    let quotas: Vec<f64> = (0..shape.layers)
        .flat_map(|l| {
            let per_head = config.window as f64
                + excess * (layers - l as f64) / (weight_sum * shape.kv_heads as f64);
            std::iter::repeat_n(per_head, shape.kv_heads)
        })
        .collect();
    Ok(BudgetPlan {
        shape,
        budgets: apportion(&quotas, config.total_budget),
        config,
        allocator: AllocatorKind::Pyramid,
        bookkeeping: None,
        warnings: Vec::new(),
    })
}

/// SparseMM fed with i.i.d. `U(0, 1)` scores drawn from `seed`.
pub fn allocate_random(shape: PlanShape, config: AllocationConfig, seed: u64) -> Result<BudgetPlan> {
    let mut rng = seed::rng(seed, &[seed::label("random-scores")]);
    let scores: Vec<f64> = (0..shape.heads()).map(|_| rng.random::<f64>()).collect();
    split_three_part(shape, &scores, config, AllocatorKind::Random)
}

/// Fixed `B/L` per layer; within a layer each head keeps the window and
/// the layer's excess is split by score.
pub fn allocate_adaptive_layer(scores: &HeadScoreMatrix, config: AllocationConfig) -> Result<BudgetPlan> {
    let shape = PlanShape::new(scores.layers(), scores.heads())?;
    config.check_window_floor(shape.heads())?;
    let per_layer = config.total_budget as f64 / shape.layers as f64;
    let w = config.window as f64;
    let k = shape.kv_heads;
    let mut warnings = Vec::new();
    let mut quotas = Vec::with_capacity(shape.heads());
    for l in 0..shape.layers {
        let excess = per_layer - k as f64 * w;
        let layer_scores = &scores.as_slice()[l * k..(l + 1) * k];
        let total: f64 = layer_scores.iter().sum();
        if total > 0.0 {
            quotas.extend(layer_scores.iter().map(|s| w + excess * s / total));
        } else {
            warnings.push(format!("layer {l} has zero total score; split evenly"));
            quotas.extend(std::iter::repeat_n(w + excess / k as f64, k));
        }
    }
    Ok(BudgetPlan {
        shape,
        budgets: apportion(&quotas, config.total_budget),
        config,
        allocator: AllocatorKind::Ada,
        bookkeeping: None,
        warnings,
    })
}

/// Dispatches on `kind`. `scores` supplies the shape for every policy.
pub fn allocate(kind: AllocatorKind, scores: &HeadScoreMatrix, config: AllocationConfig, seed: u64) -> Result<BudgetPlan> {
    let shape = PlanShape::new(scores.layers(), scores.heads())?;
    match kind {
        AllocatorKind::SparseMM => allocate_sparsemm(scores, config),
        AllocatorKind::Uniform => allocate_uniform(shape, config),
        AllocatorKind::Pyramid => allocate_pyramid(shape, config),
        AllocatorKind::Random => allocate_random(shape, config, seed),
        AllocatorKind::Ada => allocate_adaptive_layer(scores, config),
    }
}

/// Plan hand-off file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    #[serde(rename = "budget_B")]
    pub budget: u64,
    pub w: u64,
    pub rho: f64,
    pub plan: Vec<Vec<u64>>,
    pub allocator: String,
    pub score_file_hash: String,
}

impl PlanFile {
    pub fn new(plan: &BudgetPlan, score_file_bytes: &[u8]) -> Self {
        Self {
            budget: plan.config.total_budget,
            w: plan.config.window,
            rho: plan.config.rho,
            plan: plan.rows(),
            allocator: plan.allocator.to_string(),
            score_file_hash: hex::encode(Sha256::digest(score_file_bytes)),
        }
    }

    /// Rebuilds the plan, checking that it is rectangular and conserves `B`.
    pub fn to_plan(&self) -> Result<BudgetPlan> {
        let layers = self.plan.len();
        let kv_heads = self.plan.first().map_or(0, Vec::len);
        let shape = PlanShape::new(layers, kv_heads)?;
        if self.plan.iter().any(|r| r.len() != kv_heads) {
            return Err(Error::DimensionMismatch("plan rows differ in length".into()));
        }
        let budgets: Vec<u64> = self.plan.concat();
        let total: u64 = budgets.iter().sum();
        if total != self.budget {
            return Err(invalid(format!("plan sums to {total}, file says B = {}", self.budget)));
        }
        Ok(BudgetPlan {
            shape,
            budgets,
            config: AllocationConfig {
                total_budget: self.budget,
                window: self.w,
                rho: self.rho,
            },
            allocator: self.allocator.parse()?,
            bookkeeping: None,
            warnings: Vec::new(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(layers: usize, heads: usize, v: &[f64]) -> HeadScoreMatrix {
        HeadScoreMatrix::new(layers, heads, v.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_scores_give_64_each() {
        // B_remain1 = 256 - 128 = 128; r = 3.2; B_remain2 = 115.2; 28.8 each
        let plan = allocate_sparsemm(&scores(1, 4, &[1.0; 4]), AllocationConfig::new(256)).unwrap();
        assert_eq!(plan.budgets, vec![64; 4]);
        let bk = plan.bookkeeping.unwrap();
        assert_eq!(bk.remain1, 128.0);
        assert!((bk.uniform_share - 3.2).abs() < 1e-12);
        assert!((bk.remain2 - 115.2).abs() < 1e-12);
    }

    #[test]
    fn rho_one_ignores_scores() {
        let cfg = AllocationConfig::new(256).with_rho(1.0);
        let plan = allocate_sparsemm(&scores(1, 4, &[0.9, 0.1, 0.0, 0.4]), cfg).unwrap();
        assert_eq!(plan.budgets, vec![64; 4]);
    }

    #[test]
    fn rho_zero_gives_remainder_to_scored_head() {
        let cfg = AllocationConfig::new(256).with_rho(0.0);
        let plan = allocate_sparsemm(&scores(1, 4, &[1.0, 0.0, 0.0, 0.0]), cfg).unwrap();
        assert_eq!(plan.budgets, vec![160, 32, 32, 32]);
    }

    #[test]
    fn infeasible_budget_rejected() {
        let err = allocate_sparsemm(&scores(1, 4, &[1.0; 4]), AllocationConfig::new(127)).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { budget: 127, required: 128 }));
        assert!(allocate_pyramid(PlanShape::new(2, 2).unwrap(), AllocationConfig::new(127)).is_err());
        assert!(allocate_uniform(PlanShape::new(1, 4).unwrap(), AllocationConfig::new(3)).is_err());
    }

    #[test]
    fn zero_scores_fall_back_to_even_split() {
        let plan = allocate_sparsemm(&scores(1, 4, &[0.0; 4]), AllocationConfig::new(256)).unwrap();
        assert_eq!(plan.budgets, vec![64; 4]);
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn uniform_examples() {
        let shape = PlanShape::new(1, 4).unwrap();
        let cfg = |b| AllocationConfig::new(b).with_window(0);
        assert_eq!(allocate_uniform(shape, cfg(256)).unwrap().budgets, vec![64; 4]);
        assert_eq!(allocate_uniform(shape, cfg(10)).unwrap().budgets, vec![3, 3, 2, 2]);
    }

    #[test]
    fn pyramid_two_layers() {
        // excess 172, weights (2, 1)/3 → per head 32 + 57.333 and 32 + 28.667
        // floors 89,89,60,60 = 298; the two .667 remainders get the leftovers
        let plan = allocate_pyramid(PlanShape::new(2, 2).unwrap(), AllocationConfig::new(300)).unwrap();
        assert_eq!(plan.budgets, vec![89, 89, 61, 61]);
        assert!(plan.layer_total(0) > plan.layer_total(1));
    }

    #[test]
    fn pyramid_single_layer_is_uniform() {
        let shape = PlanShape::new(1, 3).unwrap();
        let cfg = AllocationConfig::new(100);
        assert_eq!(
            allocate_pyramid(shape, cfg).unwrap().budgets,
            allocate_uniform(shape, cfg).unwrap().budgets
        );
    }

    #[test]
    fn random_is_seeded() {
        let shape = PlanShape::new(2, 4).unwrap();
        let cfg = AllocationConfig::new(8 * 64);
        let a = allocate_random(shape, cfg, 5).unwrap();
        assert_eq!(a, allocate_random(shape, cfg, 5).unwrap());
        assert_ne!(a.budgets, allocate_random(shape, cfg, 6).unwrap().budgets);
        assert_eq!(a.total(), 512);
    }

    #[test]
    fn random_mean_budget_is_even() {
        let shape = PlanShape::new(2, 4).unwrap();
        // 48 slots per head: window 32 plus 16 to share
        let cfg = AllocationConfig::new(8 * 48);
        let mut sums = [0u64; 8];
        for seed in 0..1000 {
            let plan = allocate_random(shape, cfg, seed).unwrap();
            for (s, b) in sums.iter_mut().zip(&plan.budgets) {
                *s += b;
            }
        }
        for s in sums {
            let mean = s as f64 / 1000.0;
            assert!((mean - 48.0).abs() / 48.0 < 0.02, "mean {mean}");
        }
    }

    #[test]
    fn adaptive_examples() {
        let cfg = AllocationConfig::new(400).with_window(10);
        let equal = scores(2, 2, &[0.5; 4]);
        assert_eq!(
            allocate_adaptive_layer(&equal, cfg).unwrap().budgets,
            allocate_uniform(PlanShape::new(2, 2).unwrap(), cfg).unwrap().budgets
        );
        // each layer holds 200: heads keep 10, the dominant head takes the 180 excess
        let dominant = scores(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let plan = allocate_adaptive_layer(&dominant, cfg).unwrap();
        assert_eq!(plan.budgets, vec![190, 10, 10, 190]);
        assert_eq!(plan.layer_total(0), 200);
    }

    #[test]
    fn plan_file_round_trip() {
        let plan = allocate_sparsemm(&scores(2, 2, &[0.1, 0.2, 0.3, 0.4]), AllocationConfig::new(200).with_window(8)).unwrap();
        let file = PlanFile::new(&plan, b"{}");
        let json = serde_json::to_value(&file).unwrap();
        assert_eq!(json["budget_B"], 200);
        assert_eq!(json["allocator"], "sparsemm");
        assert_eq!(json["score_file_hash"].as_str().unwrap().len(), 64);
        assert_eq!(file.to_plan().unwrap().budgets, plan.budgets);
    }

    #[test]
    fn apportion_handles_ties_and_noise() {
        assert_eq!(apportion(&[2.5, 2.5, 2.5, 2.5], 10), vec![3, 3, 2, 2]);
        assert_eq!(apportion(&[63.999_999_999_999, 64.000_000_000_001], 128), vec![64, 64]);
        assert_eq!(apportion(&[0.0, 0.0], 0), vec![0, 0]);
    }

    fn arb_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, u64, u64, f64)> {
        (1usize..5, 1usize..6).prop_flat_map(|(l, h)| {
            (
                Just(l),
                Just(h),
                prop::collection::vec(0.0f64..10.0, l * h),
                0u64..40,
                0u64..2000,
                0.0f64..=1.0,
            )
        })
    }

    proptest! {
        #[test]
        fn sparsemm_conserves_and_keeps_floor((l, h, s, w, extra, rho) in arb_case()) {
            let n = (l * h) as u64;
            let cfg = AllocationConfig { total_budget: n * w + extra, window: w, rho };
            let plan = allocate_sparsemm(&scores(l, h, &s), cfg).unwrap();
            prop_assert_eq!(plan.total(), cfg.total_budget);
            let r = plan.bookkeeping.unwrap().uniform_share;
            for &b in &plan.budgets {
                prop_assert!(b >= w + r.floor() as u64);
            }
        }

        #[test]
        fn sparsemm_monotone_in_score((l, h, s, w, extra, rho) in arb_case()) {
            prop_assume!(rho < 1.0);
            let n = (l * h) as u64;
            let cfg = AllocationConfig { total_budget: n * w + extra, window: w, rho };
            let plan = allocate_sparsemm(&scores(l, h, &s), cfg).unwrap();
            for a in 0..s.len() {
                for c in 0..s.len() {
                    if s[a] > s[c] {
                        prop_assert!(plan.budgets[a] >= plan.budgets[c]);
                    }
                }
            }
        }

        #[test]
        fn sparsemm_scale_invariant((l, h, s, w, extra, rho) in arb_case(), k in 0.01f64..100.0) {
            let n = (l * h) as u64;
            let cfg = AllocationConfig { total_budget: n * w + extra, window: w, rho };
            let scaled: Vec<f64> = s.iter().map(|v| v * k).collect();
            prop_assert_eq!(
                allocate_sparsemm(&scores(l, h, &s), cfg).unwrap().budgets,
                allocate_sparsemm(&scores(l, h, &scaled), cfg).unwrap().budgets
            );
        }

        #[test]
        fn rho_one_matches_uniform((l, h, s, w, extra, _rho) in arb_case()) {
            let n = (l * h) as u64;
            let cfg = AllocationConfig { total_budget: n * w + extra, window: w, rho: 1.0 };
            prop_assert_eq!(
                allocate_sparsemm(&scores(l, h, &s), cfg).unwrap().budgets,
                allocate_uniform(PlanShape::new(l, h).unwrap(), cfg).unwrap().budgets
            );
        }

        #[test]
        fn pyramid_layers_non_increasing((l, h, _s, w, extra, _rho) in arb_case()) {
            let n = (l * h) as u64;
            let cfg = AllocationConfig::new(n * w + extra).with_window(w);
            let plan = allocate_pyramid(PlanShape::new(l, h).unwrap(), cfg).unwrap();
            prop_assert_eq!(plan.total(), cfg.total_budget);
            for layer in 1..l {
                prop_assert!(plan.layer_total(layer - 1) >= plan.layer_total(layer));
            }
            prop_assert!(plan.budgets.iter().all(|&b| b >= w));
        }

        #[test]
        fn adaptive_layer_totals_near_even((l, h, s, w, extra, _rho) in arb_case()) {
            let n = (l * h) as u64;
            let cfg = AllocationConfig::new(n * w + extra).with_window(w);
            let plan = allocate_adaptive_layer(&scores(l, h, &s), cfg).unwrap();
            prop_assert_eq!(plan.total(), cfg.total_budget);
            let target = cfg.total_budget as f64 / l as f64;
            for layer in 0..l {
                prop_assert!((plan.layer_total(layer) as f64 - target).abs() <= h as f64);
            }
        }
    }
}
