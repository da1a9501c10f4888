use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{AllocatorKind, DEFAULT_RHO, DEFAULT_WINDOW};
use crate::error::{invalid, Result};
use crate::sim::{ModelGeometry, PlantedHead, PlantedHeadSet, SimParams};

/// Experiment description, read from a single JSON file. Every field has a
/// default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: ModelGeometry,
    pub planted: PlantedSpec,
    /// OCR samples chased per replicate.
    pub corpus_size: usize,
    /// Prompt length of each decode sample.
    pub prompt_len: usize,
    /// Tokens decoded per decode sample.
    pub output_len: usize,
    /// Decode samples per replicate and cell.
    pub decode_samples: usize,
    /// Observation and local window size.
    pub window: usize,
    /// Per-head budgets, each at least `window`.
    pub budgets: Vec<u64>,
    /// ρ for the budget sweep and the masking study.
    pub rho: f64,
    /// ρ values for the ρ sweep.
    pub rhos: Vec<f64>,
    pub policies: Vec<String>,
    /// Masking fractions of all query heads.
    pub mask_fractions: Vec<f64>,
    pub seed: u64,
    pub replicates: usize,
    pub sim: SimParams,
    pub cost: CostConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            geometry: ModelGeometry::mha(8, 8, 64),
            planted: PlantedSpec::default(),
            corpus_size: 200,
            prompt_len: 512,
            output_len: 32,
            decode_samples: 2,
            window: DEFAULT_WINDOW as usize,
            budgets: vec![48, 64, 128],
            rho: DEFAULT_RHO,
            rhos: (0..=10).map(|i| i as f64 / 10.0).collect(),
            policies: ["sparsemm", "uniform", "random"].map(String::from).to_vec(),
            mask_fractions: vec![0.02, 0.05, 0.1],
            seed: 0,
            replicates: 5,
            sim: SimParams::default(),
            cost: CostConfig::default(),
            out_dir: None,
        }
    }
}

/// Planted heads: either a random `fraction` of query heads at one
/// `strength`, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    pub fraction: f64,
    pub strength: f64,
    pub heads: Option<Vec<PlantedHead>>,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            strength: 0.8,
            heads: None,
        }
    }
}

impl PlantedSpec {
    pub fn build(&self, geometry: &ModelGeometry, seed: u64) -> Result<PlantedHeadSet> {
        match &self.heads {
            Some(heads) => {
                if let Some(h) = heads
                    .iter()
                    .find(|h| h.layer >= geometry.layers || h.head >= geometry.query_heads)
                {
                    return Err(invalid(format!("planted head ({}, {}) is out of range", h.layer, h.head)));
                }
                PlantedHeadSet::new(heads.clone())
            }
            None => PlantedHeadSet::random(geometry, self.fraction, self.strength, seed),
        }
    }

    /// Share of query heads that are planted.
    pub fn fraction_of(&self, geometry: &ModelGeometry) -> f64 {
        match &self.heads {
            Some(h) => h.len() as f64 / geometry.num_query_heads() as f64,
            None => self.fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub prompt_lens: Vec<u64>,
    pub budget: u64,
    pub output_len: u64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            prompt_lens: vec![2048, 4096, 8192, 16384, 32768],
            budget: 256,
            output_len: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn policy_kinds(&self) -> Result<Vec<AllocatorKind>> {
        self.policies.iter().map(|p| p.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let p = &self.planted;
        if p.heads.is_none() && !((0.0..=1.0).contains(&p.fraction) && (0.0..=1.0).contains(&p.strength)) {
            return Err(invalid("planted fraction and strength must lie in [0, 1]"));
        }
        for (name, v) in [
            ("corpus_size", self.corpus_size),
            ("decode_samples", self.decode_samples),
            ("replicates", self.replicates),
            ("window", self.window),
            ("output_len", self.output_len),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be at least 1")));
            }
        }
        if self.prompt_len < self.window.max(3) {
            return Err(invalid(format!(
                "prompt_len {} must be at least the window {} and at least 3",
                self.prompt_len, self.window
            )));
        }
        if self.budgets.is_empty() {
            return Err(invalid("budgets must not be empty"));
        }
        if let Some(b) = self.budgets.iter().find(|&&b| b < self.window as u64) {
            return Err(invalid(format!("per-head budget {b} is below the window {}", self.window)));
        }
        if let Some(r) = std::iter::once(&self.rho)
            .chain(&self.rhos)
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(invalid(format!("rho {r} outside [0, 1]")));
        }
        if self.rhos.is_empty() {
            return Err(invalid("rhos must not be empty"));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies must not be empty"));
        }
        self.policy_kinds()?;
        if let Some(f) = self.mask_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(invalid(format!("mask fraction {f} outside (0, 1]")));
        }
        if self.cost.prompt_lens.is_empty() || self.cost.prompt_lens.contains(&0) || self.cost.budget == 0 {
            return Err(invalid("cost prompt lengths and budget must be positive"));
        }
        Ok(())
    }
}
