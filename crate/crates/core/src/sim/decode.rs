//! Decode loop driving a cache policy against the model's full attention.

use serde::{Deserialize, Serialize};

use super::{token_regions, ModelGeometry, OcrSample, SyntheticModel, WindowTrace};
use crate::cache::{decode_step, KvCache};
use crate::error::{invalid, Error, Result};

/// What a cache policy sees at the end of prefill.
pub struct PrefillView<'a> {
    pub geometry: &'a ModelGeometry,
    pub sample: &'a OcrSample,
    pub window: &'a WindowTrace,
}

/// Builds the post-prefill cache.
pub trait CachePolicy: Sync {
    fn name(&self) -> String;
    fn prefill(&self, view: &PrefillView<'_>) -> Result<KvCache>;
}

/// Keeps the whole prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullCache;

impl CachePolicy for FullCache {
    fn name(&self) -> String {
        "full".to_string()
    }

    fn prefill(&self, view: &PrefillView<'_>) -> Result<KvCache> {
        Ok(KvCache::full(
            view.geometry.layers,
            view.geometry.kv_heads,
            view.sample.prompt_len(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeRequest {
    pub prompt_len: usize,
    pub out_len: usize,
    pub window: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub policy: String,
    /// Mean captured attention mass per step.
    pub recall: Vec<f64>,
    /// Slots read per step, summed over kv heads.
    pub retained: Vec<usize>,
    pub peak_retained: usize,
    /// Attention mass on the current token's ground-truth patches that
    /// falls on retained slots, summed over query heads, per step.
    pub grounding: Vec<f64>,
    /// Same, with nothing evicted.
    pub full_grounding: Vec<f64>,
}

impl DecodeRecord {
    pub fn mean_recall(&self) -> f64 {
        mean(&self.recall)
    }

    /// Total slot reads across all steps.
    pub fn slot_touches(&self) -> u64 {
        self.retained.iter().map(|&r| r as u64).sum()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Decodes a fresh sample of exactly `prompt_len` prompt tokens for
/// `out_len` steps under `policy`.
pub fn decode_with_cache(model: &SyntheticModel, req: DecodeRequest, policy: &dyn CachePolicy) -> Result<DecodeRecord> {
    if req.prompt_len < req.window {
        return Err(invalid(format!(
            "prompt length {} is shorter than the window {}",
            req.prompt_len, req.window
        )));
    }
    let sample = model.sample_with_prompt_len(req.prompt_len, req.out_len, req.seed)?;
    let mut records = decode_sample(model, &sample, req.seed, req.window, &[policy])?;
    Ok(records.remove(0))
}

/// Decodes one sample under several policies. The model's rows are
/// generated once and shared, so the policies see identical attention.
pub fn decode_sample(
    model: &SyntheticModel,
    sample: &OcrSample,
    sample_seed: u64,
    window: usize,
    policies: &[&dyn CachePolicy],
) -> Result<Vec<DecodeRecord>> {
    let geometry = model.geometry();
    let lp = sample.prompt_len();
    let window_trace = model.window(sample, sample_seed, window)?;
    let view = PrefillView {
        geometry,
        sample,
        window: &window_trace,
    };
    let mut caches = Vec::with_capacity(policies.len());
    for p in policies {
        let cache = p.prefill(&view)?;
        if cache.layers != geometry.layers || cache.kv_heads != geometry.kv_heads || cache.prompt_len != lp {
            return Err(Error::Policy(format!(
                "policy '{}' returned a {}x{} cache over {} positions, expected {}x{} over {lp}",
                p.name(),
                cache.layers,
                cache.kv_heads,
                cache.prompt_len,
                geometry.layers,
                geometry.kv_heads
            )));
        }
        if cache.context_len != lp {
            return Err(Error::Policy(format!("policy '{}' returned a cache past prefill", p.name())));
        }
        cache.validate()?;
        caches.push(cache);
    }
    let mut records: Vec<DecodeRecord> = policies
        .iter()
        .map(|p| DecodeRecord {
            policy: p.name(),
            recall: Vec::new(),
            retained: Vec::new(),
            peak_retained: 0,
            grounding: Vec::new(),
            full_grounding: Vec::new(),
        })
        .collect();
    // Prompt slots never change after prefill, so membership is fixed.
    let prompt_masks: Vec<Vec<Vec<bool>>> = caches
        .iter()
        .map(|c| {
            c.heads
                .iter()
                .map(|h| {
                    let mut m = vec![false; lp];
                    h.positions().filter(|&p| p < lp).for_each(|p| m[p] = true);
                    m
                })
                .collect()
        })
        .collect();
    let targets = token_regions(sample);
    for t in 0..sample.output_tokens.len() {
        let target = targets[t].as_deref();
        let rows = model.decode_rows(sample, sample_seed, t, target);
        let full_ground = target.map_or(0.0, |tg| {
            rows.iter().map(|r| tg.iter().map(|&j| r[j]).sum::<f64>()).sum()
        });
        for ((cache, rec), masks) in caches.iter_mut().zip(records.iter_mut()).zip(&prompt_masks) {
            let ground = target.map_or(0.0, |tg| {
                rows.iter()
                    .enumerate()
                    .map(|(q, row)| {
                        let mask = &masks[geometry.kv_of(q)];
                        tg.iter().filter(|&&j| mask[j]).map(|&j| row[j]).sum::<f64>()
                    })
                    .sum()
            });
            let stats = decode_step(cache, &rows, None, t)?;
            rec.recall.push(stats.recall);
            rec.retained.push(stats.retained_slots);
            rec.peak_retained = rec.peak_retained.max(stats.slots_after);
            rec.grounding.push(ground);
            rec.full_grounding.push(full_ground);
        }
    }
    Ok(records)
}
