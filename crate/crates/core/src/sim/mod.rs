//! Synthetic attention model with planted visual heads.
//!
//! Attention rows are generated directly rather than computed from learned
//! weights, which gives exact ground truth for which heads are visual.
//!
//! Every head draws a background row from its own [`HeadProfile`]: a strong
//! sink on position 0, a bias toward text tokens, a strong penalty on image
//! tokens, a recency bump and Gaussian logit noise. About a fifth of all
//! heads are "glancers" that fix on one random image patch per
//! row, which gives chance-level hit rates. A planted head with strength `s`
//! overrides its background with probability `s` by lifting the whole target
//! region above the row maximum. The target region is the current token's
//! box while decoding, and the union of all text boxes for the observation
//! window. Masked heads emit uniform rows.
//!
//! Randomness is keyed per `(sample, row kind, row, head)`, so planting or
//! masking one head leaves every other head's rows bit-identical.

mod corpus;
mod decode;
mod sample;

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::{read_corpus, write_corpus};
pub use decode::{
    decode_sample, decode_with_cache, CachePolicy, DecodeRecord, DecodeRequest, FullCache, PrefillView,
};
pub use sample::{
    AttentionTrace, BBox, ImageShape, OcrPair, OcrSample, PatchGrid, TokenId, TokenRole, TraceRecord,
    WindowRecord, WindowTrace,
};

use crate::chaser::match_bbox_to_patches;
use crate::error::{invalid, Result};
use crate::seed;
use crate::tensor::{softmax_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl ModelGeometry {
    pub fn mha(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers,
            query_heads: heads,
            kv_heads: heads,
            head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.query_heads == 0 || self.kv_heads == 0 || self.head_dim == 0 {
            return Err(invalid(format!("geometry has a zero dimension: {self:?}")));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(invalid(format!(
                "{} query heads not divisible by {} kv heads",
                self.query_heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Query heads per kv head.
    pub fn group(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    pub fn num_query_heads(&self) -> usize {
        self.layers * self.query_heads
    }

    pub fn num_kv_heads(&self) -> usize {
        self.layers * self.kv_heads
    }

    /// Flat kv-head index serving flat query head `q`.
    pub fn kv_of(&self, q: usize) -> usize {
        let (layer, head) = (q / self.query_heads, q % self.query_heads);
        layer * self.kv_heads + head / self.group()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    pub strength: f64,
}

/// Ground-truth visual heads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantedHeadSet {
    entries: Vec<PlantedHead>,
}

impl PlantedHeadSet {
    pub fn new(mut entries: Vec<PlantedHead>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| !(0.0..=1.0).contains(&e.strength)) {
            return Err(invalid(format!("planted strength {} outside [0, 1]", bad.strength)));
        }
        entries.sort_by_key(|e| (e.layer, e.head));
        if entries.windows(2).any(|w| (w[0].layer, w[0].head) == (w[1].layer, w[1].head)) {
            return Err(invalid("a head is planted twice"));
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `round(fraction · heads)` distinct heads (at least one when
    /// `fraction > 0`), drawn uniformly with `seed`.
    pub fn random(geometry: &ModelGeometry, fraction: f64, strength: f64, seed: u64) -> Result<Self> {
        geometry.validate()?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid(format!("planted fraction {fraction} outside [0, 1]")));
        }
        let n = geometry.num_query_heads();
        let count = fraction_count(fraction, n);
        let mut rng = seed::rng(seed, &[seed::label("planted")]);
        let picked = rand::seq::index::sample(&mut rng, n, count);
        Self::new(
            picked
                .into_iter()
                .map(|flat| PlantedHead {
                    layer: flat / geometry.query_heads,
                    head: flat % geometry.query_heads,
                    strength,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PlantedHead] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn heads(&self) -> BTreeSet<(usize, usize)> {
        self.entries.iter().map(|e| (e.layer, e.head)).collect()
    }
}

/// `round(fraction · n)`, but never zero for a positive fraction.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    if fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Background attention habits of one head, as logit offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    pub sink: f64,
    pub text_bias: f64,
    pub image_bias: f64,
    pub recency: f64,
    /// Fixates on one random image patch per row.
    pub glance: bool,
}

/// Inclusive ranges for randomly shaped OCR samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleShape {
    pub image_side: (u32, u32),
    pub grid_rows: (usize, usize),
    pub grid_cols: (usize, usize),
    pub output_tokens: (usize, usize),
    pub instruction_tokens: (usize, usize),
}

impl Default for SampleShape {
    fn default() -> Self {
        Self {
            image_side: (224, 672),
            grid_rows: (4, 12),
            grid_cols: (4, 12),
            output_tokens: (3, 8),
            instruction_tokens: (4, 12),
        }
    }
}

impl SampleShape {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !(ok(self.grid_rows)
            && ok(self.grid_cols)
            && ok(self.output_tokens)
            && ok(self.instruction_tokens)
            && self.image_side.0 >= 16
            && self.image_side.0 <= self.image_side.1)
        {
            return Err(invalid(format!("invalid sample shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Standard deviation of per-position logit noise.
    pub noise_sd: f64,
    /// How far a planted hit lifts the target region above the row maximum.
    pub hit_margin: f64,
    /// Share of heads that glance at a random image patch.
    pub glance_fraction: f64,
    /// Decay length of the recency bump, in positions.
    pub recency_span: f64,
    pub sample_shape: SampleShape,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            noise_sd: 0.5,
            hit_margin: 2.0,
            glance_fraction: 0.2,
            recency_span: 4.0,
            sample_shape: SampleShape::default(),
        }
    }
}

/// Deterministic generator of attention traces.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    geometry: ModelGeometry,
    planted: PlantedHeadSet,
    strength: Vec<Option<f64>>,
    masked: Vec<bool>,
    profiles: Vec<HeadProfile>,
    params: SimParams,
    seed: u64,
}

pub fn build_synthetic_model(geometry: ModelGeometry, planted: PlantedHeadSet, seed: u64) -> Result<SyntheticModel> {
    SyntheticModel::with_params(geometry, planted, seed, SimParams::default())
}

/// Copy of `model` whose listed `(layer, query_head)` heads attend uniformly.
pub fn mask_heads(model: &SyntheticModel, heads: &BTreeSet<(usize, usize)>) -> Result<SyntheticModel> {
    let mut out = model.clone();
    for &(l, h) in heads {
        if l >= model.geometry.layers || h >= model.geometry.query_heads {
            return Err(invalid(format!("cannot mask head ({l}, {h}): out of range")));
        }
        out.masked[l * model.geometry.query_heads + h] = true;
    }
    Ok(out)
}

/// `n` samples with their decode traces. Sample `i` uses seed
/// `derive(seed, [i])`.
pub fn generate_ocr_samples(model: &SyntheticModel, n: usize, seed: u64) -> Result<Vec<(OcrSample, AttentionTrace)>> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(seed, &[i as u64]);
            let sample = model.random_sample(s)?;
            let trace = model.trace(&sample, s)?;
            Ok((sample, trace))
        })
        .collect()
}

struct RowSpec<'a> {
    layout: &'a [TokenRole],
    visible: usize,
    query_pos: usize,
    target: Option<&'a [usize]>,
}

const DECODE_ROW: u64 = 0;
const WINDOW_ROW: u64 = 1;

impl SyntheticModel {
    pub fn with_params(geometry: ModelGeometry, planted: PlantedHeadSet, seed: u64, params: SimParams) -> Result<Self> {
        geometry.validate()?;
        params.sample_shape.validate()?;
        let n = geometry.num_query_heads();
        let mut strength = vec![None; n];
        for e in planted.entries() {
            if e.layer >= geometry.layers || e.head >= geometry.query_heads {
                return Err(invalid(format!(
                    "planted head ({}, {}) outside {}x{} geometry",
                    e.layer, e.head, geometry.layers, geometry.query_heads
                )));
            }
            strength[e.layer * geometry.query_heads + e.head] = Some(e.strength);
        }
        let profiles = (0..n)
            .map(|flat| {
                let mut rng = seed::rng(seed, &[seed::label("profile"), flat as u64]);
                HeadProfile {
                    sink: rng.random_range(3.5..5.0),
                    text_bias: rng.random_range(0.5..2.0),
                    image_bias: rng.random_range(-6.0..-4.0),
                    recency: rng.random_range(0.5..2.0),
                    glance: rng.random::<f64>() < params.glance_fraction,
                }
            })
            .collect();
        Ok(Self {
            geometry,
            planted,
            strength,
            masked: vec![false; n],
            profiles,
            params,
            seed,
        })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn planted(&self) -> &PlantedHeadSet {
        &self.planted
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn profile(&self, layer: usize, head: usize) -> &HeadProfile {
        &self.profiles[layer * self.geometry.query_heads + head]
    }

    pub fn is_masked(&self, layer: usize, head: usize) -> bool {
        self.masked[layer * self.geometry.query_heads + head]
    }

    /// Random OCR sample following the model's [`SampleShape`].
    pub fn random_sample(&self, sample_seed: u64) -> Result<OcrSample> {
        let shape = self.params.sample_shape;
        let mut rng = seed::rng(sample_seed, &[seed::label("sample")]);
        let rows = rng.random_range(shape.grid_rows.0..=shape.grid_rows.1);
        let cols = rng.random_range(shape.grid_cols.0..=shape.grid_cols.1);
        let outputs = rng.random_range(shape.output_tokens.0..=shape.output_tokens.1);
        let instr = rng.random_range(shape.instruction_tokens.0..=shape.instruction_tokens.1);
        build_sample(&mut rng, shape.image_side, PatchGrid { rows, cols }, instr, outputs)
    }

    /// Sample whose prompt is exactly `prompt_len` tokens: a BOS token, a
    /// near-square patch grid and an instruction filling the rest.
    pub fn sample_with_prompt_len(&self, prompt_len: usize, out_len: usize, sample_seed: u64) -> Result<OcrSample> {
        if prompt_len < 3 {
            return Err(invalid(format!("prompt length {prompt_len} is below the minimum of 3")));
        }
        let min_instr = (prompt_len / 16).clamp(1, 24);
        let avail = prompt_len - 1 - min_instr;
        let rows = (avail as f64).sqrt().floor().max(1.0) as usize;
        let cols = (avail / rows).max(1);
        let instr = prompt_len - 1 - rows * cols;
        let mut rng = seed::rng(sample_seed, &[seed::label("sample")]);
        build_sample(&mut rng, self.params.sample_shape.image_side, PatchGrid { rows, cols }, instr, out_len)
    }

    /// Attention rows for every emitted token of `sample`.
    pub fn trace(&self, sample: &OcrSample, sample_seed: u64) -> Result<AttentionTrace> {
        let targets = token_regions(sample);
        let rows = (0..sample.output_tokens.len())
            .map(|t| self.decode_rows(sample, sample_seed, t, targets[t].as_deref()))
            .collect();
        Ok(AttentionTrace {
            layers: self.geometry.layers,
            heads: self.geometry.query_heads,
            rows,
        })
    }

    /// Rows of decode step `t` for every flat query head; each covers
    /// `prompt_len + t` positions.
    pub(crate) fn decode_rows(&self, sample: &OcrSample, sample_seed: u64, t: usize, target: Option<&[usize]>) -> Vec<Vec<f64>> {
        let lp = sample.prompt_len();
        let spec = RowSpec {
            layout: &sample.prompt_layout,
            visible: lp + t,
            query_pos: lp + t,
            target,
        };
        (0..self.geometry.num_query_heads())
            .map(|flat| {
                let mut rng = seed::rng(self.seed, &[sample_seed, DECODE_ROW, t as u64, flat as u64]);
                self.row(flat, &spec, &mut rng)
            })
            .collect()
    }

    /// Observation-window attention for the last `w` prompt positions.
    pub fn window(&self, sample: &OcrSample, sample_seed: u64, w: usize) -> Result<WindowTrace> {
        let lp = sample.prompt_len();
        if w == 0 || w > lp {
            return Err(invalid(format!("window {w} does not fit prompt of {lp}")));
        }
        let union = union_region(sample);
        let target = (!union.is_empty()).then_some(union.as_slice());
        let heads = (0..self.geometry.num_query_heads())
            .map(|flat| {
                let mut data = vec![0.0; w * lp];
                for i in 0..w {
                    let abs = lp - w + i;
                    let spec = RowSpec {
                        layout: &sample.prompt_layout,
                        visible: abs + 1,
                        query_pos: abs,
                        target,
                    };
                    let mut rng = seed::rng(self.seed, &[sample_seed, WINDOW_ROW, i as u64, flat as u64]);
                    let row = self.row(flat, &spec, &mut rng);
                    data[i * lp..i * lp + row.len()].copy_from_slice(&row);
                }
                Matrix::new(w, lp, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WindowTrace { size: w, heads })
    }

    fn row(&self, flat: usize, spec: &RowSpec<'_>, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = spec.visible;
        // Drawn unconditionally so planting never shifts the noise stream.
        let hit_draw: f64 = rng.random();
        if self.masked[flat] {
            return vec![1.0 / n as f64; n];
        }
        let prof = &self.profiles[flat];
        let noise = Normal::new(0.0, self.params.noise_sd).expect("noise sd is finite and non-negative");
        let mut logits: Vec<f64> = (0..n)
            .map(|j| {
                let base = if j == 0 {
                    prof.sink
                } else {
                    match spec.layout.get(j) {
                        Some(TokenRole::Image(_)) => prof.image_bias,
                        _ => prof.text_bias,
                    }
                };
                let dist = (spec.query_pos - j) as f64;
                base + prof.recency * (-dist / self.params.recency_span).exp() + noise.sample(rng)
            })
            .collect();
        if prof.glance {
            let images: Vec<usize> = (0..n.min(spec.layout.len()))
                .filter(|&j| matches!(spec.layout[j], TokenRole::Image(_)))
                .collect();
            if !images.is_empty() {
                let g = images[rng.random_range(0..images.len())];
                logits[g] = prof.sink + 1.0;
            }
        }
        if let (Some(s), Some(target)) = (self.strength[flat], spec.target) {
            if hit_draw < s {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for &j in target.iter().filter(|&&j| j < n) {
                    logits[j] = max + self.params.hit_margin + rng.random_range(0.0..0.5);
                }
            }
        }
        let mut out = vec![0.0; n];
        softmax_into(&logits, &mut out);
        out
    }
}

fn build_sample(rng: &mut ChaCha8Rng, side: (u32, u32), grid: PatchGrid, instr: usize, outputs: usize) -> Result<OcrSample> {
    let height = rng.random_range(side.0..=side.1);
    let width = rng.random_range(side.0..=side.1);
    let mut layout = Vec::with_capacity(1 + grid.len() + instr);
    layout.push(TokenRole::Text);
    layout.extend((0..grid.len()).map(TokenRole::Image));
    layout.extend(std::iter::repeat_n(TokenRole::Text, instr));
    let pairs: Vec<OcrPair> = (0..outputs)
        .map(|t| {
            let bw = ((width as f64 * rng.random_range(0.05..0.35)) as u32).max(1);
            let bh = ((height as f64 * rng.random_range(0.03..0.12)) as u32).max(1);
            let x0 = rng.random_range(0..=width - bw);
            let y0 = rng.random_range(0..=height - bh);
            OcrPair {
                text: 1000 + t as TokenId,
                bbox: BBox::new(x0, y0, x0 + bw, y0 + bh),
            }
        })
        .collect();
    let sample = OcrSample {
        image_shape: ImageShape { height, width },
        grid,
        output_tokens: pairs.iter().map(|p| p.text).collect(),
        pairs,
        prompt_layout: layout,
    };
    sample.validate()?;
    Ok(sample)
}

/// Prompt positions under each emitted token's box, when it has one.
pub fn token_regions(sample: &OcrSample) -> Vec<Option<Vec<usize>>> {
    let patch_pos = sample.patch_positions();
    sample
        .output_tokens
        .iter()
        .map(|&tok| {
            let pair = sample.pair_for(tok)?;
            let set = match_bbox_to_patches(pair.bbox, sample.image_shape, sample.grid).ok()?;
            let pos = set.positions(&patch_pos);
            (!pos.is_empty()).then_some(pos)
        })
        .collect()
}

fn union_region(sample: &OcrSample) -> Vec<usize> {
    let set: BTreeSet<usize> = token_regions(sample).into_iter().flatten().flatten().collect();
    set.into_iter().collect()
}
