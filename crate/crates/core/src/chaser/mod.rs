//! Visual-head chasing.
//!
//! Each emitted OCR token is traced back to the image patches under its
//! ground-truth box. A head scores a hit when the global argmax of its
//! attention row lands on one of those patches, and the hit is worth
//! `1 / #patches`, so precise localisation outweighs coarse localisation.
//! Per-sample increments are summed over the corpus, divided by the number
//! of scored tokens and min-max normalized.

mod patches;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use patches::{match_bbox_to_patches, PatchIndexSet};

use crate::error::{invalid, Error, Result};
use crate::sim::{AttentionTrace, OcrSample};
use crate::tensor::argmax_row;

/// `layers × heads` non-negative head scores, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreMatrix {
    layers: usize,
    heads: usize,
    scores: Vec<f64>,
}

impl HeadScoreMatrix {
    pub fn new(layers: usize, heads: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != layers * heads {
            return Err(Error::DimensionMismatch(format!(
                "{layers}x{heads} score matrix needs {} entries, got {}",
                layers * heads,
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(invalid(format!("score {i} is negative or non-finite")));
        }
        Ok(Self { layers, heads, scores })
    }

    pub fn zeros(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            scores: vec![0.0; layers * heads],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.heads + head]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    pub fn layer_total(&self, layer: usize) -> f64 {
        self.scores[layer * self.heads..(layer + 1) * self.heads].iter().sum()
    }

    /// The `k` highest-scoring heads as `(layer, head)`, best first. Ties go
    /// to the lower flat index.
    pub fn top_heads(&self, k: usize) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(k)
            .map(|i| (i / self.heads, i % self.heads))
            .collect()
    }

    fn add_assign(&mut self, other: &HeadScoreMatrix) {
        for (a, b) in self.scores.iter_mut().zip(&other.scores) {
            *a += b;
        }
    }

    fn check_same_shape(&self, other: &HeadScoreMatrix) -> Result<()> {
        if self.layers != other.layers || self.heads != other.heads {
            return Err(Error::DimensionMismatch(format!(
                "score matrices {}x{} and {}x{} differ",
                self.layers, self.heads, other.layers, other.heads
            )));
        }
        Ok(())
    }
}

/// Unnormalized per-sample contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScore {
    pub increment: HeadScoreMatrix,
    pub scored_tokens: usize,
    /// Tokens with no usable `(text, bbox)` match; neither hits nor misses.
    pub skipped_tokens: usize,
}

/// Hit-scores every head on one sample.
pub fn score_sample(sample: &OcrSample, trace: &AttentionTrace) -> Result<SampleScore> {
    sample.validate()?;
    trace.validate(sample.prompt_len())?;
    let patch_pos = sample.patch_positions();
    let total_rows = sample.prompt_len() + trace.tokens();
    let mut in_region = vec![false; total_rows];
    let mut increment = HeadScoreMatrix::zeros(trace.layers, trace.heads);
    let (mut scored, mut skipped) = (0, 0);

    for t in 0..trace.tokens() {
        let region = sample
            .output_tokens
            .get(t)
            .and_then(|&tok| sample.pair_for(tok))
            .and_then(|pair| match_bbox_to_patches(pair.bbox, sample.image_shape, sample.grid).ok())
            .map(|set| set.positions(&patch_pos))
            .filter(|pos| !pos.is_empty());
        let Some(region) = region else {
            skipped += 1;
            continue;
        };
        scored += 1;
        for &p in &region {
            in_region[p] = true;
        }
        let weight = 1.0 / region.len() as f64;
        for (h, row) in trace.rows[t].iter().enumerate() {
            if in_region[argmax_row(row)?] {
                increment.scores[h] += weight;
            }
        }
        for &p in &region {
            in_region[p] = false;
        }
    }
    Ok(SampleScore {
        increment,
        scored_tokens: scored,
        skipped_tokens: skipped,
    })
}

/// Sums increments, divides by the total token count and min-max
/// normalizes to `[0, 1]`.
///
/// A matrix whose entries are all equal normalizes to all ones when they are
/// positive and stays all zeros otherwise.
pub fn aggregate_corpus(increments: &[HeadScoreMatrix], token_counts: &[usize]) -> Result<HeadScoreMatrix> {
    let first = increments
        .first()
        .ok_or_else(|| invalid("no score increments to aggregate"))?;
    if increments.len() != token_counts.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} increments but {} token counts",
            increments.len(),
            token_counts.len()
        )));
    }
    let n: usize = token_counts.iter().sum();
    if n == 0 {
        return Err(invalid("corpus has zero scored tokens"));
    }
    let mut acc = HeadScoreMatrix::zeros(first.layers, first.heads);
    for inc in increments {
        acc.check_same_shape(inc)?;
        acc.add_assign(inc);
    }
    for s in &mut acc.scores {
        *s /= n as f64;
    }
    Ok(normalize_minmax(acc))
}

fn normalize_minmax(mut m: HeadScoreMatrix) -> HeadScoreMatrix {
    let min = m.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = m.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for s in &mut m.scores {
        *s = if span > 0.0 {
            (*s - min) / span
        } else if max > 0.0 {
            1.0
        } else {
            0.0
        };
    }
    m
}

/// Sums each consecutive block of `group` query heads into one kv-head
/// score.
pub fn aggregate_gqa_scores(scores: &HeadScoreMatrix, group: usize) -> Result<HeadScoreMatrix> {
    if group == 0 || scores.heads % group != 0 {
        return Err(invalid(format!(
            "{} query heads are not divisible into groups of {group}",
            scores.heads
        )));
    }
    let kv = scores.heads / group;
    let out = scores
        .scores
        .chunks(group)
        .map(|block| block.iter().sum())
        .collect();
    HeadScoreMatrix::new(scores.layers, kv, out)
}

/// Normalized corpus scores plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScores {
    pub matrix: HeadScoreMatrix,
    pub corpus_tokens: usize,
    pub skipped_tokens: usize,
}

/// Scores every sample in parallel and reduces in input order.
pub fn chase_corpus<S, T>(records: &[(S, T)]) -> Result<CorpusScores>
where
    S: std::borrow::Borrow<OcrSample> + Sync,
    T: std::borrow::Borrow<AttentionTrace> + Sync,
{
    let per_sample: Vec<SampleScore> = records
        .par_iter()
        .map(|(s, t)| score_sample(s.borrow(), t.borrow()))
        .collect::<Result<_>>()?;
    reduce_sample_scores(per_sample)
}

pub fn reduce_sample_scores(per_sample: Vec<SampleScore>) -> Result<CorpusScores> {
    let skipped = per_sample.iter().map(|s| s.skipped_tokens).sum();
    let counts: Vec<usize> = per_sample.iter().map(|s| s.scored_tokens).collect();
    let increments: Vec<HeadScoreMatrix> = per_sample.into_iter().map(|s| s.increment).collect();
    let matrix = aggregate_corpus(&increments, &counts)?;
    Ok(CorpusScores {
        matrix,
        corpus_tokens: counts.iter().sum(),
        skipped_tokens: skipped,
    })
}

/// Score-matrix hand-off file consumed by the allocator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFile {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<f64>,
    pub normalization: String,
    pub corpus_tokens: usize,
}

impl ScoreFile {
    pub fn from_corpus(c: &CorpusScores) -> Self {
        Self {
            layers: c.matrix.layers,
            heads: c.matrix.heads,
            scores: c.matrix.scores.clone(),
            normalization: "minmax".to_string(),
            corpus_tokens: c.corpus_tokens,
        }
    }

    pub fn matrix(&self) -> Result<HeadScoreMatrix> {
        HeadScoreMatrix::new(self.layers, self.heads, self.scores.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ScoreFile = serde_json::from_str(&text)?;
        file.matrix()?;
        Ok(file)
    }
}
