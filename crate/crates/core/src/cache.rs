//! Observation-window eviction and decode-time cache bookkeeping.
//!
//! At prefill the last `w` prompt queries attend over the whole prompt. The
//! resulting `w × Lp` matrix is averaged column-wise over the positions
//! outside the window, and each kv head keeps the window itself plus the
//! `b − w` best-scoring older positions, where `b` is its budget. For GQA
//! the query heads of a group are summed before averaging. Tokens generated
//! afterwards are appended and never evicted.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::BudgetPlan;
use crate::error::{invalid, Error, Result};
use crate::sim::{CachePolicy, ModelGeometry, PrefillView};
use crate::tensor::{matmul_scaled, softmax_row_masked, CausalMask, Matrix};

/// Causal attention of the last `q_local.rows()` prompt queries over all
/// `k_all.rows()` prompt keys.
pub fn window_attention(q_local: &Matrix, k_all: &Matrix) -> Result<Matrix> {
    let w = q_local.rows();
    let lp = k_all.rows();
    if w > lp {
        return Err(invalid(format!("window {w} exceeds prompt length {lp}")));
    }
    let scale = 1.0 / (q_local.cols() as f64).sqrt();
    let scores = matmul_scaled(q_local, k_all, scale)?;
    softmax_row_masked(&scores, CausalMask, lp - w)
}

/// Column means of the first `Lp − w` columns, `w` being the row count.
pub fn average_window_scores(attn: &Matrix) -> Result<Vec<f64>> {
    let (w, lp) = (attn.rows(), attn.cols());
    if w == 0 || w > lp {
        return Err(invalid(format!("cannot average a {w}x{lp} window")));
    }
    let mut out = vec![0.0; lp - w];
    for i in 0..w {
        for (o, v) in out.iter_mut().zip(attn.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= w as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopK {
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Set when `k` exceeded the candidate count and was clamped.
    pub clamped: bool,
}

/// Positions of the `k` largest scores. Ties favour earlier positions.
pub fn select_topk(scores: &[f64], k: usize) -> TopK {
    let clamped = k > scores.len();
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, by_rank);
    }
    idx.truncate(k);
    idx.sort_unstable();
    TopK { positions: idx, clamped }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub position: usize,
    /// Key vector when the cache was built from query/key states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadCache {
    /// Strictly increasing positions.
    pub slots: Vec<SlotRecord>,
}

impl HeadCache {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().map(|s| s.position)
    }
}

/// Retained slots per `(layer, kv head)`, flat index `layer * kv_heads + h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    pub layers: usize,
    pub kv_heads: usize,
    pub prompt_len: usize,
    /// Positions written so far, prompt plus generated.
    pub context_len: usize,
    pub heads: Vec<HeadCache>,
}

impl KvCache {
    /// Every prompt position in every head.
    pub fn full(layers: usize, kv_heads: usize, prompt_len: usize) -> Self {
        let head = HeadCache {
            slots: (0..prompt_len).map(|position| SlotRecord { position, key: None }).collect(),
        };
        Self {
            layers,
            kv_heads,
            prompt_len,
            context_len: prompt_len,
            heads: vec![head; layers * kv_heads],
        }
    }

    /// Validates retained prompt positions per head.
    pub fn from_positions(layers: usize, kv_heads: usize, prompt_len: usize, kept: Vec<Vec<usize>>) -> Result<Self> {
        if kept.len() != layers * kv_heads {
            return Err(Error::Policy(format!(
                "{} retention sets for {} kv heads",
                kept.len(),
                layers * kv_heads
            )));
        }
        let heads = kept
            .into_iter()
            .enumerate()
            .map(|(h, positions)| {
                if let Some(&p) = positions.iter().find(|&&p| p >= prompt_len) {
                    return Err(Error::Policy(format!(
                        "head {h} retains position {p} beyond prompt length {prompt_len}"
                    )));
                }
                if positions.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Policy(format!("head {h} positions are not strictly increasing")));
                }
                Ok(HeadCache {
                    slots: positions.into_iter().map(|position| SlotRecord { position, key: None }).collect(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            kv_heads,
            prompt_len,
            context_len: prompt_len,
            heads,
        })
    }

    pub fn total_slots(&self) -> usize {
        self.heads.iter().map(HeadCache::len).sum()
    }

    /// Checks the structural invariants a policy hook must honour.
    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.layers * self.kv_heads {
            return Err(Error::Policy(format!(
                "cache has {} heads, expected {}",
                self.heads.len(),
                self.layers * self.kv_heads
            )));
        }
        for (h, head) in self.heads.iter().enumerate() {
            let mut prev = None;
            for p in head.positions() {
                if p >= self.context_len || prev.is_some_and(|q| q >= p) {
                    return Err(Error::Policy(format!(
                        "head {h} holds invalid or unordered position {p} (context {})",
                        self.context_len
                    )));
                }
                prev = Some(p);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEviction {
    pub layer: usize,
    pub kv_head: usize,
    pub budget: u64,
    pub kept: Vec<usize>,
    /// Window-averaged score of every position before the window.
    pub window_scores: Vec<f64>,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionReport {
    pub window: usize,
    pub prompt_len: usize,
    pub heads: Vec<HeadEviction>,
    pub total_kept: usize,
    /// Per decode step mean attention-mass recall, when a decode was run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recall: Vec<f64>,
}

impl EvictionReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per head: `layer,kv_head,budget,kept_count,kept_positions`,
    /// positions space-separated.
    pub fn write_heads_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "kv_head", "budget", "kept_count", "kept_positions"])?;
        for h in &self.heads {
            let kept = h.kept.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            w.write_record([
                h.layer.to_string(),
                h.kv_head.to_string(),
                h.budget.to_string(),
                h.kept.len().to_string(),
                kept,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `step,recall` rows.
    pub fn write_recall_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "recall"])?;
        for (t, r) in self.recall.iter().enumerate() {
            w.write_record([t.to_string(), format!("{r:.12}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compresses the prompt cache given each flat query head's `w × Lp`
/// window attention.
///
/// Prompts no longer than `w` are kept whole and not scored.
pub fn compress_prefill(
    window_attn: &[Matrix],
    geometry: &ModelGeometry,
    plan: &BudgetPlan,
    w: usize,
) -> Result<(KvCache, EvictionReport)> {
    geometry.validate()?;
    if plan.shape.layers != geometry.layers || plan.shape.kv_heads != geometry.kv_heads {
        return Err(Error::DimensionMismatch(format!(
            "plan is {}x{} but model has {} layers x {} kv heads",
            plan.shape.layers, plan.shape.kv_heads, geometry.layers, geometry.kv_heads
        )));
    }
    if window_attn.len() != geometry.num_query_heads() {
        return Err(Error::DimensionMismatch(format!(
            "{} window matrices for {} query heads",
            window_attn.len(),
            geometry.num_query_heads()
        )));
    }
    let lp = window_attn.first().map_or(0, Matrix::cols);
    let short = lp <= w;
    for m in window_attn {
        if m.cols() != lp || (!short && m.rows() != w) {
            return Err(Error::DimensionMismatch(format!(
                "window matrix is {}x{}, expected {w}x{lp}",
                m.rows(),
                m.cols()
            )));
        }
    }
    let group = geometry.group();
    let heads: Vec<HeadEviction> = (0..geometry.num_kv_heads())
        .into_par_iter()
        .map(|kv| {
            let (layer, kv_head) = (kv / geometry.kv_heads, kv % geometry.kv_heads);
            let budget = plan.budgets[kv];
            if short {
                return Ok(HeadEviction {
                    layer,
                    kv_head,
                    budget,
                    kept: (0..lp).collect(),
                    window_scores: Vec::new(),
                    clamped: false,
                });
            }
            if budget < w as u64 {
                return Err(invalid(format!(
                    "head ({layer}, {kv_head}) budget {budget} is below the window {w}"
                )));
            }
            let first_q = layer * geometry.query_heads + kv_head * group;
            let mut pooled = window_attn[first_q].clone();
            for m in &window_attn[first_q + 1..first_q + group] {
                pooled = pooled.add(m)?;
            }
            let window_scores = average_window_scores(&pooled)?;
            let top = select_topk(&window_scores, (budget - w as u64) as usize);
            let mut kept = top.positions;
            kept.extend(lp - w..lp);
            Ok(HeadEviction {
                layer,
                kv_head,
                budget,
                kept,
                window_scores,
                clamped: top.clamped,
            })
        })
        .collect::<Result<_>>()?;
    let cache = KvCache::from_positions(
        geometry.layers,
        geometry.kv_heads,
        lp,
        heads.iter().map(|h| h.kept.clone()).collect(),
    )?;
    let report = EvictionReport {
        window: w,
        prompt_len: lp,
        total_kept: cache.total_slots(),
        heads,
        recall: Vec::new(),
    };
    Ok((cache, report))
}

/// Like [`compress_prefill`] but starting from query and key states: the
/// last `w` query rows per query head and all prompt keys per kv head.
/// Retained slots carry their key vectors.
pub fn compress_prefill_qk(
    q_local: &[Matrix],
    keys: &[Matrix],
    geometry: &ModelGeometry,
    plan: &BudgetPlan,
) -> Result<(KvCache, EvictionReport)> {
    if keys.len() != geometry.num_kv_heads() || q_local.len() != geometry.num_query_heads() {
        return Err(Error::DimensionMismatch(format!(
            "{} query / {} key matrices for {} query / {} kv heads",
            q_local.len(),
            keys.len(),
            geometry.num_query_heads(),
            geometry.num_kv_heads()
        )));
    }
    let w = q_local.first().map_or(0, Matrix::rows);
    let attn = q_local
        .iter()
        .enumerate()
        .map(|(q, m)| window_attention(m, &keys[geometry.kv_of(q)]))
        .collect::<Result<Vec<_>>>()?;
    let (mut cache, report) = compress_prefill(&attn, geometry, plan, w)?;
    for (head, k) in cache.heads.iter_mut().zip(keys) {
        for slot in &mut head.slots {
            slot.key = Some(k.row(slot.position).to_vec());
        }
    }
    Ok((cache, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Share of each query head's attention mass on retained slots.
    pub captured: Vec<f64>,
    /// Mean of `captured`.
    pub recall: f64,
    /// Slots read this step, summed over kv heads.
    pub retained_slots: usize,
    /// Slots held after the new token was appended.
    pub slots_after: usize,
}

/// One decode step.
///
/// `rows[q]` is query head `q`'s attention over the full, uncompressed
/// context of `context_len` positions, i.e. the full-cache shadow. The
/// captured mass is read off the retained slots, then the new token is
/// appended to every kv head, with its key if `new_keys` is given.
pub fn decode_step(cache: &mut KvCache, rows: &[Vec<f64>], new_keys: Option<&[Vec<f64>]>, step: usize) -> Result<StepStats> {
    let n_kv = cache.layers * cache.kv_heads;
    if rows.is_empty() || rows.len() % n_kv != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} query rows cannot map onto {n_kv} kv heads",
            rows.len()
        )));
    }
    let query_heads = rows.len() / cache.layers;
    let group = query_heads / cache.kv_heads;
    let ctx = cache.context_len;
    let mut captured = Vec::with_capacity(rows.len());
    for (q, row) in rows.iter().enumerate() {
        if row.len() != ctx {
            return Err(Error::DimensionMismatch(format!(
                "query head {q} row has {} entries, context is {ctx}",
                row.len()
            )));
        }
        let (layer, head) = (q / query_heads, q % query_heads);
        let kv = layer * cache.kv_heads + head / group;
        let total: f64 = row.iter().sum();
        let kept: f64 = cache.heads[kv].positions().map(|p| row[p]).sum();
        captured.push(if total > 0.0 { kept / total } else { 0.0 });
    }
    let retained_slots = cache.total_slots();
    if let Some(keys) = new_keys {
        if keys.len() != n_kv {
            return Err(Error::DimensionMismatch(format!("{} new keys for {n_kv} kv heads", keys.len())));
        }
    }
    for (h, head) in cache.heads.iter_mut().enumerate() {
        head.slots.push(SlotRecord {
            position: ctx,
            key: new_keys.map(|k| k[h].clone()),
        });
    }
    cache.context_len += 1;
    let recall = captured.iter().sum::<f64>() / captured.len() as f64;
    Ok(StepStats {
        step,
        captured,
        recall,
        retained_slots,
        slots_after: cache.total_slots(),
    })
}

/// Budget-plan eviction as a decode-loop policy.
#[derive(Debug, Clone)]
pub struct PlanPolicy {
    pub plan: BudgetPlan,
    pub window: usize,
}

impl PlanPolicy {
    pub fn new(plan: BudgetPlan, window: usize) -> Self {
        Self { plan, window }
    }
}

impl CachePolicy for PlanPolicy {
    fn name(&self) -> String {
        self.plan.allocator.to_string()
    }

    fn prefill(&self, view: &PrefillView<'_>) -> Result<KvCache> {
        if view.window.size != self.window {
            return Err(invalid(format!(
                "observation window is {} but the policy expects {}",
                view.window.size, self.window
            )));
        }
        compress_prefill(&view.window.heads, view.geometry, &self.plan, self.window).map(|(c, _)| c)
    }
}

/// Positions present in every head, for tests and diagnostics.
pub fn common_positions(cache: &KvCache) -> BTreeSet<usize> {
    let mut it = cache.heads.iter();
    let Some(first) = it.next() else {
        return BTreeSet::new();
    };
    let mut acc: BTreeSet<usize> = first.positions().collect();
    for h in it {
        let s: BTreeSet<usize> = h.positions().collect();
        acc = acc.intersection(&s).copied().collect();
    }
    acc
}

#[cfg(test)]
mod tests;
