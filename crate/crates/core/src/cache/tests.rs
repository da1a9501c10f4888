use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::allocator::{AllocationConfig, AllocatorKind, PlanShape};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Causal attention over every prompt query, computed row by row.
fn full_attention(q: &Matrix, k: &Matrix) -> Vec<Vec<f64>> {
    let d = q.cols() as f64;
    (0..q.rows())
        .map(|i| {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    let mut dot = 0.0;
                    for c in 0..q.cols() {
                        dot += q.get(i, c) * k.get(j, c);
                    }
                    dot / d.sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut row = vec![0.0; k.rows()];
            for (j, v) in e.iter().enumerate() {
                row[j] = v / z;
            }
            row
        })
        .collect()
}

fn last_rows(m: &Matrix, w: usize) -> Matrix {
    let lp = m.rows();
    Matrix::from_rows(&(lp - w..lp).map(|i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn plan(layers: usize, kv_heads: usize, budgets: Vec<u64>, window: u64) -> BudgetPlan {
    let total = budgets.iter().sum();
    BudgetPlan {
        shape: PlanShape::new(layers, kv_heads).unwrap(),
        budgets,
        config: AllocationConfig::new(total).with_window(window),
        allocator: AllocatorKind::Uniform,
        bookkeeping: None,
        warnings: Vec::new(),
    }
}

/// Random causal window attention of `w` rows over `lp` positions.
fn random_window(rng: &mut ChaCha8Rng, w: usize, lp: usize) -> Matrix {
    let q = random_matrix(rng, w, 8, 1.5);
    let k = random_matrix(rng, lp, 8, 1.5);
    window_attention(&q, &k).unwrap()
}

#[test]
fn window_matches_full_attention_8x16() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = random_matrix(&mut rng, 16, 4, 1.0);
    let k = random_matrix(&mut rng, 16, 4, 1.0);
    let got = window_attention(&last_rows(&q, 8), &k).unwrap();
    let full = full_attention(&q, &k);
    for i in 0..8 {
        for j in 0..16 {
            assert!(rel_close(got.get(i, j), full[8 + i][j], 1e-12));
        }
    }
}

#[test]
fn window_matches_full_attention_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let lp = rng.random_range(1..=128);
        let w = rng.random_range(1..=lp.min(32));
        let d = rng.random_range(1..=16);
        let q = random_matrix(&mut rng, lp, d, 2.0);
        let k = random_matrix(&mut rng, lp, d, 2.0);
        let got = window_attention(&last_rows(&q, w), &k).unwrap();
        let full = full_attention(&q, &k);
        for i in 0..w {
            for j in 0..lp {
                assert!(rel_close(got.get(i, j), full[lp - w + i][j], 1e-12));
            }
        }
    }
}

#[test]
fn window_covering_prompt_is_full_causal_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_matrix(&mut rng, 10, 4, 1.0);
    let k = random_matrix(&mut rng, 10, 4, 1.0);
    let got = window_attention(&q, &k).unwrap();
    for (i, row) in full_attention(&q, &k).iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!(rel_close(got.get(i, j), *v, 1e-12));
        }
    }
}

#[test]
fn zero_states_give_uniform_causal_rows() {
    let got = window_attention(&Matrix::zeros(3, 4), &Matrix::zeros(6, 4)).unwrap();
    for i in 0..3 {
        let visible = 3 + i + 1;
        for j in 0..6 {
            let expected = if j < visible { 1.0 / visible as f64 } else { 0.0 };
            assert!((got.get(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn window_longer_than_prompt_is_rejected() {
    assert!(window_attention(&Matrix::zeros(5, 4), &Matrix::zeros(4, 4)).is_err());
    assert!(window_attention(&Matrix::zeros(2, 3), &Matrix::zeros(4, 4)).is_err());
}

#[test]
fn average_uniform_rows_by_hand() {
    // w = 2 over 4 positions: rows at positions 2 and 3
    let attn = Matrix::from_rows(&[vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0], vec![0.25; 4]]).unwrap();
    let avg = average_window_scores(&attn).unwrap();
    assert_eq!(avg.len(), 2);
    let expected = (1.0 / 3.0 + 0.25) / 2.0;
    assert!((avg[0] - expected).abs() < 1e-15 && (avg[1] - expected).abs() < 1e-15);
}

#[test]
fn average_single_column_is_an_indicator() {
    let attn = Matrix::from_rows(&[
        vec![0.0, 0.6, 0.0, 0.4, 0.0],
        vec![0.0, 0.2, 0.0, 0.3, 0.5],
    ])
    .unwrap();
    assert_eq!(average_window_scores(&attn).unwrap(), vec![0.0, 0.4, 0.0]);
}

#[test]
fn average_matches_column_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let lp = rng.random_range(2..80);
        let w = rng.random_range(1..lp);
        let attn = random_window(&mut rng, w, lp);
        let avg = average_window_scores(&attn).unwrap();
        assert_eq!(avg.len(), lp - w);
        for (j, a) in avg.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..w {
                s += attn.get(i, j);
            }
            assert_eq!(*a, s / w as f64);
        }
    }
}

#[test]
fn average_of_full_window_is_empty() {
    assert!(average_window_scores(&Matrix::zeros(3, 3)).unwrap().is_empty());
    assert!(average_window_scores(&Matrix::zeros(4, 3)).is_err());
}

fn sort_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort by descending score keeps earlier positions first on ties
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut out: Vec<usize> = idx.into_iter().take(k).collect();
    out.sort_unstable();
    out
}

#[test]
fn topk_endpoints() {
    let s = [0.3, 0.1, 0.2];
    assert_eq!(select_topk(&s, 3).positions, vec![0, 1, 2]);
    assert!(select_topk(&s, 0).positions.is_empty());
    let over = select_topk(&s, 5);
    assert_eq!(over.positions, vec![0, 1, 2]);
    assert!(over.clamped);
    assert!(!select_topk(&s, 2).clamped);
}

#[test]
fn topk_ties_prefer_earlier_positions() {
    assert_eq!(select_topk(&[0.5, 0.7, 0.5, 0.5], 2).positions, vec![0, 1]);
    assert_eq!(select_topk(&[0.1; 6], 3).positions, vec![0, 1, 2]);
}

#[test]
fn topk_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.random_range(1..60);
        // coarse values in half the cases to force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(0..5) as f64
                } else {
                    rng.random()
                }
            })
            .collect();
        for k in 0..=n {
            assert_eq!(select_topk(&scores, k).positions, sort_oracle(&scores, k));
        }
    }
}

#[test]
fn full_budget_keeps_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let geometry = ModelGeometry::mha(2, 2, 8);
    let (lp, w) = (40, 8);
    let attn: Vec<Matrix> = (0..4).map(|_| random_window(&mut rng, w, lp)).collect();
    let (mut cache, report) = compress_prefill(&attn, &geometry, &plan(2, 2, vec![lp as u64; 4], w as u64), w).unwrap();
    assert_eq!(cache, KvCache::full(2, 2, lp));
    assert_eq!(report.total_kept, 4 * lp);
    for t in 0..100 {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut r: Vec<f64> = (0..lp + t).map(|_| rng.random::<f64>()).collect();
                let z: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= z);
                r
            })
            .collect();
        let stats = decode_step(&mut cache, &rows, None, t).unwrap();
        assert_eq!(stats.recall, 1.0);
        assert_eq!(stats.slots_after, 4 * (lp + t + 1));
    }
}

#[test]
fn window_budget_keeps_only_the_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let geometry = ModelGeometry::mha(1, 3, 8);
    let (lp, w) = (50, 6);
    let attn: Vec<Matrix> = (0..3).map(|_| random_window(&mut rng, w, lp)).collect();
    let (cache, report) = compress_prefill(&attn, &geometry, &plan(1, 3, vec![w as u64; 3], w as u64), w).unwrap();
    for h in &cache.heads {
        assert_eq!(h.positions().collect::<Vec<_>>(), (lp - w..lp).collect::<Vec<_>>());
    }
    assert!(report.heads.iter().all(|h| h.window_scores.len() == lp - w));
}

#[test]
fn kept_set_is_the_true_top_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let geometry = ModelGeometry::mha(1, 2, 8);
    let (lp, w) = (64, 8);
    // head 0 concentrates on a block of image-like positions 10..20
    let mut rows = Vec::new();
    for i in 0..w {
        let abs = lp - w + i;
        let mut r = vec![0.0; lp];
        for (j, v) in r.iter_mut().enumerate().take(abs + 1) {
            *v = if (10..20).contains(&j) { 5.0 } else { 0.1 } * (0.5 + rng.random::<f64>());
        }
        let z: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= z);
        rows.push(r);
    }
    let concentrated = Matrix::from_rows(&rows).unwrap();
    let attn = vec![concentrated.clone(), random_window(&mut rng, w, lp)];
    let budgets = vec![w as u64 + 10, w as u64 + 5];
    let (cache, _) = compress_prefill(&attn, &geometry, &plan(1, 2, budgets.clone(), w as u64), w).unwrap();
    for (h, m) in attn.iter().enumerate() {
        // brute force: total window mass per old position, keep the largest
        let mass: Vec<f64> = (0..lp - w).map(|j| (0..w).map(|i| m.get(i, j)).sum()).collect();
        let mut expected = sort_oracle(&mass, budgets[h] as usize - w);
        expected.extend(lp - w..lp);
        assert_eq!(cache.heads[h].positions().collect::<Vec<_>>(), expected);
    }
    assert_eq!(
        cache.heads[0].positions().take(10).collect::<Vec<_>>(),
        (10..20).collect::<Vec<_>>()
    );
}

#[test]
fn gqa_sums_group_windows_before_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let geometry = ModelGeometry {
        layers: 1,
        query_heads: 4,
        kv_heads: 2,
        head_dim: 8,
    };
    let (lp, w) = (30, 4);
    let attn: Vec<Matrix> = (0..4).map(|_| random_window(&mut rng, w, lp)).collect();
    let (cache, report) = compress_prefill(&attn, &geometry, &plan(1, 2, vec![12, 9], w as u64), w).unwrap();
    for kv in 0..2 {
        let pooled: Vec<f64> = (0..lp - w)
            .map(|j| (0..w).map(|i| attn[2 * kv].get(i, j) + attn[2 * kv + 1].get(i, j)).sum::<f64>() / w as f64)
            .collect();
        for (a, b) in report.heads[kv].window_scores.iter().zip(&pooled) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut expected = sort_oracle(&pooled, [12, 9][kv] - w);
        expected.extend(lp - w..lp);
        assert_eq!(cache.heads[kv].positions().collect::<Vec<_>>(), expected);
    }
}

#[test]
fn short_prompts_are_kept_whole() {
    let geometry = ModelGeometry::mha(1, 2, 8);
    let attn = vec![Matrix::zeros(5, 5), Matrix::zeros(5, 5)];
    let (cache, report) = compress_prefill(&attn, &geometry, &plan(1, 2, vec![8, 8], 8), 8).unwrap();
    assert_eq!(cache, KvCache::full(1, 2, 5));
    assert!(report.heads.iter().all(|h| h.window_scores.is_empty()));
}

#[test]
fn mismatched_plans_and_small_budgets_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let geometry = ModelGeometry::mha(1, 2, 8);
    let attn: Vec<Matrix> = (0..2).map(|_| random_window(&mut rng, 4, 20)).collect();
    let wrong = plan(2, 1, vec![10, 10], 4);
    assert!(matches!(
        compress_prefill(&attn, &geometry, &wrong, 4),
        Err(Error::DimensionMismatch(_))
    ));
    assert!(compress_prefill(&attn, &geometry, &plan(1, 2, vec![3, 10], 4), 4).is_err());
    assert!(compress_prefill(&attn[..1], &geometry, &plan(1, 2, vec![10, 10], 4), 4).is_err());
}

#[test]
fn budget_larger_than_prompt_is_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geometry = ModelGeometry::mha(1, 1, 8);
    let attn = vec![random_window(&mut rng, 4, 20)];
    let (cache, report) = compress_prefill(&attn, &geometry, &plan(1, 1, vec![100], 4), 4).unwrap();
    assert_eq!(cache.heads[0].len(), 20);
    assert!(report.heads[0].clamped);
}

#[test]
fn qk_path_matches_and_stores_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let geometry = ModelGeometry {
        layers: 2,
        query_heads: 4,
        kv_heads: 2,
        head_dim: 8,
    };
    let (lp, w) = (40, 6);
    let q: Vec<Matrix> = (0..8).map(|_| random_matrix(&mut rng, w, 8, 1.0)).collect();
    let k: Vec<Matrix> = (0..4).map(|_| random_matrix(&mut rng, lp, 8, 1.0)).collect();
    let p = plan(2, 2, vec![10, 12, 14, 16], w as u64);
    let (cache, report) = compress_prefill_qk(&q, &k, &geometry, &p).unwrap();
    let attn: Vec<Matrix> = (0..8).map(|h| window_attention(&q[h], &k[geometry.kv_of(h)]).unwrap()).collect();
    let (plain, plain_report) = compress_prefill(&attn, &geometry, &p, w).unwrap();
    assert_eq!(report, plain_report);
    for (h, (a, b)) in cache.heads.iter().zip(&plain.heads).enumerate() {
        assert_eq!(a.positions().collect::<Vec<_>>(), b.positions().collect::<Vec<_>>());
        for slot in &a.slots {
            assert_eq!(slot.key.as_deref(), Some(k[h].row(slot.position)));
        }
    }
}

#[test]
fn compression_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let geometry = ModelGeometry::mha(2, 4, 8);
    let attn: Vec<Matrix> = (0..8).map(|_| random_window(&mut rng, 8, 100)).collect();
    let p = plan(2, 4, vec![20, 30, 12, 9, 50, 8, 8, 40], 8);
    let a = compress_prefill(&attn, &geometry, &p, 8).unwrap();
    let b = compress_prefill(&attn, &geometry, &p, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn decode_appends_and_checks_shapes() {
    let mut cache = KvCache::from_positions(1, 2, 10, vec![vec![0, 8, 9], vec![7, 8, 9]]).unwrap();
    let rows = vec![vec![0.1; 10], vec![0.1; 10]];
    let keys = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let s = decode_step(&mut cache, &rows, Some(&keys), 0).unwrap();
    assert_eq!(s.retained_slots, 6);
    assert_eq!(s.slots_after, 8);
    assert!((s.recall - 0.3).abs() < 1e-12);
    assert_eq!(cache.heads[1].slots.last().unwrap().key, Some(vec![3.0, 4.0]));
    assert_eq!(cache.context_len, 11);
    // rows must now cover 11 positions
    assert!(decode_step(&mut cache, &rows, None, 1).is_err());
    let rows = vec![vec![1.0 / 11.0; 11]; 2];
    assert!(decode_step(&mut cache, &rows, Some(&keys[..1]), 1).is_err());
    assert!(decode_step(&mut cache, &rows[..1], None, 1).is_err());
}

#[test]
fn from_positions_rejects_bad_sets() {
    assert!(matches!(
        KvCache::from_positions(1, 1, 5, vec![vec![1, 5]]),
        Err(Error::Policy(_))
    ));
    assert!(KvCache::from_positions(1, 1, 5, vec![vec![2, 1]]).is_err());
    assert!(KvCache::from_positions(1, 2, 5, vec![vec![1]]).is_err());
}

#[test]
fn report_exports() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let geometry = ModelGeometry::mha(1, 2, 8);
    let attn: Vec<Matrix> = (0..2).map(|_| random_window(&mut rng, 4, 12)).collect();
    let (_, mut report) = compress_prefill(&attn, &geometry, &plan(1, 2, vec![6, 5], 4), 4).unwrap();
    report.recall = vec![0.5, 0.75];
    let mut heads = Vec::new();
    report.write_heads_csv(&mut heads).unwrap();
    let heads = String::from_utf8(heads).unwrap();
    let mut lines = heads.lines();
    assert_eq!(lines.next(), Some("layer,kv_head,budget,kept_count,kept_positions"));
    assert!(lines.next().unwrap().starts_with("0,0,6,6,"));
    let mut recall = Vec::new();
    report.write_recall_csv(&mut recall).unwrap();
    assert_eq!(String::from_utf8(recall).unwrap(), "step,recall\n0,0.500000000000\n1,0.750000000000\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    report.write_json(&path).unwrap();
    let back: EvictionReport = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #[test]
    fn budgets_windows_and_slot_counts_hold(
        seed in any::<u64>(),
        lp in 2usize..120,
        w_frac in 0.05f64..1.0,
        extra in prop::collection::vec(0u64..150, 4),
        steps in 0usize..6,
    ) {
        let w = ((lp as f64 * w_frac) as usize).clamp(1, lp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = ModelGeometry::mha(2, 2, 8);
        let attn: Vec<Matrix> = (0..4).map(|_| random_window(&mut rng, w, lp)).collect();
        let budgets: Vec<u64> = extra.iter().map(|e| w as u64 + e).collect();
        let (mut cache, _) = compress_prefill(&attn, &geometry, &plan(2, 2, budgets.clone(), w as u64), w).unwrap();
        for (h, head) in cache.heads.iter().enumerate() {
            let pos: Vec<usize> = head.positions().collect();
            prop_assert_eq!(pos.len(), (budgets[h] as usize).min(lp));
            prop_assert!((lp - w..lp).all(|p| pos.contains(&p)));
        }
        let before: Vec<usize> = cache.heads.iter().map(HeadCache::len).collect();
        for t in 0..steps {
            let rows = vec![vec![1.0 / (lp + t) as f64; lp + t]; 4];
            decode_step(&mut cache, &rows, None, t).unwrap();
        }
        for (h, head) in cache.heads.iter().enumerate() {
            prop_assert_eq!(head.len(), before[h] + steps);
        }
        cache.validate().unwrap();
    }

    #[test]
    fn more_budget_never_captures_less(
        seed in any::<u64>(),
        lp in 10usize..100,
        b in 0usize..90,
    ) {
        let w = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry = ModelGeometry::mha(1, 1, 8);
        let attn = vec![random_window(&mut rng, w, lp)];
        let mut query: Vec<f64> = (0..lp).map(|_| rng.random::<f64>()).collect();
        let z: f64 = query.iter().sum();
        query.iter_mut().for_each(|v| *v /= z);
        let captured = |budget: u64| {
            let (mut c, _) = compress_prefill(&attn, &geometry, &plan(1, 1, vec![budget], w as u64), w).unwrap();
            decode_step(&mut c, std::slice::from_ref(&query), None, 0).unwrap().captured[0]
        };
        let budget = (w + b) as u64;
        prop_assert!(captured(budget + 1) >= captured(budget));
    }
}
