//! Gradient-free merging: stack bookkeeping, recalculated coefficients,
//! batch compression and sequential merging.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use share_core::adapt::spawn_temporary;
use share_core::adapter::{LoraAdapter, LoraLayer, ShareState};
use share_core::linalg::{svd, tail_energy, DenseMatrix, KPolicy};
use share_core::merge::{compress_adapters, merge, sequential_vs_batch, MergeInput, MergeOptions};
use share_core::rng::{gaussian_matrix, random_orthonormal, seeded};

use common::{data_state, deltas, max_delta_change, random_adapter};

const LAYERS: [(&str, usize, usize); 2] = [("attn.q", 14, 11), ("attn.v", 9, 13)];

/// A temporary whose factors have drifted far from orthonormality.
fn drifted_temporary(state: &ShareState, name: &str, seed: u64) -> MergeInput {
    let mut tmp = spawn_temporary(state, name, state.hyper.phi, 1.0, seed).unwrap();
    let mut rng = seeded(seed);
    for l in tmp.layers.values_mut() {
        l.beta_tmp = l.beta_tmp.add(&gaussian_matrix(&mut rng, l.beta_tmp.rows(), l.beta_tmp.cols(), 0.7));
        l.alpha_tmp = l.alpha_tmp.add(&gaussian_matrix(&mut rng, l.alpha_tmp.rows(), l.alpha_tmp.cols(), 0.7));
    }
    MergeInput::Temporary(tmp)
}

fn plain() -> MergeOptions {
    MergeOptions { balance: false, ..MergeOptions::default() }
}

/// Row-stacked `b` targets of every task of a data-only state plus the new
/// temporary, in stack order, as the merge sees them without balancing.
fn b_targets(state: &ShareState, input: &MergeInput, id: &str) -> Vec<DenseMatrix> {
    let f = &state.factors.layers[id];
    let mut out: Vec<DenseMatrix> = state.tasks.iter().map(|t| f.beta.dot(&t.layers[id].eps_beta)).collect();
    if let MergeInput::Temporary(t) = input {
        out.push(t.layers[id].product().0);
    }
    out
}

#[test]
fn truncated_merge_residuals_split_the_discarded_energy() {
    let state = data_state(&LAYERS, 4, 2, 4, 1);
    let input = drifted_temporary(&state, "new", 2);
    let (next, report) = merge(&state, &input, &plain()).unwrap();
    assert_eq!(next.factors.k, 4);
    for (id, _, _) in LAYERS {
        let blocks = b_targets(&state, &input, id);
        let stack =
            DenseMatrix::vstack(&blocks.iter().map(|b| b.transpose()).collect::<Vec<_>>().iter().collect::<Vec<_>>())
                .unwrap();
        let dec = svd(&stack).unwrap();
        let v = dec.vt.row_range(0..4).transpose();
        let layer = &report.layers[id];
        let mut total = 0.0;
        for (block, res) in blocks.iter().zip(&layer.residuals) {
            let outside = block.sub(&v.dot(&v.t_dot(block))).frobenius_norm_sq();
            assert!((outside - res.post_b.powi(2)).abs() <= 1e-8 * block.frobenius_norm_sq().max(1.0));
            total += outside;
        }
        let discarded = tail_energy(&dec.s, 4);
        assert!((total - discarded).abs() <= 1e-8 * stack.frobenius_norm_sq());
        assert!((layer.discarded_b - discarded).abs() <= 1e-8 * stack.frobenius_norm_sq());
    }
}

#[test]
fn merge_leaves_its_input_state_alone() {
    let state = data_state(&LAYERS, 4, 2, 3, 3);
    let copy = state.clone();
    let _ = merge(&state, &drifted_temporary(&state, "new", 4), &MergeOptions::default()).unwrap();
    assert_eq!(state, copy);
}

#[test]
fn planted_adapters_compress_exactly() {
    let (n, d, k_star, r) = (24, 20, 6, 3);
    let mut rng = seeded(5);
    let vb = random_orthonormal(&mut rng, n, k_star);
    let va = random_orthonormal(&mut rng, d, k_star);
    let adapters: Vec<LoraAdapter> = (0..50)
        .map(|i| {
            let b = vb.dot(&gaussian_matrix(&mut rng, k_star, r, 1.0));
            let a = gaussian_matrix(&mut rng, r, k_star, 1.0).dot_t(&va);
            LoraAdapter::new(format!("t{i}"), BTreeMap::from([("l".to_string(), LoraLayer { a, b })])).unwrap()
        })
        .collect();
    let (_, report) = compress_adapters(&adapters, KPolicy::fixed(k_star), r).unwrap();
    assert!(report.mean_relative_error <= 1e-6, "{}", report.mean_relative_error);
    assert!(report.memory_ratio > 1.0);

    let seq = sequential_vs_batch(&adapters[..12], k_star).unwrap();
    assert!(seq.batch_errors.iter().chain(&seq.sequential_errors).all(|&e| e <= 1e-6));
    assert!(seq.gaps.iter().all(|&g| g <= 1e-6));
}

#[test]
fn one_adapter_compresses_to_about_its_own_size() {
    let single = [random_adapter("solo", &LAYERS, 4, 6)];
    let (state, report) = compress_adapters(&single, KPolicy::fixed(4), 4).unwrap();
    assert_eq!(state.factors.k, 3);
    assert!(report.mean_relative_error <= 1e-20);
    assert!(report.memory_ratio > 0.7 && report.memory_ratio <= 1.0, "{}", report.memory_ratio);
}

#[test]
fn delta_similar_error_stays_within_the_affine_bound() {
    let (n, d, k_star, r) = (24, 20, 6, 3);
    let mut rng = seeded(7);
    let vb = random_orthonormal(&mut rng, n, k_star);
    let va = random_orthonormal(&mut rng, d, k_star);
    let mut injected = Vec::new();
    let adapters: Vec<LoraAdapter> = (0..20)
        .map(|i| {
            let nb = gaussian_matrix(&mut rng, n, r, 0.05);
            let na = gaussian_matrix(&mut rng, r, d, 0.05);
            injected.push(nb.frobenius_norm_sq() + na.frobenius_norm_sq());
            let b = vb.dot(&gaussian_matrix(&mut rng, k_star, r, 1.0)).add(&nb);
            let a = gaussian_matrix(&mut rng, r, k_star, 1.0).dot_t(&va).add(&na);
            LoraAdapter::new(format!("t{i}"), BTreeMap::from([("l".to_string(), LoraLayer { a, b })])).unwrap()
        })
        .collect();
    for k in [6, 8, 12] {
        let rep = sequential_vs_batch(&adapters, k).unwrap();
        // With k ≥ k* the truncation constant is zero, so the cumulative
        // error is bounded by the off-core energy seen so far.
        let mut seen = 0.0;
        assert_eq!(rep.bootstrap_tasks, 1);
        for (t, err) in rep.sequential_curve.iter().enumerate() {
            seen += injected[t];
            assert!(*err <= seen, "k={k}, t={t}: {err} > {seen}");
        }
        eprintln!("k={k}: growth exponent {:?}", rep.growth_exponent);
    }
}

#[test]
fn orthogonal_rank_one_pair_reports_the_gap() {
    let layer = |col: usize| {
        let mut b = DenseMatrix::zeros(6, 1).into_data();
        b[col] = 2.0 - col as f64 * 0.5;
        let mut a = vec![0.0; 5];
        a[col] = 1.0;
        LoraLayer { b: DenseMatrix::new(6, 1, b).unwrap(), a: DenseMatrix::new(1, 5, a).unwrap() }
    };
    let adapters: Vec<LoraAdapter> = (0..2)
        .map(|i| LoraAdapter::new(format!("o{i}"), BTreeMap::from([("l".to_string(), layer(i))])).unwrap())
        .collect();
    let rep = sequential_vs_batch(&adapters, 1).unwrap();
    assert_eq!(rep.batch_k, 1);
    assert_eq!(rep.bootstrap_tasks, 2, "a lone rank-1 adapter centers to zero");
    assert!(rep.gaps.iter().all(|g| g.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merged_factors_are_orthonormal_and_coefficients_optimal(seed in any::<u64>(), tasks in 1usize..5) {
        let state = data_state(&LAYERS, 4, 2, tasks, seed % 10_000);
        let input = drifted_temporary(&state, "new", seed);
        let (next, _) = merge(&state, &input, &plain()).unwrap();
        let mut rng = seeded(seed ^ 7);
        for (id, _, _) in LAYERS {
            let f = &next.factors.layers[id];
            prop_assert!(f.beta.orthonormality_residual() <= 1e-8);
            prop_assert!(f.alpha.orthonormality_residual() <= 1e-8);
            for (target, task) in b_targets(&state, &input, id).iter().zip(&next.tasks) {
                let eps = &task.layers[id].eps_beta;
                let best = target.sub(&f.beta.dot(eps)).frobenius_norm();
                for _ in 0..100 {
                    let moved = eps.add(&gaussian_matrix(&mut rng, eps.rows(), eps.cols(), 0.05));
                    prop_assert!(target.sub(&f.beta.dot(&moved)).frobenius_norm() >= best - 1e-12 * (1.0 + best));
                }
            }
        }
    }

    #[test]
    fn larger_k_never_loses_more(seed in any::<u64>()) {
        let state = data_state(&LAYERS, 4, 2, 3, seed % 10_000);
        let input = drifted_temporary(&state, "new", seed);
        let mut previous: Option<Vec<f64>> = None;
        for k in 2..=8 {
            let opts = MergeOptions { k_policy: Some(KPolicy::fixed(k)), ..plain() };
            let (_, report) = merge(&state, &input, &opts).unwrap();
            let per_task: Vec<f64> = (0..4)
                .map(|t| report.layers.values().map(|l| l.residuals[t].post_b.powi(2) + l.residuals[t].post_a.powi(2)).sum())
                .collect();
            if let Some(prev) = &previous {
                for (now, before) in per_task.iter().zip(prev) {
                    prop_assert!(*now <= before + 1e-10);
                }
            }
            previous = Some(per_task);
        }
    }

    #[test]
    fn zero_contribution_is_a_fixed_point(seed in any::<u64>(), tasks in 1usize..5) {
        let state = data_state(&LAYERS, 4, 2, tasks, seed % 10_000);
        let mut tmp = spawn_temporary(&state, "zero", 2, 1.0, seed).unwrap();
        for l in tmp.layers.values_mut() {
            l.eps_alpha_tmp = DenseMatrix::zeros(2, 2);
        }
        let (next, _) = merge(&state, &MergeInput::Temporary(tmp), &MergeOptions::default()).unwrap();
        prop_assert!(max_delta_change(&deltas(&state), &deltas(&next)) <= 1e-8);
    }
}
