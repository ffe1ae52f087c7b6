//! Continual-learning metrics, savings accounting and factor diagnostics.

use std::collections::BTreeMap;

use proptest::prelude::*;
use share_core::adapter::{LayerShape, LoraAdapter, LoraLayer};
use share_core::analytics::{
    cka_trajectory, explained_variance_curve, forgetting_and_bwt, retention, savings, EvalGrid, ForgettingMode,
    SavingsParams,
};
use share_core::init::stack_adapters;
use share_core::linalg::DenseMatrix;
use share_core::sim::{
    default_orderings, gen_stream, planted_adapters, run_fig1_experiment, ContinualConfig, StreamConfig,
};

fn grid(rows: &[&[f64]], higher_is_better: bool) -> EvalGrid {
    let mut g = EvalGrid::new("score", higher_is_better);
    for (t, r) in rows.iter().enumerate() {
        g.push_row(&format!("T{t}"), r.to_vec()).unwrap();
    }
    g
}

#[test]
fn peak_and_previous_baselines_differ_after_a_dip() {
    // Task 0 peaks at 56.00, dips, partly recovers.
    let g = grid(&[&[56.00], &[55.54, 80.0], &[55.80, 80.0, 70.0]], true);
    let peak = forgetting_and_bwt(&g, ForgettingMode::Peak).unwrap();
    let prev = forgetting_and_bwt(&g, ForgettingMode::Prev).unwrap();
    assert!((peak.cells[1][0].forgetting - 0.46).abs() < 1e-9);
    assert!((peak.cells[2][0].forgetting - 0.20).abs() < 1e-9);
    assert_eq!(peak.cells[2][0].backward_transfer, 0.0);
    assert!((prev.cells[2][0].backward_transfer - 0.26).abs() < 1e-9);
    assert_eq!(prev.cells[2][0].forgetting, 0.0);
    assert!((peak.average_forgetting - 0.10).abs() < 1e-9);
}

#[test]
fn retention_is_final_over_peak() {
    let g = grid(&[&[0.8], &[0.9, 0.5], &[0.72, 0.5, 0.4]], true);
    let kept = retention(&g).unwrap();
    assert!(kept.iter().zip([0.8, 1.0, 1.0]).all(|(a, b)| (a - b).abs() <= 1e-12), "{kept:?}");
    assert!(retention(&grid(&[&[1.0]], false)).is_err());
}

#[test]
fn cka_against_the_final_factors_ends_at_one() {
    let stream_cfg = StreamConfig { num_tasks: 6, ..StreamConfig::default() };
    let result = run_fig1_experiment(&stream_cfg, &ContinualConfig::default(), &default_orderings(6, 0)).unwrap();
    let stream = gen_stream(&stream_cfg).unwrap();
    let planted: BTreeMap<String, DenseMatrix> =
        stream.layers.iter().map(|(id, l)| (id.clone(), l.v_beta.clone())).collect();
    let mut per_ordering = Vec::new();
    for run in &result.runs {
        let last = run.factor_history.last().unwrap();
        let reference: BTreeMap<String, DenseMatrix> =
            last.layers.iter().map(|(id, l)| (id.clone(), l.beta.clone())).collect();
        let series = cka_trajectory(&run.factor_history, &reference).unwrap();
        assert!((series.mean.last().unwrap() - 1.0).abs() <= 1e-10);

        let same = vec![run.factor_history[2].clone(); 4];
        let flat = cka_trajectory(&same, &planted).unwrap();
        assert!(flat.mean.windows(2).all(|w| w[0] == w[1]));

        per_ordering.push(cka_trajectory(&run.factor_history, &planted).unwrap().mean);
    }
    // Median over orderings rises with the number of tasks seen.
    let medians: Vec<f64> = (0..6)
        .map(|t| {
            let mut v: Vec<f64> = per_ordering.iter().map(|s| s[t]).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] >= w[0] - 1e-3), "{medians:?}");
    assert!(medians[5] > medians[0]);
    eprintln!("median planted CKA per task: {medians:.4?}");
}

fn adapter(name: &str, b_cols: &[Vec<f64>], a_rows: &[Vec<f64>]) -> LoraAdapter {
    let r = b_cols.len();
    let n = b_cols[0].len();
    let b = DenseMatrix::from_fn(n, r, |i, j| b_cols[j][i]);
    let a = DenseMatrix::from_rows(a_rows).unwrap();
    LoraAdapter::new(name, BTreeMap::from([("l".to_string(), LoraLayer { a, b })])).unwrap()
}

fn unit(len: usize, i: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = scale;
    v
}

#[test]
fn equal_spectrum_gives_a_linear_curve() {
    // Rows ±e_i for three adapters: zero mean, three equal singular values.
    let all: Vec<LoraAdapter> = (0..3)
        .map(|i| adapter(&format!("t{i}"), &[unit(5, i, 1.0), unit(5, i, -1.0)], &[unit(4, i, 1.0), unit(4, i, -1.0)]))
        .collect();
    let curve = explained_variance_curve(&stack_adapters(&all, "l").unwrap()).unwrap();
    for side in [&curve.b, &curve.a] {
        for (k, v) in side.iter().take(3).enumerate() {
            assert!((v - (k + 1) as f64 / 3.0).abs() <= 1e-12, "{side:?}");
        }
    }
    assert_eq!(curve.k_at, vec![(0.6, 2, 2), (0.8, 3, 3), (0.9, 3, 3), (0.95, 3, 3)]);
}

#[test]
fn rank_one_stack_is_explained_by_one_direction() {
    let all =
        [adapter("x", &[unit(5, 1, 1.0)], &[unit(4, 2, 1.0)]), adapter("y", &[unit(5, 1, 3.0)], &[unit(4, 2, -2.0)])];
    let curve = explained_variance_curve(&stack_adapters(&all, "l").unwrap()).unwrap();
    assert!((curve.b[0] - 1.0).abs() <= 1e-12 && (curve.a[0] - 1.0).abs() <= 1e-12);
    assert!(curve.k_at.iter().all(|&(_, kb, ka)| kb == 1 && ka == 1));
}

#[test]
fn k_at_ninety_percent_settles_as_tasks_accumulate() {
    let cfg = StreamConfig { off_subspace_energy: 0.05, noise: 0.0, num_tasks: 40, ..StreamConfig::default() };
    let adapters = planted_adapters(&gen_stream(&cfg).unwrap(), cfg.task_rank).unwrap();
    let ks: Vec<usize> = [5, 10, 20, 30, 40]
        .iter()
        .map(|&t| {
            let curve = explained_variance_curve(&stack_adapters(&adapters[..t], "layer0").unwrap()).unwrap();
            curve.k_at.iter().find(|e| e.0 == 0.9).unwrap().1
        })
        .collect();
    eprintln!("k at 0.9 after 5/10/20/30/40 tasks: {ks:?}");
    let tail = &ks[2..];
    assert!(tail.iter().max().unwrap() - tail.iter().min().unwrap() <= 1, "{ks:?}");
    assert!(tail.iter().all(|&k| k <= cfg.k_star + 2));
}

#[test]
fn savings_for_a_single_task_and_for_many() {
    let shapes: Vec<LayerShape> = (0..24).map(|i| LayerShape::new(format!("l{i}"), 768, 768).unwrap()).collect();
    let one =
        savings(&shapes, SavingsParams { r: 32, k: 32, p: 8, phi: 4, num_tasks: 1, bytes_per_scalar: 4 }).unwrap();
    assert!(one.storage_ratio < 1.0, "{}", one.storage_ratio);
    let many =
        savings(&shapes, SavingsParams { r: 32, k: 32, p: 8, phi: 4, num_tasks: 500, bytes_per_scalar: 4 }).unwrap();
    assert!(many.storage_ratio > one.storage_ratio);
    eprintln!(
        "500 adapters: storage ratio {:.1}x, coefficient-only ratio {:.1}x",
        many.storage_ratio, many.coefficient_storage_ratio
    );
}

fn grids() -> impl Strategy<Value = (Vec<Vec<f64>>, bool)> {
    (1usize..7, any::<bool>()).prop_flat_map(|(t, hib)| {
        let rows: Vec<_> = (1..=t).map(|len| prop::collection::vec(-10.0f64..100.0, len)).collect();
        (rows, Just(hib))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forgetting_and_transfer_are_exclusive_and_non_negative((rows, hib) in grids()) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let g = grid(&refs, hib);
        for mode in [ForgettingMode::Peak, ForgettingMode::Prev] {
            let rep = forgetting_and_bwt(&g, mode).unwrap();
            for row in &rep.cells {
                for c in row {
                    prop_assert!(c.forgetting >= 0.0 && c.backward_transfer >= 0.0);
                    prop_assert!(c.forgetting == 0.0 || c.backward_transfer == 0.0);
                }
            }
            let earlier = rows.len() - 1;
            if earlier > 0 {
                let avg = rep.final_forgetting[..earlier].iter().sum::<f64>() / earlier as f64;
                prop_assert!((rep.average_forgetting - avg).abs() <= 1e-12 * (1.0 + avg));
            }
        }
        // The peak is at least as good as the previous step, so forgetting
        // against it is never smaller.
        let peak = forgetting_and_bwt(&g, ForgettingMode::Peak).unwrap();
        let prev = forgetting_and_bwt(&g, ForgettingMode::Prev).unwrap();
        for (a, b) in peak.cells.iter().flatten().zip(prev.cells.iter().flatten()) {
            prop_assert!(a.forgetting >= b.forgetting);
            prop_assert!(a.backward_transfer <= b.backward_transfer);
        }
    }
}
