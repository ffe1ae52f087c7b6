//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use share_core::adapt::spawn_temporary;
use share_core::adapter::{
    CoefficientPair, Hyper, LayerFactors, LoraAdapter, LoraLayer, MergeEvent, ShareFactors, ShareState,
    TaskCoefficients, TaskSource,
};
use share_core::init::{init_coefficients, init_factors};
use share_core::linalg::{DenseMatrix, KPolicy};
use share_core::merge::{merge, MergeInput, MergeOptions};
use share_core::rng::{derive_seed, gaussian_matrix, seeded};

pub fn random_adapter(name: &str, layers: &[(&str, usize, usize)], r: usize, seed: u64) -> LoraAdapter {
    let mut rng = seeded(seed);
    let mut out = BTreeMap::new();
    for &(id, n, d) in layers {
        out.insert(
            id.to_string(),
            LoraLayer { a: gaussian_matrix(&mut rng, r, d, 1.0), b: gaussian_matrix(&mut rng, n, r, 1.0) },
        );
    }
    LoraAdapter::new(name, out).unwrap()
}

/// A data-trained state with `tasks` tasks: bootstrapped from one random
/// adapter, then grown by merging random temporaries.
pub fn data_state(layers: &[(&str, usize, usize)], k: usize, p: usize, tasks: usize, seed: u64) -> ShareState {
    let boot = random_adapter("boot", layers, k + 1, derive_seed(seed, "boot", 0));
    let factors = init_factors(&[boot], KPolicy::fixed(k)).unwrap();
    let t0 = init_coefficients(&factors, "t0", p, 1.0, derive_seed(seed, "coeffs", 0)).unwrap();
    let mut state = ShareState {
        factors,
        tasks: vec![t0],
        hyper: Hyper { k, p, phi: (k / 2).max(1), ..Hyper::default() },
        history: vec![MergeEvent { timestep: 0, task_name: "t0".into(), source: TaskSource::Data }],
    };
    for t in 1..tasks {
        let tmp = spawn_temporary(&state, &format!("t{t}"), state.hyper.phi, 1.0, derive_seed(seed, "tmp", t as u64))
            .unwrap();
        state = merge(&state, &MergeInput::Temporary(tmp), &MergeOptions::default()).unwrap().0;
    }
    state
}

/// Every task's reconstructed delta, per layer.
pub fn deltas(state: &ShareState) -> BTreeMap<String, BTreeMap<String, DenseMatrix>> {
    state
        .tasks
        .iter()
        .map(|t| {
            let rec =
                share_core::adapter::reconstruct_adapter(&state.factors, t, state.uses_mean(&t.task_name)).unwrap();
            (t.task_name.clone(), rec.into_iter().map(|(id, l)| (id, l.delta())).collect())
        })
        .collect()
}

/// Largest Frobenius change of any task delta present in both maps.
pub fn max_delta_change(
    before: &BTreeMap<String, BTreeMap<String, DenseMatrix>>,
    after: &BTreeMap<String, BTreeMap<String, DenseMatrix>>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (task, layers) in before {
        for (id, d) in layers {
            worst = worst.max(d.sub(&after[task][id]).frobenius_norm());
        }
    }
    worst
}

/// A small state built from closed-form values only, so its serialized
/// bytes do not depend on any decomposition or random stream.
pub fn golden_state() -> ShareState {
    let (n, d, k, p) = (5, 4, 2, 2);
    let basis = |rows: usize| DenseMatrix::from_fn(rows, k, |i, j| if i == j { 1.0 } else { 0.0 });
    let mut layers = BTreeMap::new();
    for (l, id) in ["attn.q", "attn.v"].into_iter().enumerate() {
        layers.insert(
            id.to_string(),
            LayerFactors {
                alpha: basis(d),
                beta: basis(n),
                mean_a: (0..d).map(|i| 0.125 * (i + l) as f64).collect(),
                mean_b: (0..n).map(|i| -0.25 * (i + 2 * l) as f64).collect(),
            },
        );
    }
    let tasks = ["alpha", "beta"]
        .into_iter()
        .enumerate()
        .map(|(t, name)| TaskCoefficients {
            task_name: name.to_string(),
            p,
            layers: layers
                .keys()
                .enumerate()
                .map(|(l, id)| {
                    let v = |i: usize, j: usize, s: f64| s * (1 + i + 2 * j + 3 * l + 5 * t) as f64 / 8.0;
                    (
                        id.clone(),
                        CoefficientPair {
                            eps_alpha: DenseMatrix::from_fn(k, p, |i, j| v(i, j, 1.0)),
                            eps_beta: DenseMatrix::from_fn(k, p, |i, j| v(i, j, -0.5)),
                        },
                    )
                })
                .collect(),
        })
        .collect();
    ShareState {
        factors: ShareFactors { k, mean_count: 3, layers },
        tasks,
        hyper: Hyper { k, p, phi: 1, ..Hyper::default() },
        history: vec![
            MergeEvent { timestep: 0, task_name: "alpha".into(), source: TaskSource::Data },
            MergeEvent { timestep: 1, task_name: "beta".into(), source: TaskSource::Adapter },
        ],
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}
