//! Temporary-factor, coefficient and baseline training against closed-form
//! least-squares solutions.

use std::collections::BTreeMap;

use share_core::adapt::{
    fit_baseline_lora, loss, spawn_temporary, train_coefficients_only, train_layer, train_temporary, LayerData,
    Optimizer, Parameterization, TaskData, TrainConfig,
};
use share_core::adapter::{
    reconstruct_adapter, CoefficientPair, Hyper, LayerFactors, MergeEvent, ShareFactors, ShareState, TaskCoefficients,
    TaskSource,
};
use share_core::init::init_coefficients;
use share_core::linalg::{svd, tail_energy, DenseMatrix};
use share_core::rng::{gaussian_matrix, random_orthonormal, seeded};

const N: usize = 12;
const D: usize = 10;

/// A one-layer state with random orthonormal factors and one stored task.
fn state(k: usize, seed: u64) -> ShareState {
    let mut rng = seeded(seed);
    let mut layers = BTreeMap::new();
    layers.insert(
        "l0".to_string(),
        LayerFactors {
            alpha: random_orthonormal(&mut rng, D, k),
            beta: random_orthonormal(&mut rng, N, k),
            mean_a: vec![0.0; D],
            mean_b: vec![0.0; N],
        },
    );
    let factors = ShareFactors { k, mean_count: 1, layers };
    let t0 = init_coefficients(&factors, "t0", 2, 1.0, seed).unwrap();
    ShareState {
        factors,
        tasks: vec![t0],
        hyper: Hyper { k, p: 2, phi: 1, ..Hyper::default() },
        history: vec![MergeEvent { timestep: 0, task_name: "t0".into(), source: TaskSource::Data }],
    }
}

/// Noise-free regression data for the true delta `w` (n × d).
fn task(w: &DenseMatrix, samples: usize, seed: u64) -> TaskData {
    let mut rng = seeded(seed);
    let mut split = |s: usize| {
        let x = gaussian_matrix(&mut rng, s, w.cols(), 1.0);
        let target = x.dot_t(w);
        BTreeMap::from([("l0".to_string(), LayerData { x, target })])
    };
    TaskData { task_name: "new".into(), train: split(samples), heldout: split(256) }
}

fn relative(delta: &DenseMatrix, truth: &DenseMatrix) -> f64 {
    delta.sub(truth).frobenius_norm_sq() / truth.frobenius_norm_sq()
}

fn cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: lr, epochs, sigma: 0.2, seed: 3, ..TrainConfig::default() }
}

#[test]
fn temporary_factors_fit_a_rank_one_task_in_the_parent_subspace() {
    let s = state(4, 1);
    let f = &s.factors.layers["l0"];
    let truth = f.beta.column_range(0..1).dot_t(&f.alpha.column_range(0..1)).scale(1.5);
    let data = task(&truth, 256, 2);
    let mut st = s.clone();
    st.hyper.p = 1;
    let tmp = spawn_temporary(&st, "new", 1, 0.2, 4).unwrap();
    assert_eq!(tmp.layers["l0"].beta_tmp, f.beta.column_range(0..1));
    let before = tmp.clone();
    let (trained, report) = train_temporary(&tmp, &data, &cfg(0.1, 800)).unwrap();
    assert_eq!(tmp, before, "input temporaries are untouched");
    assert_eq!(report.trainable_params, N + D + 2);
    let (p, q) = trained.layers["l0"].product();
    let heldout = &data.heldout["l0"];
    let rel =
        loss(&Parameterization::Lora, &[p, q.transpose()], heldout) / (heldout.target.frobenius_norm_sq() / 256.0);
    assert!(rel <= 1e-3, "held-out relative error {rel}");
    let trace = &report.layers["l0"];
    assert!(trace.heldout_final < trace.heldout_initial);
}

#[test]
fn coefficient_training_recovers_the_projection() {
    let s = state(4, 5);
    let f = &s.factors.layers["l0"];
    let mut rng = seeded(6);
    let e = gaussian_matrix(&mut rng, 4, 2, 1.0).dot_t(&gaussian_matrix(&mut rng, 4, 2, 1.0));
    let truth = f.beta.dot(&e).dot_t(&f.alpha);
    let data = task(&truth, 200, 7);
    let frozen = s.clone();
    let (coeffs, report) = train_coefficients_only(&s, "t0", None, &data, &cfg(0.1, 1500)).unwrap();
    assert_eq!(s, frozen, "factors and stored tasks are untouched");
    assert_eq!(report.trainable_params, 2 * 4 * 2);
    let rec = reconstruct_adapter(&s.factors, &coeffs, false).unwrap();
    let rel = relative(&rec["l0"].delta(), &truth);
    assert!(rel <= 1e-3, "relative error {rel}");
}

#[test]
fn zero_learning_rate_keeps_coefficients() {
    let s = state(3, 8);
    let truth = gaussian_matrix(&mut seeded(9), N, D, 1.0);
    let data = task(&truth, 64, 10);
    let (coeffs, _) = train_coefficients_only(&s, "t0", None, &data, &cfg(0.0, 5)).unwrap();
    assert_eq!(&coeffs.layers, &s.tasks[0].layers);
}

#[test]
fn wider_coefficients_never_fit_worse() {
    let s = state(8, 11);
    let f = &s.factors.layers["l0"];
    // Full-rank inside the span, so every extra column has work to do.
    let e = gaussian_matrix(&mut seeded(12), 8, 8, 1.0);
    let truth = f.beta.dot(&e).dot_t(&f.alpha);
    let data = task(&truth, 256, 13);
    let mut previous = f64::INFINITY;
    for p in [1, 2, 4, 8] {
        let init = init_coefficients(&s.factors, "t0", p, 0.2, 14).unwrap();
        let (_, report) = train_coefficients_only(&s, "t0", Some(&init), &data, &cfg(0.05, 3000)).unwrap();
        let fin = report.layers["l0"].final_loss;
        assert!(fin <= previous * (1.0 + 1e-6), "p={p}: {fin} > {previous}");
        previous = fin;
    }
}

#[test]
fn baseline_lora_fits_low_rank_tasks() {
    let mut rng = seeded(15);
    let truth = gaussian_matrix(&mut rng, N, 3, 1.0).dot(&gaussian_matrix(&mut rng, 3, D, 1.0)).scale(0.3);
    let data = task(&truth, 256, 16);
    let (adapter, _) = fit_baseline_lora(&data, 3, &cfg(0.05, 1500)).unwrap();
    let rel = relative(&adapter.layers["l0"].delta(), &truth);
    assert!(rel <= 1e-3, "relative error {rel}");
    assert!(fit_baseline_lora(&data, 0, &cfg(0.05, 10)).is_err());
}

#[test]
fn undersized_lora_cannot_beat_the_eckart_young_floor() {
    let truth = gaussian_matrix(&mut seeded(17), N, D, 0.5);
    let data = task(&truth, 256, 18);
    let floor = tail_energy(&svd(&truth).unwrap().s, 2);
    let (adapter, _) = fit_baseline_lora(&data, 2, &cfg(0.05, 800)).unwrap();
    let err = adapter.layers["l0"].delta().sub(&truth).frobenius_norm_sq();
    assert!(err >= floor * (1.0 - 1e-9), "{err} < floor {floor}");
}

#[test]
fn full_batch_training_never_raises_the_loss() {
    let s = state(4, 19);
    let f = &s.factors.layers["l0"];
    let truth = gaussian_matrix(&mut seeded(20), N, D, 1.0);
    let data = task(&truth, 128, 21);
    let layer = &data.train["l0"];
    let cases = [
        (Parameterization::RightSubspace { v: f.alpha.clone() }, vec![DenseMatrix::zeros(N, 4)]),
        (
            Parameterization::Coefficients { beta: f.beta.clone(), alpha: f.alpha.clone() },
            vec![gaussian_matrix(&mut seeded(22), 4, 2, 0.2), gaussian_matrix(&mut seeded(23), 4, 2, 0.2)],
        ),
    ];
    for (param, mut tensors) in cases {
        // A step size large enough that the safeguard has to intervene.
        let step = TrainConfig { learning_rate: 2.0, epochs: 1, optimizer: Optimizer::Sgd, ..TrainConfig::default() };
        let mut previous = loss(&param, &tensors, layer);
        for epoch in 0..60 {
            let (next, trace) = train_layer(&param, tensors, layer, layer, &step, epoch).unwrap();
            assert!(trace.final_loss <= previous, "epoch {epoch}: {} > {previous}", trace.final_loss);
            previous = trace.final_loss;
            tensors = next;
        }
    }
}

#[test]
fn temporary_budget_is_exact() {
    let s = state(6, 24);
    for (phi, p) in [(1, 1), (2, 3), (6, 2)] {
        let mut st = s.clone();
        st.hyper.p = p;
        let tmp = spawn_temporary(&st, "x", phi, 0.1, 1).unwrap();
        assert_eq!(tmp.trainable_params(), phi * (N + D + 2 * p));
    }
    let full = spawn_temporary(&s, "x", 6, 0.1, 1).unwrap();
    assert_eq!(full.layers["l0"].beta_tmp, s.factors.layers["l0"].beta);
    assert_eq!(full.layers["l0"].alpha_tmp, s.factors.layers["l0"].alpha);
    assert!(spawn_temporary(&s, "x", 7, 0.1, 1).is_err());
}

#[test]
fn stored_coefficients_are_reused_when_no_init_is_given() {
    let s = state(3, 25);
    let custom = TaskCoefficients {
        task_name: "t0".into(),
        p: 1,
        layers: BTreeMap::from([(
            "l0".to_string(),
            CoefficientPair { eps_alpha: DenseMatrix::zeros(3, 1), eps_beta: DenseMatrix::zeros(3, 1) },
        )]),
    };
    let data = task(&DenseMatrix::zeros(N, D), 32, 26);
    let (out, _) = train_coefficients_only(&s, "t0", Some(&custom), &data, &cfg(0.1, 20)).unwrap();
    assert_eq!(out.p, 1, "zero target and zero start is a stationary point");
    assert_eq!(out.layers, custom.layers);
}
