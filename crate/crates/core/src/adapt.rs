//! Gradient training on linear regression tasks.
//!
//! Every trainable model here is a factored delta `Δ = P Qᵀ` (n × d) applied
//! as `h = W₀x + Δx`. The loss on a batch `X` (B × d) with targets
//! `T = Y − X W₀ᵀ` is `L = (1/B) Σ ‖Δx − t‖²`, whose gradients are
//!
//! ```text
//! R = X Q Pᵀ − T,   dL/dP = (2/B) Rᵀ (X Q),   dL/dQ = (2/B) Xᵀ (R P)
//! ```
//!
//! and each [`Parameterization`] maps its tensors onto `(P, Q)` and chains
//! these two gradients back by hand.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::{CoefficientPair, LoraAdapter, LoraLayer, ShareState, TaskCoefficients, TrainableBudget};
pub use crate::adapter::{TemporaryFactors, TemporaryLayer};
use crate::error::{Result, ShareError};
use crate::linalg::DenseMatrix;
use crate::parallel;
use crate::rng::{derive_seed, gaussian_matrix, seeded};

const MOMENTUM: f64 = 0.9;
const MAX_HALVINGS: usize = 10;

/// Inputs and regression targets (`y − W₀x`) of one task, per layer.
#[derive(Clone, Debug)]
pub struct LayerData {
    /// S × d
    pub x: DenseMatrix,
    /// S × n
    pub target: DenseMatrix,
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_name: String,
    pub train: BTreeMap<String, LayerData>,
    pub heldout: BTreeMap<String, LayerData>,
}

impl TaskData {
    fn layer(&self, id: &str) -> Result<(&LayerData, &LayerData)> {
        match (self.train.get(id), self.heldout.get(id)) {
            (Some(t), Some(h)) => Ok((t, h)),
            _ => Err(ShareError::UnknownLayer(id.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 400,
            batch_size: 0,
            seed: 0,
            optimizer: Optimizer::SgdMomentum,
            sigma: crate::DEFAULT_INIT_SIGMA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ShareError::validation("train.learning_rate", "must be finite and ≥ 0"));
        }
        if self.epochs == 0 {
            return Err(ShareError::validation("train.epochs", "must be ≥ 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ShareError::validation("train.sigma", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// How trainable tensors produce the `(P, Q)` pair of `Δ = P Qᵀ`.
#[derive(Clone, Debug)]
pub enum Parameterization {
    /// Tensors `[b (n×r), a (r×d)]`.
    Lora,
    /// Tensors `[beta_tmp (n×φ), eps_beta (φ×p), alpha_tmp (d×φ), eps_alpha (φ×p)]`.
    Temporary,
    /// Frozen bases; tensors `[eps_beta (k×p), eps_alpha (k×p)]`.
    Coefficients { beta: DenseMatrix, alpha: DenseMatrix },
    /// `Δ = E Vᵀ` with frozen `v` (d×k); tensors `[e (n×k)]`.
    RightSubspace { v: DenseMatrix },
}

impl Parameterization {
    pub fn factors(&self, t: &[DenseMatrix]) -> (DenseMatrix, DenseMatrix) {
        match self {
            Parameterization::Lora => (t[0].clone(), t[1].transpose()),
            Parameterization::Temporary => (t[0].dot(&t[1]), t[2].dot(&t[3])),
            Parameterization::Coefficients { beta, alpha } => (beta.dot(&t[0]), alpha.dot(&t[1])),
            Parameterization::RightSubspace { v } => (t[0].clone(), v.clone()),
        }
    }

    fn chain(&self, t: &[DenseMatrix], gp: &DenseMatrix, gq: &DenseMatrix) -> Vec<DenseMatrix> {
        match self {
            Parameterization::Lora => vec![gp.clone(), gq.transpose()],
            Parameterization::Temporary => vec![gp.dot_t(&t[1]), t[0].t_dot(gp), gq.dot_t(&t[3]), t[2].t_dot(gq)],
            Parameterization::Coefficients { beta, alpha } => vec![beta.t_dot(gp), alpha.t_dot(gq)],
            Parameterization::RightSubspace { .. } => vec![gp.clone()],
        }
    }

    fn arity(&self) -> usize {
        match self {
            Parameterization::Lora | Parameterization::Coefficients { .. } => 2,
            Parameterization::Temporary => 4,
            Parameterization::RightSubspace { .. } => 1,
        }
    }
}

/// Mean squared error `(1/B) Σ ‖Δx − t‖²` without gradients.
pub fn loss(param: &Parameterization, tensors: &[DenseMatrix], data: &LayerData) -> f64 {
    let (p, q) = param.factors(tensors);
    residual(&p, &q, data).frobenius_norm_sq() / data.x.rows().max(1) as f64
}

fn residual(p: &DenseMatrix, q: &DenseMatrix, data: &LayerData) -> DenseMatrix {
    data.x.dot(q).dot_t(p).sub(&data.target)
}

/// Loss and analytic gradient with respect to every tensor, in order.
pub fn loss_and_gradient(
    param: &Parameterization,
    tensors: &[DenseMatrix],
    data: &LayerData,
) -> (f64, Vec<DenseMatrix>) {
    let (p, q) = param.factors(tensors);
    let b = data.x.rows().max(1) as f64;
    let xq = data.x.dot(&q);
    let r = xq.dot_t(&p).sub(&data.target);
    let l = r.frobenius_norm_sq() / b;
    let gp = r.t_dot(&xq).scale(2.0 / b);
    let gq = data.x.t_dot(&r.dot(&p)).scale(2.0 / b);
    (l, param.chain(tensors, &gp, &gq))
}

/// Second moments of one layer's data. The loss is quadratic in `Δ`, so
/// full-batch training only ever needs `XᵀX/B`, `TᵀX/B` and `‖T‖²/B`, and an
/// epoch then costs O(n·d²) regardless of the sample count.
#[derive(Clone, Debug)]
pub struct Moments {
    /// d × d
    pub xx: DenseMatrix,
    /// n × d
    pub tx: DenseMatrix,
    pub tt: f64,
}

impl Moments {
    pub fn new(data: &LayerData) -> Self {
        let b = data.x.rows().max(1) as f64;
        Self {
            xx: data.x.t_dot(&data.x).scale(1.0 / b),
            tx: data.target.t_dot(&data.x).scale(1.0 / b),
            tt: data.target.frobenius_norm_sq() / b,
        }
    }

    pub fn loss(&self, param: &Parameterization, tensors: &[DenseMatrix]) -> f64 {
        let (p, q) = param.factors(tensors);
        self.terms(&p, &q).0
    }

    pub fn loss_and_gradient(&self, param: &Parameterization, tensors: &[DenseMatrix]) -> (f64, Vec<DenseMatrix>) {
        let (p, q) = param.factors(tensors);
        let (l, m, c, ptp, txq) = self.terms(&p, &q);
        let gp = p.dot(&c).sub(&txq).scale(2.0);
        let gq = m.dot(&ptp).sub(&self.tx.t_dot(&p)).scale(2.0);
        (l, param.chain(tensors, &gp, &gq))
    }

    /// Loss plus the intermediates `XᵀXQ/B`, `QᵀXᵀXQ/B`, `PᵀP` and `TᵀXQ/B`.
    fn terms(&self, p: &DenseMatrix, q: &DenseMatrix) -> (f64, DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix) {
        let m = self.xx.dot(q);
        let c = q.t_dot(&m);
        let ptp = p.t_dot(p);
        let txq = self.tx.dot(q);
        // Clamp the rounding error of the expanded square.
        let l = (ptp.inner(&c) - 2.0 * p.inner(&txq) + self.tt).max(0.0);
        (l, m, c, ptp, txq)
    }
}

/// Per-layer loss bookkeeping from one training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerTrace {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub heldout_initial: f64,
    pub heldout_final: f64,
    pub epochs_run: usize,
    pub halvings: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub layers: BTreeMap<String, LayerTrace>,
    pub trainable_params: usize,
}

/// Gradient descent with a loss-increase safeguard: an epoch that raises
/// the full training loss (or makes it non-finite) is rolled back and the
/// learning rate halved, at most ten times.
pub fn train_layer(
    param: &Parameterization,
    init: Vec<DenseMatrix>,
    train: &LayerData,
    heldout: &LayerData,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<DenseMatrix>, LayerTrace)> {
    cfg.validate()?;
    if init.len() != param.arity() {
        return Err(ShareError::Argument(format!("expected {} tensors, got {}", param.arity(), init.len())));
    }
    if train.x.rows() == 0 || train.x.rows() != train.target.rows() {
        return Err(ShareError::Shape("training data needs matching, non-empty x and target".into()));
    }
    let samples = train.x.rows();
    let batch = if cfg.batch_size == 0 { samples } else { cfg.batch_size.min(samples) };
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..samples).collect();

    let mut tensors = init;
    let mut velocity: Vec<DenseMatrix> = tensors.iter().map(|t| DenseMatrix::zeros(t.rows(), t.cols())).collect();
    let mut lr = cfg.learning_rate;
    let moments = (batch == samples).then(|| Moments::new(train));
    let train_loss = |t: &[DenseMatrix]| match &moments {
        Some(m) => m.loss(param, t),
        None => loss(param, t, train),
    };
    let mut current = train_loss(&tensors);
    let mut trace =
        LayerTrace { initial_loss: current, heldout_initial: loss(param, &tensors, heldout), ..LayerTrace::default() };
    if !current.is_finite() {
        return Err(ShareError::TrainingFailure { last_finite_loss: f64::NAN });
    }
    if lr == 0.0 {
        trace.final_loss = current;
        trace.heldout_final = trace.heldout_initial;
        return Ok((tensors, trace));
    }

    for _ in 0..cfg.epochs {
        let snapshot = tensors.clone();
        if batch < samples {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch) {
            let grads = match &moments {
                Some(m) => m.loss_and_gradient(param, &tensors).1,
                None => {
                    let view = LayerData { x: train.x.select_rows(chunk), target: train.target.select_rows(chunk) };
                    loss_and_gradient(param, &tensors, &view).1
                }
            };
            for ((t, v), g) in tensors.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                match cfg.optimizer {
                    Optimizer::Sgd => t.axpy(-lr, g),
                    Optimizer::SgdMomentum => {
                        *v = v.scale(MOMENTUM);
                        v.axpy(1.0, g);
                        t.axpy(-lr, v);
                    }
                }
            }
        }
        trace.epochs_run += 1;
        let next = train_loss(&tensors);
        if next.is_finite() && next <= current {
            current = next;
            continue;
        }
        tensors = snapshot;
        velocity.iter_mut().for_each(|v| *v = DenseMatrix::zeros(v.rows(), v.cols()));
        lr *= 0.5;
        trace.halvings += 1;
        if trace.halvings > MAX_HALVINGS {
            if next.is_finite() {
                break;
            }
            return Err(ShareError::TrainingFailure { last_finite_loss: current });
        }
    }
    trace.final_loss = current;
    trace.heldout_final = loss(param, &tensors, heldout);
    Ok((tensors, trace))
}

/// Copy the top-φ columns of every layer's factors and draw fresh
/// `N(0, σ²)` coefficients of width `state.hyper.p`.
pub fn spawn_temporary(
    state: &ShareState,
    task_name: &str,
    phi: usize,
    sigma: f64,
    seed: u64,
) -> Result<TemporaryFactors> {
    let k = state.factors.k;
    if phi == 0 || phi > k {
        return Err(ShareError::Argument(format!("phi={phi} must lie in 1..={k}")));
    }
    let p = state.hyper.p;
    let layers = state
        .factors
        .layers
        .iter()
        .enumerate()
        .map(|(i, (id, f))| {
            let mut rng = seeded(derive_seed(seed, "temporary", i as u64));
            let eps_beta_tmp = gaussian_matrix(&mut rng, phi, p, sigma);
            let eps_alpha_tmp = gaussian_matrix(&mut rng, phi, p, sigma);
            (
                id.clone(),
                TemporaryLayer {
                    beta_tmp: f.beta.column_range(0..phi),
                    alpha_tmp: f.alpha.column_range(0..phi),
                    eps_beta_tmp,
                    eps_alpha_tmp,
                },
            )
        })
        .collect();
    Ok(TemporaryFactors { task_name: task_name.to_string(), phi, p, layers })
}

fn layer_seed(cfg: &TrainConfig, label: &str, index: usize) -> u64 {
    derive_seed(cfg.seed, label, index as u64)
}

/// Optimise all four temporary tensors of every layer on `task`.
pub fn train_temporary(
    tmp: &TemporaryFactors,
    task: &TaskData,
    cfg: &TrainConfig,
) -> Result<(TemporaryFactors, TrainReport)> {
    tmp.validate()?;
    let ids: Vec<(usize, &String)> = tmp.layers.keys().enumerate().collect();
    let results = parallel::try_map(&ids, |&(i, id)| {
        let (train, heldout) = task.layer(id)?;
        let init = tmp.layers[id].tensors();
        let (t, trace) = train_layer(
            &Parameterization::Temporary,
            init,
            train,
            heldout,
            cfg,
            layer_seed(cfg, "train-temporary", i),
        )?;
        Ok::<_, ShareError>((id.clone(), TemporaryLayer::from_tensors(t), trace))
    })?;
    let mut out = tmp.clone();
    let mut report = TrainReport { trainable_params: tmp.trainable_params(), ..TrainReport::default() };
    for (id, layer, trace) in results {
        out.layers.insert(id.clone(), layer);
        report.layers.insert(id, trace);
    }
    Ok((out, report))
}

/// Optimise one task's coefficients against frozen factors. `init` overrides
/// the starting point; otherwise the task's stored coefficients are used.
pub fn train_coefficients_only(
    state: &ShareState,
    task_name: &str,
    init: Option<&TaskCoefficients>,
    task: &TaskData,
    cfg: &TrainConfig,
) -> Result<(TaskCoefficients, TrainReport)> {
    let start = match init {
        Some(c) => c,
        None => state.task(task_name)?,
    };
    start.validate_against(&state.factors)?;
    let ids: Vec<(usize, &String)> = state.factors.layers.keys().enumerate().collect();
    let results = parallel::try_map(&ids, |&(i, id)| {
        let f = &state.factors.layers[id];
        let c = &start.layers[id];
        let (train, heldout) = task.layer(id)?;
        let param = Parameterization::Coefficients { beta: f.beta.clone(), alpha: f.alpha.clone() };
        let (mut t, trace) = train_layer(
            &param,
            vec![c.eps_beta.clone(), c.eps_alpha.clone()],
            train,
            heldout,
            cfg,
            layer_seed(cfg, "train-coefficients", i),
        )?;
        let eps_alpha = t.pop().expect("two tensors");
        let eps_beta = t.pop().expect("two tensors");
        Ok::<_, ShareError>((id.clone(), CoefficientPair { eps_alpha, eps_beta }, trace))
    })?;
    let mut out = TaskCoefficients { task_name: task_name.to_string(), p: start.p, layers: BTreeMap::new() };
    let mut report = TrainReport::default();
    for (id, pair, trace) in results {
        report.trainable_params += 2 * pair.eps_alpha.rows() * pair.eps_alpha.cols();
        out.layers.insert(id.clone(), pair);
        report.layers.insert(id, trace);
    }
    Ok((out, report))
}

/// Train a rank-r LoRA adapter from `B = 0`, `A ~ N(0, σ²)`.
pub fn fit_baseline_lora(task: &TaskData, r: usize, cfg: &TrainConfig) -> Result<(LoraAdapter, TrainReport)> {
    if r == 0 {
        return Err(ShareError::Argument("LoRA rank must be ≥ 1".into()));
    }
    let ids: Vec<(usize, &String)> = task.train.keys().enumerate().collect();
    let results = parallel::try_map(&ids, |&(i, id)| {
        let (train, heldout) = task.layer(id)?;
        let (n, d) = (train.target.cols(), train.x.cols());
        let mut rng = seeded(layer_seed(cfg, "lora-init", i));
        let init = vec![DenseMatrix::zeros(n, r), gaussian_matrix(&mut rng, r, d, cfg.sigma)];
        let (mut t, trace) =
            train_layer(&Parameterization::Lora, init, train, heldout, cfg, layer_seed(cfg, "train-lora", i))?;
        let a = t.pop().expect("two tensors");
        let b = t.pop().expect("two tensors");
        Ok::<_, ShareError>((id.clone(), LoraLayer { a, b }, trace))
    })?;
    let mut layers = BTreeMap::new();
    let mut report = TrainReport::default();
    for (id, layer, trace) in results {
        report.trainable_params += r * (layer.b.rows() + layer.a.cols());
        layers.insert(id.clone(), layer);
        report.layers.insert(id, trace);
    }
    Ok((LoraAdapter::new(task.task_name.clone(), layers)?, report))
}

/// Trainable count for a parameter budget on a task's layers.
pub fn budget_for(task: &TaskData, budget: TrainableBudget) -> Result<usize> {
    let shapes: Vec<_> = task
        .train
        .iter()
        .map(|(id, l)| crate::adapter::LayerShape { layer_id: id.clone(), n: l.target.cols(), d: l.x.cols() })
        .collect();
    crate::adapter::trainable_param_count(&shapes, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, random_orthonormal, seeded};

    fn regression(n: usize, d: usize, w: &DenseMatrix, samples: usize, seed: u64) -> LayerData {
        let mut rng = seeded(seed);
        let x = gaussian_matrix(&mut rng, samples, d, 1.0);
        let target = x.dot_t(w);
        assert_eq!(target.cols(), n);
        LayerData { x, target }
    }

    fn fd_check(param: &Parameterization, tensors: &[DenseMatrix], data: &LayerData) {
        let (_, grads) = loss_and_gradient(param, tensors, data);
        let h = 1e-6;
        for (ti, g) in grads.iter().enumerate() {
            for idx in 0..g.data().len() {
                let mut plus = tensors.to_vec();
                let mut minus = tensors.to_vec();
                let (i, j) = (idx / g.cols(), idx % g.cols());
                let v = plus[ti].get(i, j);
                plus[ti].set(i, j, v + h);
                let v = minus[ti].get(i, j);
                minus[ti].set(i, j, v - h);
                let fd = (loss(param, &plus, data) - loss(param, &minus, data)) / (2.0 * h);
                let an = g.get(i, j);
                let scale = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / scale < 1e-5, "tensor {ti} ({i},{j}): fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (n, d, k, p) = (8, 6, 3, 2);
        let mut rng = seeded(1);
        let w = gaussian_matrix(&mut rng, n, d, 1.0);
        let data = regression(n, d, &w, 20, 2);
        let temp = vec![
            gaussian_matrix(&mut rng, n, k, 1.0),
            gaussian_matrix(&mut rng, k, p, 1.0),
            gaussian_matrix(&mut rng, d, k, 1.0),
            gaussian_matrix(&mut rng, k, p, 1.0),
        ];
        fd_check(&Parameterization::Temporary, &temp, &data);
        let coeff = Parameterization::Coefficients {
            beta: random_orthonormal(&mut rng, n, k),
            alpha: random_orthonormal(&mut rng, d, k),
        };
        fd_check(&coeff, &[gaussian_matrix(&mut rng, k, p, 1.0), gaussian_matrix(&mut rng, k, p, 1.0)], &data);
        fd_check(
            &Parameterization::Lora,
            &[gaussian_matrix(&mut rng, n, p, 1.0), gaussian_matrix(&mut rng, p, d, 1.0)],
            &data,
        );
        let right = Parameterization::RightSubspace { v: random_orthonormal(&mut rng, d, k) };
        fd_check(&right, &[gaussian_matrix(&mut rng, n, k, 1.0)], &data);
    }

    #[test]
    fn moments_agree_with_direct_evaluation() {
        let (n, d, k, p) = (7, 5, 3, 2);
        let mut rng = seeded(11);
        let w = gaussian_matrix(&mut rng, n, d, 1.0);
        let mut data = regression(n, d, &w, 30, 4);
        data.target = data.target.add(&gaussian_matrix(&mut rng, 30, n, 0.3));
        let m = Moments::new(&data);
        let cases: Vec<(Parameterization, Vec<DenseMatrix>)> = vec![
            (
                Parameterization::Temporary,
                vec![
                    gaussian_matrix(&mut rng, n, k, 1.0),
                    gaussian_matrix(&mut rng, k, p, 1.0),
                    gaussian_matrix(&mut rng, d, k, 1.0),
                    gaussian_matrix(&mut rng, k, p, 1.0),
                ],
            ),
            (Parameterization::Lora, vec![gaussian_matrix(&mut rng, n, p, 1.0), gaussian_matrix(&mut rng, p, d, 1.0)]),
        ];
        for (param, t) in &cases {
            let (l0, g0) = loss_and_gradient(param, t, &data);
            let (l1, g1) = m.loss_and_gradient(param, t);
            assert!((l0 - l1).abs() <= 1e-10 * l0.max(1.0), "{l0} vs {l1}");
            for (a, b) in g0.iter().zip(&g1) {
                assert!(a.sub(b).frobenius_norm() <= 1e-10 * a.frobenius_norm().max(1.0));
            }
        }
    }

    #[test]
    fn zero_target_with_zero_coefficients_is_stationary() {
        let mut rng = seeded(3);
        let data = LayerData { x: gaussian_matrix(&mut rng, 16, 5, 1.0), target: DenseMatrix::zeros(16, 7) };
        let t = vec![
            random_orthonormal(&mut rng, 7, 2),
            DenseMatrix::zeros(2, 1),
            random_orthonormal(&mut rng, 5, 2),
            DenseMatrix::zeros(2, 1),
        ];
        let (l, g) = loss_and_gradient(&Parameterization::Temporary, &t, &data);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn lora_fits_low_rank_task() {
        let (n, d) = (10, 8);
        let mut rng = seeded(4);
        let w = gaussian_matrix(&mut rng, n, 2, 0.5).dot(&gaussian_matrix(&mut rng, 2, d, 0.5));
        let mut train = BTreeMap::new();
        let mut heldout = BTreeMap::new();
        train.insert("l".to_string(), regression(n, d, &w, 200, 5));
        heldout.insert("l".to_string(), regression(n, d, &w, 100, 6));
        let task = TaskData { task_name: "t".into(), train, heldout };
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 3000, sigma: 0.1, ..TrainConfig::default() };
        let (adapter, report) = fit_baseline_lora(&task, 2, &cfg).unwrap();
        let rel = adapter.layers["l"].delta().sub(&w).frobenius_norm_sq() / w.frobenius_norm_sq();
        assert!(rel < 1e-3, "relative error {rel}");
        let trace = &report.layers["l"];
        assert!(trace.heldout_final < trace.heldout_initial);
        assert!(fit_baseline_lora(&task, 0, &cfg).is_err());
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rng = seeded(7);
        let data = regression(4, 3, &gaussian_matrix(&mut rng, 4, 3, 1.0), 10, 8);
        let init = vec![gaussian_matrix(&mut rng, 4, 1, 1.0), gaussian_matrix(&mut rng, 1, 3, 1.0)];
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let (out, _) = train_layer(&Parameterization::Lora, init.clone(), &data, &data, &cfg, 0).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn huge_learning_rate_backs_off_instead_of_diverging() {
        let mut rng = seeded(9);
        let data = regression(6, 5, &gaussian_matrix(&mut rng, 6, 5, 1.0), 30, 10);
        let init = vec![gaussian_matrix(&mut rng, 6, 2, 0.1), gaussian_matrix(&mut rng, 2, 5, 0.1)];
        let cfg = TrainConfig { learning_rate: 20.0, epochs: 50, ..TrainConfig::default() };
        let (out, trace) = train_layer(&Parameterization::Lora, init, &data, &data, &cfg, 0).unwrap();
        assert!(trace.halvings >= 1);
        assert!(trace.final_loss <= trace.initial_loss);
        assert!(out.iter().all(|m| m.all_finite()));
    }
}
