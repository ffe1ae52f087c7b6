//! Adapters, shared factors, task coefficients and the continual state.
//!
//! Shape and consistency rules for all of these live here; every other module
//! assumes values that passed [`ShareState::validate`] or the constructors.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShareError};
use crate::linalg::DenseMatrix;

/// Orthonormality tolerance for factors computed in f64.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Orthonormality tolerance for factors that went through f32 storage.
pub const STORED_ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer_id: String,
    /// Output dimension.
    pub n: usize,
    /// Input dimension.
    pub d: usize,
}

impl LayerShape {
    pub fn new(layer_id: impl Into<String>, n: usize, d: usize) -> Result<Self> {
        let layer_id = layer_id.into();
        if n == 0 || d == 0 {
            return Err(ShareError::validation(
                format!("layer {layer_id}"),
                format!("dimensions must be positive, got n={n}, d={d}"),
            ));
        }
        Ok(Self { layer_id, n, d })
    }
}

/// Ordered set of layer shapes with unique ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    layers: Vec<LayerShape>,
}

impl ModelLayout {
    pub fn new(layers: Vec<LayerShape>) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &layers {
            if l.n == 0 || l.d == 0 {
                return Err(ShareError::validation(format!("layer {}", l.layer_id), "dimensions must be positive"));
            }
            if !seen.insert(l.layer_id.as_str()) {
                return Err(ShareError::validation("layout", format!("duplicate layer id {}", l.layer_id)));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn get(&self, layer_id: &str) -> Option<&LayerShape> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }
}

/// One layer of a LoRA adapter: `delta = b · a`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    /// r × d
    pub a: DenseMatrix,
    /// n × r
    pub b: DenseMatrix,
}

impl LoraLayer {
    pub fn delta(&self) -> DenseMatrix {
        self.b.dot(&self.a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub task_name: String,
    pub rank: usize,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl LoraAdapter {
    pub fn new(task_name: impl Into<String>, layers: BTreeMap<String, LoraLayer>) -> Result<Self> {
        let task_name = task_name.into();
        let rank = layers.values().next().map_or(0, |l| l.a.rows());
        if layers.is_empty() {
            return Err(ShareError::validation(format!("adapter {task_name}"), "has no layers"));
        }
        if rank == 0 {
            return Err(ShareError::validation(format!("adapter {task_name}"), "rank must be ≥ 1"));
        }
        for (id, l) in &layers {
            if l.a.rows() != rank || l.b.cols() != rank {
                return Err(ShareError::consistency(
                    id.clone(),
                    format!(
                        "adapter {task_name}: a is {}x{}, b is {}x{}, expected shared rank {rank}",
                        l.a.rows(),
                        l.a.cols(),
                        l.b.rows(),
                        l.b.cols()
                    ),
                ));
            }
        }
        Ok(Self { task_name, rank, layers })
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            layers: self
                .layers
                .iter()
                .map(|(id, l)| LayerShape { layer_id: id.clone(), n: l.b.rows(), d: l.a.cols() })
                .collect(),
        }
    }

    /// Check every layer against a declared layout (same ids, same n, d).
    pub fn validate_against(&self, layout: &ModelLayout) -> Result<()> {
        if self.layers.len() != layout.layers.len() {
            return Err(ShareError::validation(
                format!("adapter {}", self.task_name),
                format!("has {} layers, layout declares {}", self.layers.len(), layout.layers.len()),
            ));
        }
        for shape in &layout.layers {
            let l = self.layers.get(&shape.layer_id).ok_or_else(|| {
                ShareError::validation(
                    format!("adapter {}", self.task_name),
                    format!("missing layer {}", shape.layer_id),
                )
            })?;
            if l.b.rows() != shape.n || l.a.cols() != shape.d {
                return Err(ShareError::validation(
                    format!("adapter {} layer {}", self.task_name, shape.layer_id),
                    format!("delta is {}x{}, layout declares {}x{}", l.b.rows(), l.a.cols(), shape.n, shape.d),
                ));
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(|l| l.a.rows() * l.a.cols() + l.b.rows() * l.b.cols()).sum()
    }
}

/// Principal bases and centering offsets for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFactors {
    /// d × k
    pub alpha: DenseMatrix,
    /// n × k
    pub beta: DenseMatrix,
    /// length d
    pub mean_a: Vec<f64>,
    /// length n
    pub mean_b: Vec<f64>,
}

impl LayerFactors {
    pub fn n(&self) -> usize {
        self.beta.rows()
    }

    pub fn d(&self) -> usize {
        self.alpha.rows()
    }
}

/// The shared subspace: per-layer bases with a common k.
#[derive(Clone, Debug, PartialEq)]
pub struct ShareFactors {
    pub k: usize,
    /// Number of raw rank vectors folded into the stored means.
    pub mean_count: usize,
    pub layers: BTreeMap<String, LayerFactors>,
}

impl ShareFactors {
    pub fn layer(&self, layer_id: &str) -> Result<&LayerFactors> {
        self.layers.get(layer_id).ok_or_else(|| ShareError::UnknownLayer(layer_id.to_string()))
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            layers: self.layers.iter().map(|(id, f)| LayerShape { layer_id: id.clone(), n: f.n(), d: f.d() }).collect(),
        }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.k == 0 {
            return Err(ShareError::validation("factors.k", "must be ≥ 1"));
        }
        for (id, f) in &self.layers {
            let field = |name: &str| format!("factors.{id}.{name}");
            if f.alpha.cols() != self.k || f.beta.cols() != self.k {
                return Err(ShareError::validation(
                    field("k"),
                    format!("alpha has {} columns, beta has {}, expected {}", f.alpha.cols(), f.beta.cols(), self.k),
                ));
            }
            if f.mean_a.len() != f.alpha.rows() {
                return Err(ShareError::validation(field("mean_a"), "length differs from d"));
            }
            if f.mean_b.len() != f.beta.rows() {
                return Err(ShareError::validation(field("mean_b"), "length differs from n"));
            }
            if !f.mean_a.iter().chain(&f.mean_b).all(|v| v.is_finite()) {
                return Err(ShareError::validation(field("means"), "non-finite entry"));
            }
            for (name, m) in [("alpha", &f.alpha), ("beta", &f.beta)] {
                if !m.all_finite() {
                    return Err(ShareError::validation(field(name), "non-finite entry"));
                }
                let r = m.orthonormality_residual();
                if r > tol {
                    return Err(ShareError::validation(
                        field(name),
                        format!("columns not orthonormal (residual {r:e} > {tol:e})"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(|f| self.k * (f.n() + f.d()) + f.n() + f.d()).sum()
    }
}

/// Task-specific coefficients for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientPair {
    /// k × p
    pub eps_alpha: DenseMatrix,
    /// k × p
    pub eps_beta: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskCoefficients {
    pub task_name: String,
    pub p: usize,
    pub layers: BTreeMap<String, CoefficientPair>,
}

impl TaskCoefficients {
    pub fn layer(&self, layer_id: &str) -> Result<&CoefficientPair> {
        self.layers.get(layer_id).ok_or_else(|| ShareError::UnknownLayer(layer_id.to_string()))
    }

    pub fn validate_against(&self, factors: &ShareFactors) -> Result<()> {
        if self.p == 0 {
            return Err(ShareError::validation(format!("task {}", self.task_name), "pseudo-rank p must be ≥ 1"));
        }
        for id in factors.layers.keys() {
            if !self.layers.contains_key(id) {
                return Err(ShareError::consistency(
                    id.clone(),
                    format!("task {} has no coefficients for this layer", self.task_name),
                ));
            }
        }
        for (id, c) in &self.layers {
            if !factors.layers.contains_key(id) {
                return Err(ShareError::consistency(
                    id.clone(),
                    format!("task {} references a layer the factors lack", self.task_name),
                ));
            }
            for (name, m) in [("eps_alpha", &c.eps_alpha), ("eps_beta", &c.eps_beta)] {
                if m.shape() != (factors.k, self.p) {
                    return Err(ShareError::consistency(
                        id.clone(),
                        format!(
                            "task {} {name} is {}x{}, expected {}x{}",
                            self.task_name,
                            m.rows(),
                            m.cols(),
                            factors.k,
                            self.p
                        ),
                    ));
                }
                if !m.all_finite() {
                    return Err(ShareError::consistency(id.clone(), format!("{name} has non-finite entries")));
                }
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.layers
            .values()
            .map(|c| c.eps_alpha.rows() * c.eps_alpha.cols() + c.eps_beta.rows() * c.eps_beta.cols())
            .sum()
    }
}

/// Hyperparameters carried with a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    /// Configured number of principal directions.
    pub k: usize,
    /// Pseudo-rank for newly trained tasks.
    pub p: usize,
    /// Temporary directions unfrozen per new task.
    pub phi: usize,
    pub variance_threshold: f64,
    /// Std-dev of freshly sampled coefficients.
    pub init_sigma: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            k: 32,
            p: 8,
            phi: 4,
            variance_threshold: crate::linalg::DEFAULT_VARIANCE_THRESHOLD,
            init_sigma: crate::DEFAULT_INIT_SIGMA,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 || self.phi == 0 {
            return Err(ShareError::validation("hyper", "k, p and phi must be ≥ 1"));
        }
        if self.phi > self.k {
            return Err(ShareError::validation("hyper.phi", format!("phi={} exceeds k={}", self.phi, self.k)));
        }
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(ShareError::validation("hyper.variance_threshold", "must lie in (0, 1]"));
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(ShareError::validation("hyper.init_sigma", "must be finite and ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Data,
    Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub timestep: usize,
    pub task_name: String,
    pub source: TaskSource,
}

/// Factors, every task's coefficients, hyperparameters and history.
///
/// A state is a value: updates build a new state and leave the old one intact.
#[derive(Clone, Debug, PartialEq)]
pub struct ShareState {
    pub factors: ShareFactors,
    pub tasks: Vec<TaskCoefficients>,
    pub hyper: Hyper,
    pub history: Vec<MergeEvent>,
}

impl ShareState {
    pub fn validate(&self, tol: f64) -> Result<()> {
        self.hyper.validate()?;
        self.factors.validate(tol)?;
        let mut names = HashSet::new();
        for t in &self.tasks {
            if !names.insert(t.task_name.as_str()) {
                return Err(ShareError::validation("tasks", format!("duplicate task name {}", t.task_name)));
            }
            t.validate_against(&self.factors)?;
        }
        for e in &self.history {
            if !names.contains(e.task_name.as_str()) {
                return Err(ShareError::validation(
                    "history",
                    format!("event references unknown task {}", e.task_name),
                ));
            }
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Result<&TaskCoefficients> {
        self.tasks.iter().find(|t| t.task_name == name).ok_or_else(|| ShareError::UnknownTask(name.to_string()))
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_name == name)
    }

    /// Fails with a rename suggestion if `name` is already taken.
    pub fn ensure_new_task_name(&self, name: &str) -> Result<()> {
        if self.task_index(name).is_none() {
            return Ok(());
        }
        let suggestion = (2..)
            .map(|i| format!("{name}-{i}"))
            .find(|cand| self.task_index(cand).is_none())
            .unwrap_or_else(|| format!("{name}-new"));
        Err(ShareError::TaskCollision { name: name.to_string(), suggestion })
    }

    /// How a task entered the state, from its first history event.
    pub fn source_of(&self, name: &str) -> Option<TaskSource> {
        self.history.iter().find(|e| e.task_name == name).map(|e| e.source)
    }

    /// Tasks ingested as raw adapters were centered against the stored
    /// means, so their reconstruction adds the means back; data-trained tasks
    /// never saw the means.
    pub fn uses_mean(&self, name: &str) -> bool {
        self.source_of(name) == Some(TaskSource::Adapter)
    }

    pub fn next_timestep(&self) -> usize {
        self.history.iter().map(|e| e.timestep + 1).max().unwrap_or(0)
    }

    pub fn scalar_count(&self) -> usize {
        self.factors.scalar_count() + self.tasks.iter().map(TaskCoefficients::scalar_count).sum::<usize>()
    }
}

/// Temporarily unfrozen copies of the leading φ principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporaryLayer {
    /// n × φ
    pub beta_tmp: DenseMatrix,
    /// d × φ
    pub alpha_tmp: DenseMatrix,
    /// φ × p
    pub eps_beta_tmp: DenseMatrix,
    /// φ × p
    pub eps_alpha_tmp: DenseMatrix,
}

impl TemporaryLayer {
    /// `(β_tmp ε_β, α_tmp ε_α)`, i.e. the `(B̂, Âᵀ)` pair of the new task.
    pub fn product(&self) -> (DenseMatrix, DenseMatrix) {
        (self.beta_tmp.dot(&self.eps_beta_tmp), self.alpha_tmp.dot(&self.eps_alpha_tmp))
    }

    pub(crate) fn tensors(&self) -> Vec<DenseMatrix> {
        vec![self.beta_tmp.clone(), self.eps_beta_tmp.clone(), self.alpha_tmp.clone(), self.eps_alpha_tmp.clone()]
    }

    pub(crate) fn from_tensors(mut t: Vec<DenseMatrix>) -> Self {
        let eps_alpha_tmp = t.pop().expect("four tensors");
        let alpha_tmp = t.pop().expect("four tensors");
        let eps_beta_tmp = t.pop().expect("four tensors");
        let beta_tmp = t.pop().expect("four tensors");
        Self { beta_tmp, alpha_tmp, eps_beta_tmp, eps_alpha_tmp }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporaryFactors {
    pub task_name: String,
    pub phi: usize,
    pub p: usize,
    pub layers: BTreeMap<String, TemporaryLayer>,
}

impl TemporaryFactors {
    pub fn trainable_params(&self) -> usize {
        self.layers.values().map(|l| self.phi * (l.beta_tmp.rows() + l.alpha_tmp.rows() + 2 * self.p)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi == 0 || self.p == 0 {
            return Err(ShareError::validation("temporary", "phi and p must be ≥ 1"));
        }
        for (id, l) in &self.layers {
            let ok = l.beta_tmp.cols() == self.phi
                && l.alpha_tmp.cols() == self.phi
                && l.eps_beta_tmp.shape() == (self.phi, self.p)
                && l.eps_alpha_tmp.shape() == (self.phi, self.p);
            if !ok {
                return Err(ShareError::consistency(id.clone(), "temporary factor shapes disagree with phi, p"));
            }
            if ![&l.beta_tmp, &l.alpha_tmp, &l.eps_beta_tmp, &l.eps_alpha_tmp].iter().all(|m| m.all_finite()) {
                return Err(ShareError::consistency(id.clone(), "temporary factors have non-finite entries"));
            }
        }
        Ok(())
    }
}

/// Reconstructed low-rank factors of one task in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructedLayer {
    /// n × p
    pub b_hat: DenseMatrix,
    /// p × d
    pub a_hat: DenseMatrix,
}

impl ReconstructedLayer {
    pub fn delta(&self) -> DenseMatrix {
        self.b_hat.dot(&self.a_hat)
    }
}

fn check_pair(layer: &str, f: &LayerFactors, c: &CoefficientPair) -> Result<()> {
    let k = f.beta.cols();
    if c.eps_beta.rows() != k || c.eps_alpha.rows() != k || c.eps_alpha.cols() != c.eps_beta.cols() {
        return Err(ShareError::consistency(
            layer,
            format!(
                "coefficients {}x{} / {}x{} do not fit factors with k={k}",
                c.eps_alpha.rows(),
                c.eps_alpha.cols(),
                c.eps_beta.rows(),
                c.eps_beta.cols()
            ),
        ));
    }
    Ok(())
}

/// Per-layer `b̂ = β·ε_β`, `â = (α·ε_α)ᵀ`. With `with_mean`, the stored
/// centering offsets are added back to every column of `b̂` and row of `â`.
pub fn reconstruct_adapter(
    factors: &ShareFactors,
    coeffs: &TaskCoefficients,
    with_mean: bool,
) -> Result<BTreeMap<String, ReconstructedLayer>> {
    let mut out = BTreeMap::new();
    for (id, f) in &factors.layers {
        let c = coeffs.layers.get(id).ok_or_else(|| {
            ShareError::consistency(id.clone(), format!("task {} has no coefficients", coeffs.task_name))
        })?;
        out.insert(id.clone(), reconstruct_layer(id, f, c, with_mean)?);
    }
    if let Some(extra) = coeffs.layers.keys().find(|id| !factors.layers.contains_key(*id)) {
        return Err(ShareError::consistency(extra.clone(), "layer missing from factors"));
    }
    Ok(out)
}

pub fn reconstruct_layer(
    layer: &str,
    f: &LayerFactors,
    c: &CoefficientPair,
    with_mean: bool,
) -> Result<ReconstructedLayer> {
    check_pair(layer, f, c)?;
    let mut b_hat = f.beta.dot(&c.eps_beta);
    let mut a_hat = f.alpha.dot(&c.eps_alpha).transpose();
    if with_mean {
        let neg_b: Vec<f64> = f.mean_b.iter().map(|v| -v).collect();
        let neg_a: Vec<f64> = f.mean_a.iter().map(|v| -v).collect();
        b_hat = b_hat.sub_col_vector(&neg_b);
        a_hat = a_hat.sub_row_vector(&neg_a);
    }
    Ok(ReconstructedLayer { b_hat, a_hat })
}

/// `(β·ε_β)·((α·ε_α)ᵀ·x)` as four thin matrix-vector products; the n × d
/// delta is never formed.
pub fn forward_delta(
    factors: &ShareFactors,
    coeffs: &TaskCoefficients,
    layer_id: &str,
    x: &[f64],
    with_mean: bool,
) -> Result<Vec<f64>> {
    let f = factors.layer(layer_id)?;
    let c = coeffs.layer(layer_id)?;
    check_pair(layer_id, f, c)?;
    if x.len() != f.d() {
        return Err(ShareError::Shape(format!("input has length {}, layer {layer_id} expects {}", x.len(), f.d())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(ShareError::NonFinite { row: i, col: 0 });
    }
    // z = ε_αᵀ (αᵀ x)  (+ 1·(mean_aᵀ x))
    let mut z = c.eps_alpha.t_mat_vec(&f.alpha.t_mat_vec(x));
    if with_mean {
        let shift: f64 = f.mean_a.iter().zip(x).map(|(m, v)| m * v).sum();
        z.iter_mut().for_each(|v| *v += shift);
    }
    // h = β (ε_β z)  (+ mean_b · Σz)
    let mut h = f.beta.mat_vec(&c.eps_beta.mat_vec(&z));
    if with_mean {
        let total: f64 = z.iter().sum();
        h.iter_mut().zip(&f.mean_b).for_each(|(v, m)| *v += m * total);
    }
    Ok(h)
}

/// Trainable budget per layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableBudget {
    /// A rank-r LoRA pair: `r(n + d)`.
    Lora { r: usize },
    /// Share coefficients: `2kp`.
    Share { k: usize, p: usize },
    /// Temporary factors: `φ(n + d + 2p)`.
    Temporary { phi: usize, p: usize },
}

pub fn trainable_param_count(shapes: &[LayerShape], budget: TrainableBudget) -> Result<usize> {
    match budget {
        TrainableBudget::Lora { r: 0 } => Err(ShareError::Argument("LoRA rank must be ≥ 1".into())),
        TrainableBudget::Share { k, p } if k == 0 || p == 0 => Err(ShareError::Argument("k and p must be ≥ 1".into())),
        TrainableBudget::Temporary { phi, p } if phi == 0 || p == 0 => {
            Err(ShareError::Argument("phi and p must be ≥ 1".into()))
        }
        _ => {
            let mut total = 0usize;
            for s in shapes {
                if s.n == 0 || s.d == 0 {
                    return Err(ShareError::Argument(format!("layer {} has a zero dimension", s.layer_id)));
                }
                total += match budget {
                    TrainableBudget::Lora { r } => r * (s.n + s.d),
                    TrainableBudget::Share { k, p } => 2 * k * p,
                    TrainableBudget::Temporary { phi, p } => phi * (s.n + s.d + 2 * p),
                };
            }
            Ok(total)
        }
    }
}

/// Relative trainable-parameter savings `1 − kp / ((n + d) r)`.
pub fn savings_fraction(n: usize, d: usize, r: usize, k: usize, p: usize) -> Result<f64> {
    if n == 0 || d == 0 || r == 0 || k == 0 || p == 0 {
        return Err(ShareError::Argument("savings_fraction needs positive arguments".into()));
    }
    Ok(1.0 - (k * p) as f64 / ((n + d) * r) as f64)
}
