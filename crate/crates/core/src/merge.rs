//! Gradient-free knowledge integration.
//!
//! Every task is reconstructed in the current subspace, the new contribution
//! is appended, the row stack is decomposed, the top-k right singular vectors
//! become the new factors, and every task's coefficients are recalculated by
//! least-squares projection. Layers are processed independently and joined
//! after one global choice of k.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::adapter::{
    CoefficientPair, LayerFactors, LoraAdapter, MergeEvent, ShareFactors, ShareState, TaskCoefficients, TaskSource,
    TemporaryFactors, ORTHONORMAL_TOL,
};
use crate::error::{Result, ShareError};
use crate::init::{init_factors_with_report, leading_right_vectors, project_known_adapters};
use crate::linalg::{numerical_rank, svd, tail_energy, DenseMatrix, KPolicy, Projector, SvdResult};
use crate::parallel;

/// What arrives at a merge.
#[derive(Clone, Debug)]
pub enum MergeInput {
    /// Trained temporary factors from a data task.
    Temporary(TemporaryFactors),
    /// A raw LoRA adapter.
    Adapter(LoraAdapter),
}

impl MergeInput {
    pub fn task_name(&self) -> &str {
        match self {
            MergeInput::Temporary(t) => &t.task_name,
            MergeInput::Adapter(a) => &a.task_name,
        }
    }

    fn source(&self) -> TaskSource {
        match self {
            MergeInput::Temporary(_) => TaskSource::Data,
            MergeInput::Adapter(_) => TaskSource::Adapter,
        }
    }

    fn width(&self) -> usize {
        match self {
            MergeInput::Temporary(t) => t.p,
            MergeInput::Adapter(a) => a.rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeOptions {
    /// `None` keeps the state's configured k (clamped to the stack rank).
    pub k_policy: Option<KPolicy>,
    /// Keep the stored centering means fixed when raw adapters arrive.
    pub freeze_means: bool,
    /// Re-split data-trained `(B̂, Âᵀ)` pairs so both sides carry equal
    /// singular values before stacking. The delta is unchanged.
    pub balance: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { k_policy: None, freeze_means: false, balance: true }
    }
}

/// Frobenius norms of one task's factors before and after a merge.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskResidual {
    pub task_name: String,
    /// Residual of the stacked target against the previous subspace.
    pub pre_b: f64,
    pub pre_a: f64,
    /// Residual against the new subspace.
    pub post_b: f64,
    pub post_a: f64,
    pub norm_b: f64,
    pub norm_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerMergeReport {
    pub spectrum_b: Vec<f64>,
    pub spectrum_a: Vec<f64>,
    /// Energy of the discarded singular directions of each stack.
    pub discarded_b: f64,
    pub discarded_a: f64,
    pub residuals: Vec<TaskResidual>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeReport {
    pub task_name: String,
    pub requested_k: usize,
    pub achievable_k: usize,
    pub k: usize,
    pub warnings: Vec<String>,
    pub layers: BTreeMap<String, LayerMergeReport>,
    /// Wall-clock seconds; left out of serialized reports so they stay
    /// reproducible.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// One stacked target: `b` is n × w, `a` is d × w (i.e. `Âᵀ`).
struct Target {
    b: DenseMatrix,
    a: DenseMatrix,
}

struct LayerStage {
    id: String,
    targets: Vec<Target>,
    svd_b: SvdResult,
    svd_a: SvdResult,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    old_beta: DenseMatrix,
    old_alpha: DenseMatrix,
}

/// Split `p qᵀ` as `p' q'ᵀ` with `p'ᵀp' = q'ᵀq'`.
pub fn balance_pair(p: &DenseMatrix, q: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if p.cols() == 0 || p.rows() < p.cols() || q.rows() < q.cols() {
        return Ok((p.clone(), q.clone()));
    }
    let sp = svd(p)?;
    let sq = svd(q)?;
    // p = Up Rp, q = Uq Rq with Rp = diag(s) Vᵀ.
    let rp = DenseMatrix::from_fn(sp.len(), p.cols(), |i, j| sp.s[i] * sp.vt.get(i, j));
    let rq = DenseMatrix::from_fn(sq.len(), q.cols(), |i, j| sq.s[i] * sq.vt.get(i, j));
    let core = rp.dot_t(&rq);
    if core.max_abs() == 0.0 {
        return Ok((DenseMatrix::zeros(p.rows(), p.cols()), DenseMatrix::zeros(q.rows(), q.cols())));
    }
    let sc = svd(&core)?;
    let root: Vec<f64> = sc.s.iter().map(|v| v.sqrt()).collect();
    let left = DenseMatrix::from_fn(sc.u.rows(), root.len(), |i, j| sc.u.get(i, j) * root[j]);
    let right = DenseMatrix::from_fn(sc.vt.cols(), root.len(), |i, j| sc.vt.get(j, i) * root[j]);
    Ok((sp.u.dot(&left), sq.u.dot(&right)))
}

fn check_layout(state: &ShareState, input: &MergeInput) -> Result<()> {
    let factors = &state.factors;
    let shapes: Vec<(&String, (usize, usize))> = match input {
        MergeInput::Temporary(t) => {
            t.validate()?;
            t.layers.iter().map(|(id, l)| (id, (l.beta_tmp.rows(), l.alpha_tmp.rows()))).collect()
        }
        MergeInput::Adapter(a) => a.layers.iter().map(|(id, l)| (id, (l.b.rows(), l.a.cols()))).collect(),
    };
    if shapes.len() != factors.layers.len() {
        return Err(ShareError::validation(
            format!("merge input {}", input.task_name()),
            format!("has {} layers, state has {}", shapes.len(), factors.layers.len()),
        ));
    }
    for (id, (n, d)) in shapes {
        let f =
            factors.layers.get(id).ok_or_else(|| ShareError::consistency(id.clone(), "layer unknown to the state"))?;
        if (n, d) != (f.n(), f.d()) {
            return Err(ShareError::consistency(
                id.clone(),
                format!("input is {n}x{d}, state layer is {}x{}", f.n(), f.d()),
            ));
        }
    }
    Ok(())
}

fn stage_layer(state: &ShareState, input: &MergeInput, id: &str, opts: &MergeOptions) -> Result<LayerStage> {
    let f = &state.factors.layers[id];
    let mut mean_a = f.mean_a.clone();
    let mut mean_b = f.mean_b.clone();

    let mut new_target = match input {
        MergeInput::Temporary(t) => {
            let (b, a) = t.layers[id].product();
            Target { b, a }
        }
        MergeInput::Adapter(ad) => {
            let l = &ad.layers[id];
            if !opts.freeze_means {
                let prior = state.factors.mean_count as f64;
                let r = ad.rank as f64;
                let sum_b: Vec<f64> = (0..l.b.rows()).map(|i| l.b.row(i).iter().sum()).collect();
                let sum_a: Vec<f64> = (0..l.a.cols()).map(|j| l.a.column(j).iter().sum()).collect();
                for (m, s) in mean_b.iter_mut().zip(&sum_b) {
                    *m = (*m * prior + s) / (prior + r);
                }
                for (m, s) in mean_a.iter_mut().zip(&sum_a) {
                    *m = (*m * prior + s) / (prior + r);
                }
            }
            Target { b: l.b.sub_col_vector(&mean_b), a: l.a.sub_row_vector(&mean_a).transpose() }
        }
    };
    if opts.balance && matches!(input, MergeInput::Temporary(_)) {
        let (b, a) = balance_pair(&new_target.b, &new_target.a)?;
        new_target = Target { b, a };
    }

    // A moving mean shifts the centered representation of every task that
    // reconstructs with means.
    let shift_b: Vec<f64> = mean_b.iter().zip(&f.mean_b).map(|(n, o)| n - o).collect();
    let shift_a: Vec<f64> = mean_a.iter().zip(&f.mean_a).map(|(n, o)| n - o).collect();
    let moved = shift_b.iter().chain(&shift_a).any(|&v| v != 0.0);

    let mut targets = Vec::with_capacity(state.tasks.len() + 1);
    for task in &state.tasks {
        let c = &task.layers[id];
        let mut b = f.beta.dot(&c.eps_beta);
        let mut a = f.alpha.dot(&c.eps_alpha);
        if state.uses_mean(&task.task_name) {
            if moved {
                b = b.sub_col_vector(&shift_b);
                a = a.sub_col_vector(&shift_a);
            }
        } else if opts.balance {
            (b, a) = balance_pair(&b, &a)?;
        }
        targets.push(Target { b, a });
    }
    targets.push(new_target);

    let rows_b: Vec<DenseMatrix> = targets.iter().map(|t| t.b.transpose()).collect();
    let rows_a: Vec<DenseMatrix> = targets.iter().map(|t| t.a.transpose()).collect();
    let d_b = DenseMatrix::vstack(&rows_b.iter().collect::<Vec<_>>())?;
    let d_a = DenseMatrix::vstack(&rows_a.iter().collect::<Vec<_>>())?;
    Ok(LayerStage {
        id: id.to_string(),
        svd_b: svd(&d_b)?,
        svd_a: svd(&d_a)?,
        targets,
        mean_a,
        mean_b,
        old_beta: f.beta.clone(),
        old_alpha: f.alpha.clone(),
    })
}

fn residual_norm(basis: &DenseMatrix, coeffs: &DenseMatrix, target: &DenseMatrix) -> f64 {
    basis.dot(coeffs).sub(target).frobenius_norm()
}

/// Global k from the per-layer spectra, clamped to what every stack supports.
fn choose_k(
    requested_policy: Option<KPolicy>,
    current: usize,
    spectra: &[(&[f64], &[f64])],
    warnings: &mut Vec<String>,
) -> Result<(usize, usize)> {
    let achievable = spectra.iter().map(|(b, a)| numerical_rank(b).min(numerical_rank(a))).min().unwrap_or(0);
    let requested = match requested_policy {
        None => current,
        Some(policy @ KPolicy::Fixed { .. }) => policy.resolve(&[])?,
        Some(policy @ KPolicy::Variance { .. }) => {
            let mut k = 1;
            for (b, a) in spectra {
                if numerical_rank(b) > 0 && numerical_rank(a) > 0 {
                    k = k.max(policy.resolve(b)?).max(policy.resolve(a)?);
                }
            }
            k
        }
    };
    if achievable == 0 {
        return Err(ShareError::Degenerate("merged stack is zero in some layer".into()));
    }
    let k = if requested > achievable {
        let msg = format!("k={requested} clamped to the stack rank {achievable}");
        log::warn!("{msg}");
        warnings.push(msg);
        achievable
    } else {
        requested
    };
    Ok((requested, k))
}

/// Fold `input` into `state`, returning a new state. `state` is untouched.
pub fn merge(state: &ShareState, input: &MergeInput, opts: &MergeOptions) -> Result<(ShareState, MergeReport)> {
    let started = Instant::now();
    let name = input.task_name().to_string();
    state.ensure_new_task_name(&name)?;
    check_layout(state, input)?;

    let ids: Vec<String> = state.factors.layers.keys().cloned().collect();
    let stages = parallel::try_map(&ids, |id| stage_layer(state, input, id, opts).map_err(|e| e.in_layer(id)))?;

    let mut warnings = Vec::new();
    let spectra: Vec<(&[f64], &[f64])> = stages.iter().map(|s| (&s.svd_b.s[..], &s.svd_a.s[..])).collect();
    let (requested_k, k) = choose_k(opts.k_policy, state.hyper.k, &spectra, &mut warnings)?;
    let achievable_k = spectra.iter().map(|(b, a)| numerical_rank(b).min(numerical_rank(a))).min().unwrap_or(0);

    let mut names: Vec<String> = state.tasks.iter().map(|t| t.task_name.clone()).collect();
    names.push(name.clone());
    let widths: Vec<usize> = state.tasks.iter().map(|t| t.p).chain([input.width()]).collect();

    let finished = parallel::try_map(&stages, |stage| {
        let id = &stage.id;
        let beta = leading_right_vectors(&stage.svd_b, k);
        let alpha = leading_right_vectors(&stage.svd_a, k);
        let proj_b = Projector::new(&beta).map_err(|e| e.in_layer(id))?;
        let proj_a = Projector::new(&alpha).map_err(|e| e.in_layer(id))?;
        let old_b = Projector::new(&stage.old_beta).map_err(|e| e.in_layer(id))?;
        let old_a = Projector::new(&stage.old_alpha).map_err(|e| e.in_layer(id))?;
        let mut pairs = Vec::with_capacity(stage.targets.len());
        let mut residuals = Vec::with_capacity(stage.targets.len());
        for (t, task_name) in stage.targets.iter().zip(&names) {
            let eps_beta = proj_b.apply(&t.b)?;
            let eps_alpha = proj_a.apply(&t.a)?;
            residuals.push(TaskResidual {
                task_name: task_name.clone(),
                pre_b: residual_norm(&stage.old_beta, &old_b.apply(&t.b)?, &t.b),
                pre_a: residual_norm(&stage.old_alpha, &old_a.apply(&t.a)?, &t.a),
                post_b: residual_norm(&beta, &eps_beta, &t.b),
                post_a: residual_norm(&alpha, &eps_alpha, &t.a),
                norm_b: t.b.frobenius_norm(),
                norm_a: t.a.frobenius_norm(),
            });
            pairs.push(CoefficientPair { eps_alpha, eps_beta });
        }
        let report = LayerMergeReport {
            spectrum_b: stage.svd_b.s.clone(),
            spectrum_a: stage.svd_a.s.clone(),
            discarded_b: tail_energy(&stage.svd_b.s, k),
            discarded_a: tail_energy(&stage.svd_a.s, k),
            residuals,
        };
        let factors = LayerFactors { alpha, beta, mean_a: stage.mean_a.clone(), mean_b: stage.mean_b.clone() };
        Ok::<_, ShareError>((factors, pairs, report))
    })?;

    let mut layers = BTreeMap::new();
    let mut task_layers: Vec<BTreeMap<String, CoefficientPair>> = vec![BTreeMap::new(); names.len()];
    let mut layer_reports = BTreeMap::new();
    for (stage, (factors, pairs, report)) in stages.iter().zip(finished) {
        layers.insert(stage.id.clone(), factors);
        for (slot, pair) in task_layers.iter_mut().zip(pairs) {
            slot.insert(stage.id.clone(), pair);
        }
        layer_reports.insert(stage.id.clone(), report);
    }
    let tasks: Vec<TaskCoefficients> = names
        .iter()
        .zip(widths)
        .zip(task_layers)
        .map(|((task_name, p), layers)| TaskCoefficients { task_name: task_name.clone(), p, layers })
        .collect();

    let mean_count = match input {
        MergeInput::Adapter(a) if !opts.freeze_means => state.factors.mean_count + a.rank,
        _ => state.factors.mean_count,
    };
    let mut hyper = state.hyper.clone();
    if let Some(KPolicy::Fixed { k: target }) = opts.k_policy {
        hyper.k = target.max(hyper.phi);
    }
    let mut history = state.history.clone();
    history.push(MergeEvent { timestep: state.next_timestep(), task_name: name.clone(), source: input.source() });
    let next = ShareState { factors: ShareFactors { k, mean_count, layers }, tasks, hyper, history };
    next.factors.validate(ORTHONORMAL_TOL)?;
    let report = MergeReport {
        task_name: name,
        requested_k,
        achievable_k,
        k,
        warnings,
        layers: layer_reports,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

/// Per-task, per-layer quality of a compressed adapter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressedTask {
    pub task_name: String,
    /// `(Σ‖B − B̂‖² + ‖A − Â‖²) / (Σ‖B‖² + ‖A‖²)` over layers, means restored.
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompressReport {
    pub k: usize,
    pub achievable_k: usize,
    pub warnings: Vec<String>,
    pub tasks: Vec<CompressedTask>,
    pub mean_relative_error: f64,
    /// Scalars held by the raw adapters.
    pub adapter_scalars: usize,
    /// Scalars held by the state (factors, means and every coefficient set).
    pub state_scalars: usize,
    pub memory_ratio: f64,
    pub spectra_b: BTreeMap<String, Vec<f64>>,
    pub spectra_a: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// Relative factor-level error of `adapter` as reconstructed from `state`
/// (with means restored).
pub fn adapter_relative_error(state: &ShareState, adapter: &LoraAdapter) -> Result<f64> {
    let coeffs = state.task(&adapter.task_name)?;
    let rec = crate::adapter::reconstruct_adapter(&state.factors, coeffs, true)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (id, l) in &adapter.layers {
        let r = rec.get(id).ok_or_else(|| ShareError::consistency(id.clone(), "layer missing from state"))?;
        num += l.b.sub(&r.b_hat).frobenius_norm_sq() + l.a.sub(&r.a_hat).frobenius_norm_sq();
        den += l.b.frobenius_norm_sq() + l.a.frobenius_norm_sq();
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// One-shot batch compression: initialize on every adapter, then project
/// each one into the shared subspace.
pub fn compress_adapters(adapters: &[LoraAdapter], policy: KPolicy, p: usize) -> Result<(ShareState, CompressReport)> {
    let started = Instant::now();
    let (factors, init) = init_factors_with_report(adapters, policy)?;
    let projected = project_known_adapters(&factors, adapters)?;
    let mut seen = std::collections::HashSet::new();
    for a in adapters {
        if !seen.insert(a.task_name.as_str()) {
            return Err(ShareError::TaskCollision {
                name: a.task_name.clone(),
                suggestion: format!("{}-2", a.task_name),
            });
        }
    }
    let k = factors.k;
    let hyper = crate::adapter::Hyper { k, p: p.max(1), phi: (k / 4).max(1), ..crate::adapter::Hyper::default() };
    let state = ShareState {
        factors,
        history: adapters
            .iter()
            .enumerate()
            .map(|(t, a)| MergeEvent { timestep: t, task_name: a.task_name.clone(), source: TaskSource::Adapter })
            .collect(),
        tasks: projected.into_iter().map(|p| p.coeffs).collect(),
        hyper,
    };
    let tasks = adapters
        .iter()
        .map(|a| {
            Ok(CompressedTask { task_name: a.task_name.clone(), relative_error: adapter_relative_error(&state, a)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_relative_error = tasks.iter().map(|t| t.relative_error).sum::<f64>() / tasks.len() as f64;
    let adapter_scalars: usize = adapters.iter().map(LoraAdapter::scalar_count).sum();
    let state_scalars = state.scalar_count();
    let report = CompressReport {
        k,
        achievable_k: init.achievable_k,
        warnings: init.warnings,
        tasks,
        mean_relative_error,
        adapter_scalars,
        state_scalars,
        memory_ratio: adapter_scalars as f64 / state_scalars as f64,
        spectra_b: init.spectra_b,
        spectra_a: init.spectra_a,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequentialVsBatch {
    pub batch_errors: Vec<f64>,
    pub sequential_errors: Vec<f64>,
    /// `|sequential − batch|` per task.
    pub gaps: Vec<f64>,
    /// Summed absolute squared reconstruction error over the tasks seen so
    /// far, after each sequential step (index 0 is the initialization).
    pub sequential_curve: Vec<f64>,
    /// Adapters folded into the sequential initialization.
    pub bootstrap_tasks: usize,
    /// Least-squares slope of `log curve` against `log t` over the part of
    /// the curve above roundoff; `None` with fewer than two such points.
    pub growth_exponent: Option<f64>,
    pub batch_k: usize,
    pub sequential_k: usize,
}

fn absolute_error(state: &ShareState, adapter: &LoraAdapter) -> Result<f64> {
    let den: f64 = adapter.layers.values().map(|l| l.b.frobenius_norm_sq() + l.a.frobenius_norm_sq()).sum();
    Ok(adapter_relative_error(state, adapter)? * den)
}

/// Compare batch compression with adapter-by-adapter merging at a fixed k.
pub fn sequential_vs_batch(adapters: &[LoraAdapter], k: usize) -> Result<SequentialVsBatch> {
    if adapters.len() < 2 {
        return Err(ShareError::Argument("sequential_vs_batch needs at least two adapters".into()));
    }
    let p = adapters[0].rank;
    let (batch, _) = compress_adapters(adapters, KPolicy::fixed(k), p)?;
    let batch_errors = adapters.iter().map(|a| adapter_relative_error(&batch, a)).collect::<Result<Vec<_>>>()?;

    // A lone rank-1 adapter centers to zero, so the sequential route starts
    // from the shortest prefix that spans something.
    let mut bootstrap = 1;
    let mut seq = loop {
        match compress_adapters(&adapters[..bootstrap], KPolicy::fixed(k), p) {
            Ok((s, _)) => break s,
            Err(ShareError::Degenerate(_)) if bootstrap < adapters.len() => bootstrap += 1,
            Err(e) => return Err(e),
        }
    };
    seq.hyper.k = k;
    let opts = MergeOptions { k_policy: Some(KPolicy::fixed(k)), ..MergeOptions::default() };
    let mut curve = vec![adapters[..bootstrap].iter().map(|a| absolute_error(&seq, a)).sum::<Result<f64>>()?];
    for (t, adapter) in adapters.iter().enumerate().skip(bootstrap) {
        seq = merge(&seq, &MergeInput::Adapter(adapter.clone()), &opts)?.0;
        let total = adapters[..=t].iter().map(|a| absolute_error(&seq, a)).sum::<Result<f64>>()?;
        curve.push(total);
    }
    let sequential_errors = adapters.iter().map(|a| adapter_relative_error(&seq, a)).collect::<Result<Vec<_>>>()?;
    let gaps = sequential_errors.iter().zip(&batch_errors).map(|(s, b)| (s - b).abs()).collect();
    Ok(SequentialVsBatch {
        batch_errors,
        sequential_errors,
        gaps,
        growth_exponent: log_log_slope(&curve),
        sequential_curve: curve,
        bootstrap_tasks: bootstrap,
        batch_k: batch.factors.k,
        sequential_k: seq.factors.k,
    })
}

/// Slope of `log y` against `log (i + 1)` over the entries above roundoff,
/// i.e. larger than `1e-12` of the largest entry.
pub fn log_log_slope(y: &[f64]) -> Option<f64> {
    let top = y.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let floor = top * 1e-12;
    let pts: Vec<(f64, f64)> = y
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > floor && v.is_finite())
        .map(|(i, v)| (((i + 1) as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
