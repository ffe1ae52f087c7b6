//! Building the shared subspace from a set of adapters.
//!
//! Rank vectors are stacked as rows (Σr × n for the B side, Σr × d for the A
//! side), centered, and the top-k right singular vectors become the factors.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::Serialize;

use crate::adapter::{CoefficientPair, LayerFactors, LoraAdapter, ShareFactors, TaskCoefficients, ORTHONORMAL_TOL};
use crate::error::{Result, ShareError};
use crate::linalg::{center_rows, numerical_rank, svd, DenseMatrix, KPolicy, Projector, SvdResult};
use crate::parallel;
use crate::rng::{derive_seed, gaussian_matrix, seeded};

/// Row-stacked rank vectors of several adapters for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedFactorData {
    pub layer_id: String,
    /// (Σr) × d: the rows of every `A`.
    pub d_a: DenseMatrix,
    /// (Σr) × n: the columns of every `B`, as rows.
    pub d_b: DenseMatrix,
    pub spans: Vec<(String, Range<usize>)>,
}

impl StackedFactorData {
    /// Recover the `(b, a)` pair of one source adapter.
    pub fn unstack(&self, task_name: &str) -> Option<(DenseMatrix, DenseMatrix)> {
        let (_, range) = self.spans.iter().find(|(n, _)| n == task_name)?;
        Some((self.d_b.row_range(range.clone()).transpose(), self.d_a.row_range(range.clone())))
    }
}

pub fn stack_adapters(adapters: &[LoraAdapter], layer_id: &str) -> Result<StackedFactorData> {
    let first =
        adapters.first().ok_or_else(|| ShareError::Argument("stack_adapters needs at least one adapter".into()))?;
    let reference = first.layers.get(layer_id).ok_or_else(|| ShareError::UnknownLayer(layer_id.to_string()))?;
    let (n, d) = (reference.b.rows(), reference.a.cols());
    let mut a_blocks = Vec::with_capacity(adapters.len());
    let mut bt_blocks = Vec::with_capacity(adapters.len());
    let mut spans = Vec::with_capacity(adapters.len());
    let mut offset = 0;
    for adapter in adapters {
        let l = adapter.layers.get(layer_id).ok_or_else(|| {
            ShareError::consistency(layer_id, format!("adapter {} lacks this layer", adapter.task_name))
        })?;
        if l.b.rows() != n || l.a.cols() != d || l.a.rows() != l.b.cols() {
            return Err(ShareError::consistency(
                layer_id,
                format!(
                    "adapter {} has b {}x{}, a {}x{}; expected n={n}, d={d}",
                    adapter.task_name,
                    l.b.rows(),
                    l.b.cols(),
                    l.a.rows(),
                    l.a.cols()
                ),
            ));
        }
        let r = l.a.rows();
        spans.push((adapter.task_name.clone(), offset..offset + r));
        offset += r;
        a_blocks.push(l.a.clone());
        bt_blocks.push(l.b.transpose());
    }
    let d_a = DenseMatrix::vstack(&a_blocks.iter().collect::<Vec<_>>())?;
    let d_b = DenseMatrix::vstack(&bt_blocks.iter().collect::<Vec<_>>())?;
    Ok(StackedFactorData { layer_id: layer_id.to_string(), d_a, d_b, spans })
}

/// Spectra and k bookkeeping from an initialization.
#[derive(Clone, Debug, Default, Serialize)]
pub struct InitReport {
    pub k: usize,
    /// Largest k every layer and side supports.
    pub achievable_k: usize,
    pub spectra_b: BTreeMap<String, Vec<f64>>,
    pub spectra_a: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
}

struct CenteredLayer {
    id: String,
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    svd_a: SvdResult,
    svd_b: SvdResult,
}

fn centered_layer(adapters: &[LoraAdapter], id: &str) -> Result<CenteredLayer> {
    let stack = stack_adapters(adapters, id)?;
    let (ca, mean_a) = center_rows(&stack.d_a)?;
    let (cb, mean_b) = center_rows(&stack.d_b)?;
    Ok(CenteredLayer { id: id.to_string(), mean_a, mean_b, svd_a: svd(&ca)?, svd_b: svd(&cb)? })
}

/// Top-k right singular vectors as an (cols × k) basis.
pub(crate) fn leading_right_vectors(dec: &SvdResult, k: usize) -> DenseMatrix {
    dec.vt.row_range(0..k).transpose()
}

pub fn init_factors(adapters: &[LoraAdapter], policy: KPolicy) -> Result<ShareFactors> {
    init_factors_with_report(adapters, policy).map(|(f, _)| f)
}

/// As [`init_factors`], also returning spectra and any clamping warning.
///
/// A fixed k above the centered-stack rank is an error, except for a single
/// adapter where k is clamped (centering always removes one rank there).
pub fn init_factors_with_report(adapters: &[LoraAdapter], policy: KPolicy) -> Result<(ShareFactors, InitReport)> {
    let first =
        adapters.first().ok_or_else(|| ShareError::Argument("init_factors needs at least one adapter".into()))?;
    let layout = first.layout();
    for adapter in &adapters[1..] {
        adapter.validate_against(&layout)?;
    }
    let ids: Vec<String> = first.layers.keys().cloned().collect();
    let layers = parallel::try_map(&ids, |id| centered_layer(adapters, id))?;

    let achievable =
        layers.iter().map(|l| numerical_rank(&l.svd_a.s).min(numerical_rank(&l.svd_b.s))).min().unwrap_or(0);
    if achievable == 0 {
        return Err(ShareError::Degenerate("centered adapter stack is zero; nothing to span".into()));
    }

    let mut report = InitReport { achievable_k: achievable, ..InitReport::default() };
    let requested = match policy {
        KPolicy::Fixed { .. } => policy.resolve(&[])?,
        KPolicy::Variance { .. } => {
            let mut k = 1;
            for l in &layers {
                k = k.max(policy.resolve(&l.svd_a.s)?).max(policy.resolve(&l.svd_b.s)?);
            }
            k
        }
    };
    let k = if requested <= achievable {
        requested
    } else if adapters.len() == 1 || matches!(policy, KPolicy::Variance { .. }) {
        let msg = format!("k={requested} clamped to the centered stack rank {achievable}");
        log::warn!("{msg}");
        report.warnings.push(msg);
        achievable
    } else {
        return Err(ShareError::Rank { requested, achievable });
    };
    report.k = k;

    let mut out = BTreeMap::new();
    for l in layers {
        report.spectra_a.insert(l.id.clone(), l.svd_a.s.clone());
        report.spectra_b.insert(l.id.clone(), l.svd_b.s.clone());
        out.insert(
            l.id,
            LayerFactors {
                alpha: leading_right_vectors(&l.svd_a, k),
                beta: leading_right_vectors(&l.svd_b, k),
                mean_a: l.mean_a,
                mean_b: l.mean_b,
            },
        );
    }
    let factors = ShareFactors { k, mean_count: adapters.iter().map(|a| a.rank).sum(), layers: out };
    factors.validate(ORTHONORMAL_TOL)?;
    Ok((factors, report))
}

/// Fresh `N(0, σ²)` coefficients. Each layer draws from its own sub-stream,
/// so results do not depend on layer iteration order.
pub fn init_coefficients(
    factors: &ShareFactors,
    task_name: &str,
    p: usize,
    sigma: f64,
    seed: u64,
) -> Result<TaskCoefficients> {
    if p == 0 {
        return Err(ShareError::Argument("pseudo-rank p must be ≥ 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ShareError::Argument(format!("sigma {sigma} must be finite and ≥ 0")));
    }
    let layers = factors
        .layers
        .keys()
        .enumerate()
        .map(|(i, id)| {
            let mut rng = seeded(derive_seed(seed, "coefficients", i as u64));
            let eps_alpha = gaussian_matrix(&mut rng, factors.k, p, sigma);
            let eps_beta = gaussian_matrix(&mut rng, factors.k, p, sigma);
            (id.clone(), CoefficientPair { eps_alpha, eps_beta })
        })
        .collect();
    Ok(TaskCoefficients { task_name: task_name.to_string(), p, layers })
}

/// Frobenius norms of the projection residual and of the centered target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LayerResidual {
    pub residual_b: f64,
    pub residual_a: f64,
    pub norm_b: f64,
    pub norm_a: f64,
}

impl LayerResidual {
    /// `(‖rb‖² + ‖ra‖²) / (‖b‖² + ‖a‖²)`, zero for a zero target.
    pub fn relative_sq(&self) -> f64 {
        let den = self.norm_b.powi(2) + self.norm_a.powi(2);
        if den == 0.0 {
            0.0
        } else {
            (self.residual_b.powi(2) + self.residual_a.powi(2)) / den
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectedAdapter {
    pub coeffs: TaskCoefficients,
    pub residuals: BTreeMap<String, LayerResidual>,
}

/// Least-squares representation of each adapter's centered factors in the
/// shared subspace. Each task's pseudo-rank equals its adapter rank.
pub fn project_known_adapters(factors: &ShareFactors, adapters: &[LoraAdapter]) -> Result<Vec<ProjectedAdapter>> {
    let layout = factors.layout();
    for a in adapters {
        a.validate_against(&layout)?;
    }
    let ids: Vec<&String> = factors.layers.keys().collect();
    let projectors = parallel::try_map(&ids, |id| {
        let f = &factors.layers[*id];
        let pb = Projector::new(&f.beta).map_err(|e| e.in_layer(id))?;
        let pa = Projector::new(&f.alpha).map_err(|e| e.in_layer(id))?;
        Ok::<_, ShareError>((pb, pa))
    })?;
    parallel::try_map(adapters, |adapter| {
        let mut layers = BTreeMap::new();
        let mut residuals = BTreeMap::new();
        for (id, (pb, pa)) in ids.iter().zip(&projectors) {
            let f = &factors.layers[*id];
            let l = &adapter.layers[*id];
            let target_b = l.b.sub_col_vector(&f.mean_b);
            let target_a = l.a.sub_row_vector(&f.mean_a).transpose();
            let eps_beta = pb.apply(&target_b)?;
            let eps_alpha = pa.apply(&target_a)?;
            residuals.insert(
                (*id).clone(),
                LayerResidual {
                    residual_b: f.beta.dot(&eps_beta).sub(&target_b).frobenius_norm(),
                    residual_a: f.alpha.dot(&eps_alpha).sub(&target_a).frobenius_norm(),
                    norm_b: target_b.frobenius_norm(),
                    norm_a: target_a.frobenius_norm(),
                },
            );
            layers.insert((*id).clone(), CoefficientPair { eps_alpha, eps_beta });
        }
        Ok(ProjectedAdapter {
            coeffs: TaskCoefficients { task_name: adapter.task_name.clone(), p: adapter.rank, layers },
            residuals,
        })
    })
}
