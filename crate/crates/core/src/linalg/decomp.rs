use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Result, ShareError, UNNAMED_LAYER};

/// Smallest admissible singular value of a basis before projection refuses it.
pub const FULL_RANK_TOL: f64 = 1e-10;

/// Relative cut-off (against the largest singular value) for numerical rank.
pub const RANK_RTOL: f64 = 1e-10;

/// Default explained-variance threshold for choosing k.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.60;

/// Thin SVD `m = u · diag(s) · vt` with `s` sorted descending.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// `u · diag(s) · vt`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = DenseMatrix::from_fn(self.u.rows(), self.s.len(), |i, j| self.u.get(i, j) * self.s[j]);
        scaled.dot(&self.vt)
    }

    /// Right singular vectors as columns (n × q).
    pub fn v(&self) -> DenseMatrix {
        self.vt.transpose()
    }

    /// Number of singular values above `RANK_RTOL · s[0]`.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(&self.s)
    }
}

pub fn numerical_rank(s: &[f64]) -> usize {
    let top = s.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > RANK_RTOL * top).count()
}

const ENERGY_RTOL: f64 = 1e-9;

/// Thin SVD with a deterministic sign convention: the largest-magnitude
/// entry of every left singular vector is positive.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(ShareError::Argument(format!("svd of an empty {}x{} matrix", m.rows(), m.cols())));
    }
    if !m.all_finite() {
        let idx = m.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
        return Err(ShareError::NonFinite { row: idx / m.cols(), col: idx % m.cols() });
    }
    let (rows, cols) = m.shape();
    let q = rows.min(cols);
    let input = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m.get(i, j));
    let dec = input.thin_svd().map_err(|_| ShareError::NumericFailure { rows, cols })?;
    let (u, v) = (dec.U(), dec.V());
    let raw_s: Vec<f64> = (0..q).map(|i| dec.S().column_vector()[i]).collect();
    let energy: f64 = raw_s.iter().map(|v| v * v).sum();
    let fro = m.frobenius_norm_sq();
    if !energy.is_finite() || (energy - fro).abs() > ENERGY_RTOL * fro.max(f64::MIN_POSITIVE) {
        return Err(ShareError::NumericFailure { rows, cols });
    }

    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| raw_s[b].total_cmp(&raw_s[a]).then(a.cmp(&b)));

    let mut u_out = DenseMatrix::zeros(rows, q);
    let mut vt_out = DenseMatrix::zeros(q, cols);
    let mut s_out = Vec::with_capacity(q);
    for (dst, &src) in order.iter().enumerate() {
        let col: Vec<f64> = (0..rows).map(|i| u[(i, src)]).collect();
        let pivot = col.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in col.iter().enumerate() {
            u_out.set(i, dst, sign * x);
        }
        for j in 0..cols {
            vt_out.set(dst, j, sign * v[(j, src)]);
        }
        s_out.push(raw_s[src].max(0.0));
    }
    if !(u_out.all_finite() && vt_out.all_finite() && s_out.iter().all(|v| v.is_finite())) {
        return Err(ShareError::NumericFailure { rows, cols });
    }
    Ok(SvdResult { u: u_out, s: s_out, vt: vt_out })
}

/// Best rank-k approximation `Σ_{i<k} s_i u_i v_iᵀ`.
pub fn truncate(svd: &SvdResult, k: usize) -> Result<DenseMatrix> {
    if k == 0 || k > svd.len() {
        return Err(ShareError::Argument(format!("truncation rank {k} outside 1..={}", svd.len())));
    }
    let scaled = DenseMatrix::from_fn(svd.u.rows(), k, |i, j| svd.u.get(i, j) * svd.s[j]);
    Ok(scaled.dot(&svd.vt.row_range(0..k)))
}

/// Squared Frobenius error of the best rank-k approximation: `Σ_{i>k} s_i²`.
pub fn truncation_error_sq(m: &DenseMatrix, k: usize) -> Result<f64> {
    let dec = svd(m)?;
    Ok(tail_energy(&dec.s, k))
}

/// `Σ_{i≥k} s_i²` (zero-based), i.e. the energy discarded by keeping `k` values.
pub fn tail_energy(s: &[f64], k: usize) -> f64 {
    s.iter().skip(k).map(|v| v * v).sum()
}

/// Subtract the column-wise mean over rows. Returns `(centered, mean)`.
pub fn center_rows(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    if m.rows() == 0 {
        return Err(ShareError::Argument("center_rows needs at least one row".into()));
    }
    let mean = m.column_means();
    Ok((m.sub_row_vector(&mean), mean))
}

/// Least-squares coefficient solver against a fixed basis.
///
/// Holds the Moore–Penrose pseudoinverse `(βᵀβ)⁻¹βᵀ`, formed from the SVD of
/// the basis so that repeated projections against one basis are cheap.
#[derive(Clone, Debug)]
pub struct Projector {
    pinv: DenseMatrix,
    smallest: f64,
}

impl Projector {
    pub fn new(basis: &DenseMatrix) -> Result<Self> {
        let (n, k) = basis.shape();
        if k == 0 || n < k {
            return Err(ShareError::IllConditioned { layer: UNNAMED_LAYER.into(), smallest: 0.0 });
        }
        let dec = svd(basis)?;
        let smallest = *dec.s.last().unwrap_or(&0.0);
        if smallest <= FULL_RANK_TOL {
            return Err(ShareError::IllConditioned { layer: UNNAMED_LAYER.into(), smallest });
        }
        // pinv = V Σ⁻¹ Uᵀ  (k × n)
        let v_scaled = DenseMatrix::from_fn(k, k, |i, j| dec.vt.get(j, i) / dec.s[j]);
        let pinv = v_scaled.dot_t(&dec.u);
        Ok(Self { pinv, smallest })
    }

    pub fn smallest_singular_value(&self) -> f64 {
        self.smallest
    }

    pub fn apply(&self, target: &DenseMatrix) -> Result<DenseMatrix> {
        if target.rows() != self.pinv.cols() {
            return Err(ShareError::Shape(format!(
                "target has {} rows, basis has {}",
                target.rows(),
                self.pinv.cols()
            )));
        }
        Ok(self.pinv.dot(target))
    }
}

/// Coefficients ε minimising `‖basis · ε − target‖_F`.
pub fn project_coefficients(basis: &DenseMatrix, target: &DenseMatrix) -> Result<DenseMatrix> {
    if basis.rows() != target.rows() {
        return Err(ShareError::Shape(format!(
            "basis is {}x{}, target is {}x{}",
            basis.rows(),
            basis.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Projector::new(basis)?.apply(target)
}

/// Linear CKA between the column-centered versions of `x` and `y`:
/// `‖yᵀx‖² / (‖xᵀx‖ · ‖yᵀy‖)`.
pub fn linear_cka(x: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(ShareError::Shape(format!("linear_cka needs equal row counts, got {} and {}", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(ShareError::Argument("linear_cka needs at least two rows".into()));
    }
    let xc = x.sub_row_vector(&x.column_means());
    let yc = y.sub_row_vector(&y.column_means());
    let xx = xc.t_dot(&xc).frobenius_norm();
    let yy = yc.t_dot(&yc).frobenius_norm();
    if xx == 0.0 || yy == 0.0 {
        return Err(ShareError::Degenerate("linear_cka input is constant after centering".into()));
    }
    let yx = yc.t_dot(&xc).frobenius_norm_sq();
    Ok(yx / (xx * yy))
}

/// Cumulative explained-variance fractions `Σ_{i≤k} s_i² / Σ s_i²`.
pub fn explained_variance(s: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let cumulative: Vec<f64> = s
        .iter()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    let total = acc;
    if total == 0.0 {
        return vec![0.0; s.len()];
    }
    cumulative.into_iter().map(|c| c / total).collect()
}

/// Smallest k whose cumulative explained variance reaches `threshold`.
pub fn select_k_by_variance(s: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ShareError::Argument(format!("variance threshold {threshold} outside (0, 1]")));
    }
    if s.is_empty() {
        return Err(ShareError::Argument("empty singular value list".into()));
    }
    let mut cumulative = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    for v in s {
        acc += v * v;
        cumulative.push(acc);
    }
    let total = acc;
    if total == 0.0 {
        return Err(ShareError::Degenerate("all singular values are zero".into()));
    }
    let k = cumulative.iter().position(|&c| c >= threshold * total).map_or(s.len(), |i| i + 1);
    Ok(k)
}

/// How k is chosen when building or updating factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KPolicy {
    /// Exactly this many directions (subject to rank clamping where allowed).
    Fixed { k: usize },
    /// Smallest k reaching the explained-variance threshold, optionally capped.
    Variance { threshold: f64, cap: Option<usize> },
}

impl KPolicy {
    pub fn fixed(k: usize) -> Self {
        KPolicy::Fixed { k }
    }

    pub fn variance(threshold: f64) -> Self {
        KPolicy::Variance { threshold, cap: None }
    }

    /// Resolve against a spectrum. Does not clamp to rank.
    pub fn resolve(&self, s: &[f64]) -> Result<usize> {
        match *self {
            KPolicy::Fixed { k } => {
                if k == 0 {
                    return Err(ShareError::Argument("k must be at least 1".into()));
                }
                Ok(k)
            }
            KPolicy::Variance { threshold, cap } => {
                let k = select_k_by_variance(s, threshold)?;
                Ok(cap.map_or(k, |c| k.min(c.max(1))))
            }
        }
    }

    /// Parse `fixed:32`, `var:0.6`, `var:0.6:64` or a bare integer.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || ShareError::Argument(format!("cannot parse k policy {text:?}"));
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            [k] => Ok(KPolicy::fixed(k.parse().map_err(|_| bad())?)),
            ["fixed", k] => Ok(KPolicy::fixed(k.parse().map_err(|_| bad())?)),
            ["var", t] => Ok(KPolicy::variance(t.parse().map_err(|_| bad())?)),
            ["var", t, cap] => Ok(KPolicy::Variance {
                threshold: t.parse().map_err(|_| bad())?,
                cap: Some(cap.parse().map_err(|_| bad())?),
            }),
            _ => Err(bad()),
        }
    }
}
