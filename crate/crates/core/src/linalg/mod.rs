//! Dense linear-algebra kernels shared by every other module.

mod decomp;
mod matrix;

pub use decomp::{
    center_rows, explained_variance, linear_cka, numerical_rank, project_coefficients, select_k_by_variance, svd,
    tail_energy, truncate, truncation_error_sq, KPolicy, Projector, SvdResult, DEFAULT_VARIANCE_THRESHOLD,
    FULL_RANK_TOL, RANK_RTOL,
};
pub use matrix::DenseMatrix;
