//! Continual shared-subspace adaptation.
//!
//! Many low-rank adapters are compressed into one evolving per-layer
//! principal subspace. New tasks are absorbed with a few temporarily
//! unfrozen directions and then folded back in without gradients (SVD plus
//! least-squares re-projection of every task's coefficients).
//!
//! Numerics run in f64; checkpoints store f32 (see [`io`]).

pub mod adapt;
pub mod adapter;
pub mod analytics;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod merge;
pub mod parallel;
pub mod rng;
pub mod sim;

pub use adapter::{
    forward_delta, reconstruct_adapter, savings_fraction, trainable_param_count, CoefficientPair, Hyper, LayerFactors,
    LayerShape, LoraAdapter, LoraLayer, MergeEvent, ModelLayout, ShareFactors, ShareState, TaskCoefficients,
    TaskSource, TrainableBudget,
};
pub use error::{ErrorCategory, Result, ShareError};
pub use linalg::{DenseMatrix, KPolicy, SvdResult};

/// Default std-dev for freshly sampled coefficients.
pub const DEFAULT_INIT_SIGMA: f64 = 0.02;
