//! Synthetic regression streams with a planted shared subspace, the
//! continual pipeline that runs over them, and sample-size probes.

mod pipeline;
mod probe;
mod stream;

pub use pipeline::{
    default_orderings, planted_cka, relative_mse, run_continual, run_fig1_experiment, score, ContinualConfig,
    ContinualRun, DataVault, Fig1Result,
};
pub use probe::{planted_alpha, theorem1_probe, ProbeConfig, Theorem1Curve};
pub use stream::{
    gen_stream, measured_delta_similarity, planted_adapters, Split, StreamConfig, StreamLayer, SyntheticStream,
    SyntheticTask, TaskLayer,
};
