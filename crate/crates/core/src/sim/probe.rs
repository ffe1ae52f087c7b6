use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stream::{complement_projector, Split, SyntheticStream, SyntheticTask};
use crate::adapt::{fit_baseline_lora, train_layer, Parameterization, TaskData, TrainConfig};
use crate::error::{Result, ShareError};
use crate::linalg::DenseMatrix;
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub sample_sizes: Vec<usize>,
    /// Leading planted directions used as the frozen basis (0 = all of k*).
    pub k: usize,
    /// Training settings for the restricted fit.
    pub restricted: TrainConfig,
    /// Training settings for the unrestricted full-rank fit.
    pub unrestricted: TrainConfig,
    pub heldout_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![64, 256, 1024, 4096],
            k: 0,
            restricted: TrainConfig {
                learning_rate: 0.2,
                epochs: 300,
                optimizer: crate::adapt::Optimizer::SgdMomentum,
                ..TrainConfig::default()
            },
            unrestricted: TrainConfig {
                learning_rate: 0.05,
                epochs: 800,
                sigma: 0.2,
                optimizer: crate::adapt::Optimizer::SgdMomentum,
                ..TrainConfig::default()
            },
            heldout_samples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Theorem1Curve {
    pub task_name: String,
    pub k: usize,
    pub sample_sizes: Vec<usize>,
    /// `‖D* − E V_kᵀ‖²` of the fit restricted to the frozen basis.
    pub restricted: Vec<f64>,
    /// `‖D* − B A‖²` of a full-rank adapter.
    pub unrestricted: Vec<f64>,
    /// `‖D* V_⊥‖²`, the energy no restricted fit can reach.
    pub tail_mass: f64,
    /// Restricted error in the infinite-sample limit, `‖D* − D* V Vᵀ‖²`.
    pub population_restricted: f64,
}

/// Fit `task` on growing sample sizes, once with the delta restricted to
/// `basis` (per layer, d × k, orthonormal) and once unrestricted, and record
/// the squared distance of each fit to the true delta.
pub fn theorem1_probe(
    stream: &SyntheticStream,
    task: &SyntheticTask,
    basis: &BTreeMap<String, DenseMatrix>,
    cfg: &ProbeConfig,
) -> Result<Theorem1Curve> {
    if cfg.sample_sizes.is_empty() {
        return Err(ShareError::Argument("probe needs at least one sample size".into()));
    }
    let mut tail_mass = 0.0;
    let mut population = 0.0;
    let mut k = 0;
    for (id, tl) in &task.layers {
        let v = basis.get(id).ok_or_else(|| ShareError::UnknownLayer(id.clone()))?;
        k = v.cols();
        tail_mass += tl.w_star.dot(&complement_projector(v)).frobenius_norm_sq();
        population += tl.w_star.sub(&tl.w_star.dot(v).dot_t(v)).frobenius_norm_sq();
    }
    let heldout = task.sample(stream, Split::Heldout, cfg.heldout_samples, 0);
    let points = parallel::try_map(&cfg.sample_sizes, |&s| {
        let train = task.sample(stream, Split::Train, s, s as u64);
        let mut restricted = 0.0;
        for (i, (id, tl)) in task.layers.iter().enumerate() {
            let v = &basis[id];
            let param = Parameterization::RightSubspace { v: v.clone() };
            let init = vec![DenseMatrix::zeros(tl.w_star.rows(), v.cols())];
            let (t, _) = train_layer(&param, init, &train[id], &heldout[id], &cfg.restricted, i as u64)?;
            restricted += tl.w_star.sub(&t[0].dot_t(v)).frobenius_norm_sq();
        }
        let data = TaskData { task_name: task.task_name.clone(), train, heldout: heldout.clone() };
        let r = stream.config.n.min(stream.config.d);
        let (adapter, _) = fit_baseline_lora(&data, r, &cfg.unrestricted)?;
        let unrestricted: f64 =
            task.layers.iter().map(|(id, tl)| tl.w_star.sub(&adapter.layers[id].delta()).frobenius_norm_sq()).sum();
        Ok::<_, crate::ShareError>((restricted, unrestricted))
    })?;
    Ok(Theorem1Curve {
        task_name: task.task_name.clone(),
        k,
        sample_sizes: cfg.sample_sizes.clone(),
        restricted: points.iter().map(|p| p.0).collect(),
        unrestricted: points.iter().map(|p| p.1).collect(),
        tail_mass,
        population_restricted: population,
    })
}

/// The planted right basis of every layer, truncated to `k` columns
/// (0 = all).
pub fn planted_alpha(stream: &SyntheticStream, k: usize) -> BTreeMap<String, DenseMatrix> {
    stream
        .layers
        .iter()
        .map(|(id, l)| {
            let k = if k == 0 { l.v_alpha.cols() } else { k.min(l.v_alpha.cols()) };
            (id.clone(), l.v_alpha.column_range(0..k))
        })
        .collect()
}
