use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::stream::{gen_stream, Split, StreamConfig, SyntheticStream};
use crate::adapt::{
    fit_baseline_lora, spawn_temporary, train_coefficients_only, train_temporary, LayerData, TaskData, TrainConfig,
};
use crate::adapter::{reconstruct_adapter, Hyper, MergeEvent, ShareFactors, ShareState, TaskSource};
use crate::analytics::EvalGrid;
use crate::error::{Result, ShareError};
use crate::init::{init_coefficients, init_factors};
use crate::linalg::{linear_cka, DenseMatrix, KPolicy};
use crate::merge::{merge, MergeInput, MergeOptions, MergeReport};
use crate::parallel;
use crate::rng::{derive_seed, seeded};

/// Init scale used by the simulations. Much smaller values start the
/// factored fits too close to the saddle at zero for the epoch budget.
const SIM_SIGMA: f64 = 0.2;

/// Settings for one continual run over a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualConfig {
    pub hyper: Hyper,
    /// Rank of the bootstrap adapter fitted on the first task.
    pub lora_rank: usize,
    pub train: TrainConfig,
    pub merge: MergeOptions,
    /// Refuse any access to a past task's training data.
    pub strict_cl: bool,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            hyper: Hyper { k: 8, p: 2, phi: 2, init_sigma: SIM_SIGMA, ..Hyper::default() },
            lora_rank: 9,
            train: TrainConfig { learning_rate: 0.3, epochs: 800, sigma: SIM_SIGMA, ..TrainConfig::default() },
            merge: MergeOptions::default(),
            strict_cl: true,
        }
    }
}

/// Hands out task data in stream order. Under strict continual learning a
/// task's training split can only be opened while it is the current task.
pub struct DataVault<'a> {
    stream: &'a SyntheticStream,
    order: Vec<usize>,
    strict: bool,
    frontier: Option<usize>,
}

impl<'a> DataVault<'a> {
    pub fn new(stream: &'a SyntheticStream, order: Vec<usize>, strict: bool) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..stream.tasks.len()).collect::<Vec<_>>() {
            return Err(ShareError::Argument(format!(
                "ordering {order:?} is not a permutation of 0..{}",
                stream.tasks.len()
            )));
        }
        Ok(Self { stream, order, strict, frontier: None })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn task_name(&self, step: usize) -> &str {
        &self.stream.tasks[self.order[step]].task_name
    }

    /// Training and held-out data of the task at `step`.
    pub fn train_data(&mut self, step: usize) -> Result<TaskData> {
        if step >= self.order.len() {
            return Err(ShareError::UnknownTask(format!("step {step}")));
        }
        if self.strict {
            if let Some(f) = self.frontier {
                if step < f {
                    return Err(ShareError::Policy(format!(
                        "training data of past task {} requested at step {f}",
                        self.task_name(step)
                    )));
                }
            }
        }
        self.frontier = Some(self.frontier.map_or(step, |f| f.max(step)));
        Ok(self.stream.tasks[self.order[step]].data(self.stream))
    }

    /// Held-out split, used only for scoring.
    pub fn heldout(&self, step: usize) -> BTreeMap<String, LayerData> {
        let task = &self.stream.tasks[self.order[step]];
        task.sample(self.stream, Split::Heldout, self.stream.config.heldout_samples, 0)
    }
}

/// Held-out relative MSE `Σ‖Δx − t‖² / Σ‖t‖²` of one task under `state`.
pub fn relative_mse(state: &ShareState, task_name: &str, data: &BTreeMap<String, LayerData>) -> Result<f64> {
    let coeffs = state.task(task_name)?;
    let rec = reconstruct_adapter(&state.factors, coeffs, state.uses_mean(task_name))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (id, l) in data {
        let r = rec.get(id).ok_or_else(|| ShareError::UnknownLayer(id.clone()))?;
        let pred = l.x.dot(&r.a_hat.transpose()).dot_t(&r.b_hat);
        num += pred.sub(&l.target).frobenius_norm_sq();
        den += l.target.frobenius_norm_sq();
    }
    Ok(if den == 0.0 { num } else { num / den })
}

/// `1 / (1 + relative MSE)`, higher is better.
pub fn score(rel_mse: f64) -> f64 {
    1.0 / (1.0 + rel_mse)
}

/// Mean over layers of `linear_cka(β, planted β)`.
pub fn planted_cka(stream: &SyntheticStream, factors: &ShareFactors) -> Result<f64> {
    let mut total = 0.0;
    for (id, f) in &factors.layers {
        let sl = stream.layers.get(id).ok_or_else(|| ShareError::UnknownLayer(id.clone()))?;
        total += linear_cka(&f.beta, &sl.v_beta)?;
    }
    Ok(total / factors.layers.len().max(1) as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct ContinualRun {
    pub order: Vec<usize>,
    pub grid: EvalGrid,
    /// CKA of the β factors against the planted basis after every step.
    pub cka: Vec<f64>,
    pub k_trajectory: Vec<usize>,
    pub merge_reports: Vec<MergeReport>,
    #[serde(skip)]
    pub factor_history: Vec<ShareFactors>,
    #[serde(skip)]
    pub final_state: Option<ShareState>,
}

fn step_train(cfg: &TrainConfig, label: &str, step: usize) -> TrainConfig {
    TrainConfig { seed: derive_seed(cfg.seed, label, step as u64), ..cfg.clone() }
}

/// Bootstrap from the first task, then adapt and merge every later task.
pub fn run_continual(stream: &SyntheticStream, order: &[usize], cfg: &ContinualConfig) -> Result<ContinualRun> {
    cfg.hyper.validate()?;
    let mut vault = DataVault::new(stream, order.to_vec(), cfg.strict_cl)?;
    let mut grid = EvalGrid::new("score", true);
    let mut cka = Vec::with_capacity(vault.len());
    let mut k_trajectory = Vec::with_capacity(vault.len());
    let mut factor_history = Vec::with_capacity(vault.len());
    let mut merge_reports = Vec::new();

    let first = vault.train_data(0)?;
    let name0 = first.task_name.clone();
    let (boot, _) = fit_baseline_lora(&first, cfg.lora_rank, &step_train(&cfg.train, "bootstrap", 0))?;
    let factors = init_factors(&[boot], KPolicy::fixed(cfg.hyper.k))?;
    let coeffs = init_coefficients(
        &factors,
        &name0,
        cfg.hyper.p,
        cfg.hyper.init_sigma,
        derive_seed(cfg.train.seed, "coefficients", 0),
    )?;
    let mut state = ShareState {
        factors,
        tasks: vec![coeffs],
        hyper: cfg.hyper.clone(),
        history: vec![MergeEvent { timestep: 0, task_name: name0.clone(), source: TaskSource::Data }],
    };
    let (trained, _) =
        train_coefficients_only(&state, &name0, None, &first, &step_train(&cfg.train, "coefficients", 0))?;
    state.tasks[0] = trained;
    drop(first);

    for step in 0..vault.len() {
        if step > 0 {
            let data = vault.train_data(step)?;
            let tmp = spawn_temporary(
                &state,
                &data.task_name,
                cfg.hyper.phi.min(state.factors.k),
                cfg.hyper.init_sigma,
                derive_seed(cfg.train.seed, "temporary", step as u64),
            )?;
            let (trained, _) = train_temporary(&tmp, &data, &step_train(&cfg.train, "adapt", step))?;
            let (next, report) = merge(&state, &MergeInput::Temporary(trained), &cfg.merge)?;
            state = next;
            merge_reports.push(report);
        }
        let row = (0..=step)
            .map(|i| relative_mse(&state, vault.task_name(i), &vault.heldout(i)).map(score))
            .collect::<Result<Vec<_>>>()?;
        grid.push_row(vault.task_name(step), row)?;
        cka.push(planted_cka(stream, &state.factors)?);
        k_trajectory.push(state.factors.k);
        factor_history.push(state.factors.clone());
    }
    Ok(ContinualRun {
        order: order.to_vec(),
        grid,
        cka,
        k_trajectory,
        merge_reports,
        factor_history,
        final_state: Some(state),
    })
}

/// Identity, reversed, and one seeded shuffle of `0..num_tasks`.
pub fn default_orderings(num_tasks: usize, seed: u64) -> Vec<Vec<usize>> {
    let identity: Vec<usize> = (0..num_tasks).collect();
    let reversed: Vec<usize> = identity.iter().rev().copied().collect();
    let mut shuffled = identity.clone();
    shuffled.shuffle(&mut seeded(derive_seed(seed, "ordering", 0)));
    vec![identity, reversed, shuffled]
}

#[derive(Clone, Debug, Serialize)]
pub struct Fig1Result {
    pub runs: Vec<ContinualRun>,
    /// `trajectories[o][t]`: planted-basis CKA of ordering `o` after step `t`.
    pub trajectories: Vec<Vec<f64>>,
    /// CKA between the final β factors of every pair of orderings.
    pub cross_cka: Vec<f64>,
    /// Largest pairwise `‖ββᵀ − β'β'ᵀ‖_F` between final factors, over layers.
    pub projector_spread: f64,
}

/// Run the same stream under several task orderings.
pub fn run_fig1_experiment(
    stream_cfg: &StreamConfig,
    cfg: &ContinualConfig,
    orderings: &[Vec<usize>],
) -> Result<Fig1Result> {
    let stream = gen_stream(stream_cfg)?;
    let runs = parallel::try_map(orderings, |order| run_continual(&stream, order, cfg))?;
    let finals: Vec<&ShareFactors> = runs.iter().map(|r| r.factor_history.last().expect("at least one step")).collect();
    let mut cross_cka = Vec::new();
    let mut spread = 0.0_f64;
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let mut c = 0.0;
            for (id, fi) in &finals[i].layers {
                let fj = &finals[j].layers[id];
                c += linear_cka(&fi.beta, &fj.beta)?;
                let pi: DenseMatrix = fi.beta.dot_t(&fi.beta);
                let pj = fj.beta.dot_t(&fj.beta);
                spread = spread.max(pi.sub(&pj).frobenius_norm());
            }
            cross_cka.push(c / finals[i].layers.len() as f64);
        }
    }
    Ok(Fig1Result {
        trajectories: runs.iter().map(|r| r.cka.clone()).collect(),
        runs,
        cross_cka,
        projector_spread: spread,
    })
}
