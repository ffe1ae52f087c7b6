//! Evaluation grids, forgetting and backward transfer, storage accounting,
//! CKA trajectories and explained-variance curves. Every report serializes
//! to JSON and to flat `series,t,value` CSV.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{LayerShape, ShareFactors};
use crate::error::{Result, ShareError};
use crate::init::StackedFactorData;
use crate::linalg::{center_rows, explained_variance, linear_cka, select_k_by_variance, svd, DenseMatrix};

/// `scores[t][i]`: metric of task `i` under the state after step `t`; row
/// `t` holds exactly `t + 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalGrid {
    pub metric: String,
    pub higher_is_better: bool,
    pub task_names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn new(metric: impl Into<String>, higher_is_better: bool) -> Self {
        Self { metric: metric.into(), higher_is_better, task_names: Vec::new(), scores: Vec::new() }
    }

    /// Append the row for a newly learned task.
    pub fn push_row(&mut self, task_name: &str, row: Vec<f64>) -> Result<()> {
        if row.len() != self.scores.len() + 1 {
            return Err(ShareError::consistency(
                "grid",
                format!("row {} needs {} entries, got {}", self.scores.len(), self.scores.len() + 1, row.len()),
            ));
        }
        self.task_names.push(task_name.to_string());
        self.scores.push(row);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(ShareError::consistency("grid", "grid is empty"));
        }
        if self.task_names.len() != self.scores.len() {
            return Err(ShareError::consistency("grid", "one task name per row is required"));
        }
        for (t, row) in self.scores.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(ShareError::consistency(
                    "grid",
                    format!("row {t} has {} entries, expected {}", row.len(), t + 1),
                ));
            }
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(ShareError::consistency("grid", format!("cell ({t}, {i}) is undefined")));
            }
        }
        Ok(())
    }

    /// `series,t,value` rows, one series per task.
    pub fn to_csv(&self) -> Result<String> {
        let mut series = Vec::new();
        for (i, name) in self.task_names.iter().enumerate() {
            let pts: Vec<(usize, f64)> = self.scores.iter().enumerate().skip(i).map(|(t, r)| (t, r[i])).collect();
            series.push((name.clone(), pts));
        }
        series_csv(&series)
    }
}

/// Baseline a cell is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgettingMode {
    /// Best earlier score of the task.
    Peak,
    /// Score at the immediately preceding step.
    Prev,
}

impl std::str::FromStr for ForgettingMode {
    type Err = ShareError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak" => Ok(ForgettingMode::Peak),
            "prev" => Ok(ForgettingMode::Prev),
            other => Err(ShareError::Argument(format!("unknown forgetting mode {other:?} (peak|prev)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Transfer {
    pub forgetting: f64,
    pub backward_transfer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForgettingReport {
    pub mode: ForgettingMode,
    /// `cells[t][i]` for `i < t`; the diagonal has no baseline and is zero.
    pub cells: Vec<Vec<Transfer>>,
    pub final_forgetting: Vec<f64>,
    pub final_backward_transfer: Vec<f64>,
    /// Averages over the tasks learned before the final step.
    pub average_forgetting: f64,
    pub average_backward_transfer: f64,
}

/// Forgetting (drop below the baseline) and backward transfer (gain above
/// it), each clipped at zero, with direction taken from the grid's metric.
pub fn forgetting_and_bwt(grid: &EvalGrid, mode: ForgettingMode) -> Result<ForgettingReport> {
    grid.validate()?;
    let sign = if grid.higher_is_better { 1.0 } else { -1.0 };
    let mut cells = Vec::with_capacity(grid.scores.len());
    for (t, row) in grid.scores.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for (i, &v) in row.iter().enumerate() {
            if i == t {
                out.push(Transfer::default());
                continue;
            }
            let base = match mode {
                ForgettingMode::Peak => {
                    let history = (i..t).map(|s| grid.scores[s][i]);
                    if grid.higher_is_better {
                        history.fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        history.fold(f64::INFINITY, f64::min)
                    }
                }
                ForgettingMode::Prev => grid.scores[t - 1][i],
            };
            let delta = sign * (v - base);
            out.push(Transfer { forgetting: (-delta).max(0.0), backward_transfer: delta.max(0.0) });
        }
        cells.push(out);
    }
    let last = cells.last().expect("validated non-empty");
    let final_forgetting: Vec<f64> = last.iter().map(|c| c.forgetting).collect();
    let final_backward_transfer: Vec<f64> = last.iter().map(|c| c.backward_transfer).collect();
    let earlier = last.len().saturating_sub(1);
    let avg = |v: &[f64]| if earlier == 0 { 0.0 } else { v[..earlier].iter().sum::<f64>() / earlier as f64 };
    Ok(ForgettingReport {
        mode,
        average_forgetting: avg(&final_forgetting),
        average_backward_transfer: avg(&final_backward_transfer),
        cells,
        final_forgetting,
        final_backward_transfer,
    })
}

/// Final score of every task divided by its best score over the run
/// (higher-is-better grids only).
pub fn retention(grid: &EvalGrid) -> Result<Vec<f64>> {
    grid.validate()?;
    if !grid.higher_is_better {
        return Err(ShareError::Argument("retention needs a higher-is-better metric".into()));
    }
    let last = grid.scores.last().expect("validated non-empty");
    Ok(last
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let peak = grid.scores.iter().skip(i).map(|r| r[i]).fold(f64::MIN, f64::max);
            if peak > 0.0 {
                v / peak
            } else {
                1.0
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSavings {
    pub layer_id: String,
    pub lora_trainable: usize,
    pub share_trainable: usize,
    pub temporary_trainable: usize,
    pub savings_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SavingsReport {
    pub layers: Vec<LayerSavings>,
    pub num_tasks: usize,
    pub bytes_per_scalar: usize,
    pub lora_trainable: usize,
    pub share_trainable: usize,
    pub temporary_trainable: usize,
    /// `T · Σ r(n + d)`
    pub lora_storage_scalars: usize,
    /// `Σ k(n + d)`
    pub factor_scalars: usize,
    /// `Σ (n + d)`
    pub mean_scalars: usize,
    /// `T · Σ 2kp`
    pub coefficient_scalars: usize,
    pub share_storage_scalars: usize,
    pub lora_bytes: usize,
    pub share_bytes: usize,
    pub coefficient_bytes: usize,
    /// LoRA storage over full Share storage.
    pub storage_ratio: f64,
    /// LoRA storage over coefficient storage alone.
    pub coefficient_storage_ratio: f64,
    /// Per-task trainable LoRA count over Share coefficient count.
    pub trainable_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavingsParams {
    pub r: usize,
    pub k: usize,
    pub p: usize,
    pub phi: usize,
    pub num_tasks: usize,
    pub bytes_per_scalar: usize,
}

/// Exact trainable-parameter and storage counts for T tasks.
pub fn savings(shapes: &[LayerShape], params: SavingsParams) -> Result<SavingsReport> {
    let SavingsParams { r, k, p, phi, num_tasks, bytes_per_scalar } = params;
    if shapes.is_empty() || r == 0 || k == 0 || p == 0 || phi == 0 || num_tasks == 0 || bytes_per_scalar == 0 {
        return Err(ShareError::Argument("savings needs positive arguments and at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for s in shapes {
        if s.n == 0 || s.d == 0 {
            return Err(ShareError::Argument(format!("layer {} has a zero dimension", s.layer_id)));
        }
        layers.push(LayerSavings {
            layer_id: s.layer_id.clone(),
            lora_trainable: r * (s.n + s.d),
            share_trainable: 2 * k * p,
            temporary_trainable: phi * (s.n + s.d + 2 * p),
            savings_fraction: crate::adapter::savings_fraction(s.n, s.d, r, k, p)?,
        });
    }
    let lora_trainable: usize = layers.iter().map(|l| l.lora_trainable).sum();
    let share_trainable: usize = layers.iter().map(|l| l.share_trainable).sum();
    let temporary_trainable: usize = layers.iter().map(|l| l.temporary_trainable).sum();
    let width: usize = shapes.iter().map(|s| s.n + s.d).sum();
    let lora_storage_scalars = num_tasks * lora_trainable;
    let factor_scalars = k * width;
    let mean_scalars = width;
    let coefficient_scalars = num_tasks * share_trainable;
    let share_storage_scalars = factor_scalars + mean_scalars + coefficient_scalars;
    Ok(SavingsReport {
        layers,
        num_tasks,
        bytes_per_scalar,
        lora_trainable,
        share_trainable,
        temporary_trainable,
        lora_storage_scalars,
        factor_scalars,
        mean_scalars,
        coefficient_scalars,
        share_storage_scalars,
        lora_bytes: lora_storage_scalars * bytes_per_scalar,
        share_bytes: share_storage_scalars * bytes_per_scalar,
        coefficient_bytes: coefficient_scalars * bytes_per_scalar,
        storage_ratio: lora_storage_scalars as f64 / share_storage_scalars as f64,
        coefficient_storage_ratio: lora_storage_scalars as f64 / coefficient_scalars as f64,
        trainable_ratio: lora_trainable as f64 / share_trainable as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CkaSeries {
    pub per_layer: BTreeMap<String, Vec<f64>>,
    pub mean: Vec<f64>,
}

impl CkaSeries {
    pub fn to_csv(&self) -> Result<String> {
        let mut series: Vec<(String, Vec<(usize, f64)>)> =
            vec![("mean".into(), self.mean.iter().copied().enumerate().collect())];
        for (id, v) in &self.per_layer {
            series.push((id.clone(), v.iter().copied().enumerate().collect()));
        }
        series_csv(&series)
    }
}

/// `linear_cka(β_t, reference)` per layer for every state, plus the mean
/// over layers.
pub fn cka_trajectory(states: &[ShareFactors], reference: &BTreeMap<String, DenseMatrix>) -> Result<CkaSeries> {
    let mut per_layer: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut mean = Vec::with_capacity(states.len());
    for f in states {
        let mut total = 0.0;
        for (id, l) in &f.layers {
            let r = reference.get(id).ok_or_else(|| ShareError::UnknownLayer(id.clone()))?;
            let c = linear_cka(&l.beta, r)?;
            per_layer.entry(id.clone()).or_default().push(c);
            total += c;
        }
        mean.push(total / f.layers.len().max(1) as f64);
    }
    Ok(CkaSeries { per_layer, mean })
}

pub const VARIANCE_THRESHOLDS: [f64; 4] = [0.6, 0.8, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExplainedVarianceCurve {
    pub layer_id: String,
    /// Cumulative fractions of the centered B-side stack.
    pub b: Vec<f64>,
    /// Cumulative fractions of the centered A-side stack.
    pub a: Vec<f64>,
    /// `(threshold, k_b, k_a)`
    pub k_at: Vec<(f64, usize, usize)>,
}

pub fn explained_variance_curve(stack: &StackedFactorData) -> Result<ExplainedVarianceCurve> {
    let (cb, _) = center_rows(&stack.d_b)?;
    let (ca, _) = center_rows(&stack.d_a)?;
    let sb = svd(&cb)?.s;
    let sa = svd(&ca)?.s;
    let mut k_at = Vec::new();
    for &t in &VARIANCE_THRESHOLDS {
        let kb = select_k_by_variance(&sb, t).unwrap_or(0);
        let ka = select_k_by_variance(&sa, t).unwrap_or(0);
        k_at.push((t, kb, ka));
    }
    Ok(ExplainedVarianceCurve {
        layer_id: stack.layer_id.clone(),
        b: explained_variance(&sb),
        a: explained_variance(&sa),
        k_at,
    })
}

/// Flat `series,t,value` CSV.
pub fn series_csv(series: &[(String, Vec<(usize, f64)>)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| ShareError::Format(format!("csv: {e}"));
    w.write_record(["series", "t", "value"]).map_err(csv_err)?;
    for (name, pts) in series {
        for (t, v) in pts {
            w.write_record([name.as_str(), &t.to_string(), &format!("{v:e}")]).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| ShareError::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| ShareError::Format(format!("csv: {e}")))
}
