use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{LayerData, TaskData};
use crate::adapter::{LoraAdapter, LoraLayer};
use crate::error::{Result, ShareError};
use crate::linalg::{svd, DenseMatrix};
use crate::parallel;
use crate::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n: usize,
    pub d: usize,
    /// Dimension of the planted shared subspace.
    pub k_star: usize,
    pub num_tasks: usize,
    /// Fraction ρ of every task's energy placed outside the planted subspace.
    pub off_subspace_energy: f64,
    /// Std-dev of additive output noise.
    pub noise: f64,
    pub seed: u64,
    /// Rank of each task's in-subspace component.
    pub task_rank: usize,
    pub num_layers: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n: 32,
            d: 32,
            k_star: 8,
            num_tasks: 6,
            off_subspace_energy: 0.1,
            noise: 0.05,
            seed: 0,
            task_rank: 2,
            num_layers: 1,
            train_samples: 512,
            heldout_samples: 256,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("stream.{f}");
        if self.n == 0 || self.d == 0 {
            return Err(ShareError::validation(field("n"), "n and d must be ≥ 1"));
        }
        if self.k_star == 0 || self.k_star > self.n.min(self.d) {
            return Err(ShareError::validation(field("k_star"), "must lie in 1..=min(n, d)"));
        }
        if self.task_rank == 0 || self.task_rank > self.k_star {
            return Err(ShareError::validation(field("task_rank"), "must lie in 1..=k_star"));
        }
        if !(0.0..=1.0).contains(&self.off_subspace_energy) {
            return Err(ShareError::validation(field("off_subspace_energy"), "must lie in [0, 1]"));
        }
        if self.off_subspace_energy > 0.0 && self.k_star == self.n.min(self.d) {
            return Err(ShareError::validation(
                field("off_subspace_energy"),
                "no room outside the planted subspace when k_star = min(n, d)",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(ShareError::validation(field("noise"), "must be finite and ≥ 0"));
        }
        if self.num_tasks == 0 || self.num_layers == 0 {
            return Err(ShareError::validation(field("num_tasks"), "num_tasks and num_layers must be ≥ 1"));
        }
        if self.train_samples == 0 || self.heldout_samples == 0 {
            return Err(ShareError::validation(field("train_samples"), "sample counts must be ≥ 1"));
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> Vec<String> {
        (0..self.num_layers).map(|l| format!("layer{l}")).collect()
    }
}

/// Ground truth of one task in one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLayer {
    /// Full true delta D* = in-subspace part + off-subspace part.
    pub w_star: DenseMatrix,
    /// The in-subspace part alone.
    pub w_in: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub task_name: String,
    pub index: usize,
    pub layers: BTreeMap<String, TaskLayer>,
    noise: f64,
    seed: u64,
}

/// Frozen base weights and planted bases of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayer {
    pub w0: DenseMatrix,
    /// n × k*
    pub v_beta: DenseMatrix,
    /// d × k*
    pub v_alpha: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticStream {
    pub config: StreamConfig,
    pub layers: BTreeMap<String, StreamLayer>,
    pub tasks: Vec<SyntheticTask>,
}

/// `I − V Vᵀ` for orthonormal `v`.
pub(crate) fn complement_projector(v: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::identity(v.rows()).sub(&v.dot_t(v))
}

fn scale_to_energy(m: &DenseMatrix, energy: f64) -> DenseMatrix {
    let e = m.frobenius_norm_sq();
    if energy == 0.0 || e == 0.0 {
        DenseMatrix::zeros(m.rows(), m.cols())
    } else {
        m.scale((energy / e).sqrt())
    }
}

/// Generate a stream. The planted bases and base weights depend only on
/// `seed` and the shapes, so streams differing only in ρ or noise share them.
pub fn gen_stream(cfg: &StreamConfig) -> Result<SyntheticStream> {
    cfg.validate()?;
    let rho = cfg.off_subspace_energy;
    let mut layers = BTreeMap::new();
    for (l, id) in cfg.layer_ids().into_iter().enumerate() {
        let mut rng = seeded(derive_seed(cfg.seed, "planted", l as u64));
        let v_beta = random_orthonormal(&mut rng, cfg.n, cfg.k_star);
        let v_alpha = random_orthonormal(&mut rng, cfg.d, cfg.k_star);
        let mut rng = seeded(derive_seed(cfg.seed, "base-weight", l as u64));
        let g = gaussian_matrix(&mut rng, cfg.n, cfg.d, 1.0);
        let top = svd(&g)?.s[0];
        layers.insert(id, StreamLayer { w0: g.scale(1.0 / top), v_beta, v_alpha });
    }
    let tasks = (0..cfg.num_tasks)
        .map(|i| {
            let mut task_layers = BTreeMap::new();
            for (l, (id, sl)) in layers.iter().enumerate() {
                let mut rng = seeded(derive_seed(cfg.seed, &format!("task-layer{l}"), i as u64));
                let q1 = random_orthonormal(&mut rng, cfg.k_star, cfg.task_rank);
                let q2 = random_orthonormal(&mut rng, cfg.k_star, cfg.task_rank);
                let s: Vec<f64> = (0..cfg.task_rank).map(|_| rng.random_range(0.5..=1.0)).collect();
                let core = q1.dot(&DenseMatrix::from_diag(&s)).dot_t(&q2);
                let w_in = scale_to_energy(&sl.v_beta.dot(&core).dot_t(&sl.v_alpha), 1.0 - rho);
                let g = gaussian_matrix(&mut rng, cfg.n, cfg.d, 1.0);
                let off = complement_projector(&sl.v_beta).dot(&g).dot(&complement_projector(&sl.v_alpha));
                let off = scale_to_energy(&off, rho);
                task_layers.insert(id.clone(), TaskLayer { w_star: w_in.add(&off), w_in });
            }
            SyntheticTask {
                task_name: format!("task{i}"),
                index: i,
                layers: task_layers,
                noise: cfg.noise,
                seed: derive_seed(cfg.seed, "samples", i as u64),
            }
        })
        .collect();
    Ok(SyntheticStream { config: cfg.clone(), layers, tasks })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl SyntheticTask {
    /// Draw `samples` pairs `y = (W₀ + D*) x + noise` with `x ~ N(0, I)` and
    /// return the regression targets `y − W₀x`. The two splits use disjoint
    /// seed streams; `replica` selects further independent draws.
    pub fn sample(
        &self,
        stream: &SyntheticStream,
        split: Split,
        samples: usize,
        replica: u64,
    ) -> BTreeMap<String, LayerData> {
        let label = match split {
            Split::Train => "train",
            Split::Heldout => "heldout",
        };
        let mut rng = seeded(derive_seed(self.seed, label, replica));
        let d = stream.config.d;
        let x = gaussian_matrix(&mut rng, samples, d, 1.0);
        self.layers
            .iter()
            .map(|(id, tl)| {
                let w0 = &stream.layers[id].w0;
                let noise = gaussian_matrix(&mut rng, samples, w0.rows(), self.noise);
                let y = x.dot_t(&w0.add(&tl.w_star)).add(&noise);
                let target = y.sub(&x.dot_t(w0));
                (id.clone(), LayerData { x: x.clone(), target })
            })
            .collect()
    }

    /// Train and held-out data at the stream's configured sizes.
    pub fn data(&self, stream: &SyntheticStream) -> TaskData {
        TaskData {
            task_name: self.task_name.clone(),
            train: self.sample(stream, Split::Train, stream.config.train_samples, 0),
            heldout: self.sample(stream, Split::Heldout, stream.config.heldout_samples, 0),
        }
    }

    /// Energy of the in- and off-subspace parts, summed over layers.
    pub fn energy_split(&self, stream: &SyntheticStream) -> (f64, f64) {
        let mut inside = 0.0;
        let mut outside = 0.0;
        for (id, tl) in &self.layers {
            let sl = &stream.layers[id];
            let proj = sl.v_beta.dot_t(&sl.v_beta).dot(&tl.w_star).dot(&sl.v_alpha).dot_t(&sl.v_alpha);
            inside += proj.frobenius_norm_sq();
            outside += tl.w_star.sub(&proj).frobenius_norm_sq();
        }
        (inside, outside)
    }
}

/// The best rank-`r` adapter of every task's true delta, split as
/// `B = U√S`, `A = √S Vᵀ`. This is what an ideally trained LoRA converges
/// to, without paying for the training.
pub fn planted_adapters(stream: &SyntheticStream, r: usize) -> Result<Vec<LoraAdapter>> {
    if r == 0 || r > stream.config.n.min(stream.config.d) {
        return Err(ShareError::Argument(format!(
            "adapter rank {r} outside 1..={}",
            stream.config.n.min(stream.config.d)
        )));
    }
    parallel::try_map(&stream.tasks, |task| {
        let mut layers = BTreeMap::new();
        for (id, tl) in &task.layers {
            let dec = svd(&tl.w_star)?;
            let root: Vec<f64> = dec.s[..r].iter().map(|v| v.sqrt()).collect();
            let b = DenseMatrix::from_fn(tl.w_star.rows(), r, |i, j| dec.u.get(i, j) * root[j]);
            let a = DenseMatrix::from_fn(r, tl.w_star.cols(), |i, j| dec.vt.get(i, j) * root[i]);
            layers.insert(id.clone(), LoraLayer { a, b });
        }
        LoraAdapter::new(task.task_name.clone(), layers)
    })
}

/// Mean over task pairs of `‖Q(Dᵢ) − Q(Dⱼ)‖² / (‖Dᵢ‖² + ‖Dⱼ‖²)`, where `Q`
/// strips the planted block. For independent off-subspace parts this
/// estimates ρ.
pub fn measured_delta_similarity(stream: &SyntheticStream) -> f64 {
    let strip = |task: &SyntheticTask| -> Vec<(DenseMatrix, f64)> {
        task.layers
            .iter()
            .map(|(id, tl)| {
                let sl = &stream.layers[id];
                let block = sl.v_beta.dot_t(&sl.v_beta).dot(&tl.w_star).dot(&sl.v_alpha).dot_t(&sl.v_alpha);
                (tl.w_star.sub(&block), tl.w_star.frobenius_norm_sq())
            })
            .collect()
    };
    let stripped: Vec<_> = stream.tasks.iter().map(strip).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..stripped.len() {
        for j in i + 1..stripped.len() {
            let mut num = 0.0;
            let mut den = 0.0;
            for ((qi, ei), (qj, ej)) in stripped[i].iter().zip(&stripped[j]) {
                num += qi.sub(qj).frobenius_norm_sq();
                den += ei + ej;
            }
            if den > 0.0 {
                total += num / den;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;

    #[test]
    fn energy_split_is_exact() {
        for rho in [0.0, 0.1, 0.5, 1.0] {
            let cfg = StreamConfig { off_subspace_energy: rho, num_tasks: 3, ..StreamConfig::default() };
            let s = gen_stream(&cfg).unwrap();
            for t in &s.tasks {
                let (inside, outside) = t.energy_split(&s);
                assert!((inside - (1.0 - rho)).abs() < 1e-10, "{inside}");
                assert!((outside - rho).abs() < 1e-10, "{outside}");
            }
        }
    }

    #[test]
    fn pure_subspace_tasks_have_bounded_rank() {
        let cfg = StreamConfig { off_subspace_energy: 0.0, ..StreamConfig::default() };
        let s = gen_stream(&cfg).unwrap();
        for t in &s.tasks {
            let w = &t.layers["layer0"].w_star;
            assert!(numerical_rank(&svd(w).unwrap().s) <= cfg.task_rank);
        }
    }

    #[test]
    fn streams_are_deterministic_and_share_planted_basis() {
        let a = gen_stream(&StreamConfig::default()).unwrap();
        let b = gen_stream(&StreamConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = gen_stream(&StreamConfig { off_subspace_energy: 0.5, ..StreamConfig::default() }).unwrap();
        assert_eq!(a.layers, c.layers);
    }

    #[test]
    fn splits_differ_and_targets_carry_signal() {
        let s = gen_stream(&StreamConfig { noise: 0.0, ..StreamConfig::default() }).unwrap();
        let t = &s.tasks[0];
        let data = t.data(&s);
        let tr = &data.train["layer0"];
        let ho = &data.heldout["layer0"];
        assert_ne!(tr.x.row(0), ho.x.row(0));
        let expect = tr.x.dot_t(&t.layers["layer0"].w_star);
        assert!(expect.sub(&tr.target).max_abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = StreamConfig { k_star: 40, ..StreamConfig::default() };
        assert!(gen_stream(&bad).is_err());
        let bad = StreamConfig { off_subspace_energy: 1.5, ..StreamConfig::default() };
        assert!(gen_stream(&bad).is_err());
    }
}
