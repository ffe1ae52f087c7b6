//! On-disk formats: SHRX tensor files and the JSON run config.

pub mod config;
pub mod container;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{HyperBlock, PathsBlock, RunConfig, SEED_ENV};
pub use container::{Container, ContainerBuilder, ManifestEntry, Role, Tensor};

use crate::adapter::{
    CoefficientPair, Hyper, LayerFactors, LoraAdapter, LoraLayer, MergeEvent, ShareFactors, ShareState,
    TaskCoefficients, TemporaryFactors, TemporaryLayer, STORED_ORTHONORMAL_TOL,
};
use crate::error::{Result, ShareError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    State,
    Adapter,
    Temporary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMeta {
    task_name: String,
    p: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    kind: FileKind,
    k: usize,
    mean_count: usize,
    hyper: Hyper,
    layers: Vec<String>,
    tasks: Vec<TaskMeta>,
    history: Vec<MergeEvent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    kind: FileKind,
    task_name: String,
    rank: usize,
    layers: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemporaryMeta {
    kind: FileKind,
    task_name: String,
    phi: usize,
    p: usize,
    layers: Vec<String>,
}

#[derive(Deserialize)]
struct KindOnly {
    kind: FileKind,
}

fn meta_as<T: for<'de> Deserialize<'de>>(c: &Container, expected: FileKind) -> Result<T> {
    let kind: KindOnly =
        serde_json::from_value(c.meta.clone()).map_err(|e| ShareError::Format(format!("metadata: {e}")))?;
    if kind.kind != expected {
        return Err(ShareError::Format(format!("file holds a {:?} but a {:?} was expected", kind.kind, expected)));
    }
    serde_json::from_value(c.meta.clone()).map_err(|e| ShareError::Format(format!("metadata: {e}")))
}

/// What kind of object a SHRX file holds.
pub fn file_kind(path: &Path) -> Result<FileKind> {
    let c = container::read(path)?;
    let k: KindOnly = serde_json::from_value(c.meta).map_err(|e| ShareError::Format(format!("metadata: {e}")))?;
    Ok(k.kind)
}

pub fn state_to_bytes(state: &ShareState) -> Result<Vec<u8>> {
    let mut b = ContainerBuilder::new();
    for (id, l) in &state.factors.layers {
        b.push(Role::Alpha, id, None, &l.alpha)?;
        b.push(Role::Beta, id, None, &l.beta)?;
        b.push_vector(Role::MeanA, id, &l.mean_a)?;
        b.push_vector(Role::MeanB, id, &l.mean_b)?;
    }
    for t in &state.tasks {
        for (id, c) in &t.layers {
            b.push(Role::EpsAlpha, id, Some(&t.task_name), &c.eps_alpha)?;
            b.push(Role::EpsBeta, id, Some(&t.task_name), &c.eps_beta)?;
        }
    }
    b.to_bytes(&StateMeta {
        kind: FileKind::State,
        k: state.factors.k,
        mean_count: state.factors.mean_count,
        hyper: state.hyper.clone(),
        layers: state.factors.layers.keys().cloned().collect(),
        tasks: state.tasks.iter().map(|t| TaskMeta { task_name: t.task_name.clone(), p: t.p }).collect(),
        history: state.history.clone(),
    })
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<ShareState> {
    let c = container::parse(bytes)?;
    let meta: StateMeta = meta_as(&c, FileKind::State)?;
    let mut layers = BTreeMap::new();
    for id in &meta.layers {
        layers.insert(
            id.clone(),
            LayerFactors {
                alpha: c.find(Role::Alpha, id, None)?.clone(),
                beta: c.find(Role::Beta, id, None)?.clone(),
                mean_a: c.find_vector(Role::MeanA, id)?,
                mean_b: c.find_vector(Role::MeanB, id)?,
            },
        );
    }
    let mut tasks = Vec::with_capacity(meta.tasks.len());
    for t in &meta.tasks {
        let mut tl = BTreeMap::new();
        for id in &meta.layers {
            tl.insert(
                id.clone(),
                CoefficientPair {
                    eps_alpha: c.find(Role::EpsAlpha, id, Some(&t.task_name))?.clone(),
                    eps_beta: c.find(Role::EpsBeta, id, Some(&t.task_name))?.clone(),
                },
            );
        }
        tasks.push(TaskCoefficients { task_name: t.task_name.clone(), p: t.p, layers: tl });
    }
    let state = ShareState {
        factors: ShareFactors { k: meta.k, mean_count: meta.mean_count, layers },
        tasks,
        hyper: meta.hyper,
        history: meta.history,
    };
    state.validate(STORED_ORTHONORMAL_TOL)?;
    Ok(state)
}

pub fn save_state(path: &Path, state: &ShareState) -> Result<()> {
    container::write_atomic(path, &state_to_bytes(state)?)
}

/// Load and validate a state; stored factors must be orthonormal to
/// single-precision tolerance.
pub fn load_state(path: &Path) -> Result<ShareState> {
    state_from_bytes(&std::fs::read(path)?)
}

pub fn adapter_to_bytes(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let mut b = ContainerBuilder::new();
    for (id, l) in &adapter.layers {
        b.push(Role::LoraA, id, None, &l.a)?;
        b.push(Role::LoraB, id, None, &l.b)?;
    }
    b.to_bytes(&AdapterMeta {
        kind: FileKind::Adapter,
        task_name: adapter.task_name.clone(),
        rank: adapter.rank,
        layers: adapter.layers.keys().cloned().collect(),
    })
}

pub fn adapter_from_bytes(bytes: &[u8]) -> Result<LoraAdapter> {
    let c = container::parse(bytes)?;
    let meta: AdapterMeta = meta_as(&c, FileKind::Adapter)?;
    let mut layers = BTreeMap::new();
    for id in &meta.layers {
        layers.insert(
            id.clone(),
            LoraLayer { a: c.find(Role::LoraA, id, None)?.clone(), b: c.find(Role::LoraB, id, None)?.clone() },
        );
    }
    let adapter = LoraAdapter::new(meta.task_name, layers)?;
    if adapter.rank != meta.rank {
        return Err(ShareError::validation(
            "rank",
            format!("metadata says {} but tensors have rank {}", meta.rank, adapter.rank),
        ));
    }
    Ok(adapter)
}

pub fn export_adapter(path: &Path, adapter: &LoraAdapter) -> Result<()> {
    container::write_atomic(path, &adapter_to_bytes(adapter)?)
}

pub fn import_adapter(path: &Path) -> Result<LoraAdapter> {
    adapter_from_bytes(&std::fs::read(path)?)
}

pub fn temporary_to_bytes(tmp: &TemporaryFactors) -> Result<Vec<u8>> {
    let mut b = ContainerBuilder::new();
    let task = Some(tmp.task_name.as_str());
    for (id, l) in &tmp.layers {
        b.push(Role::Alpha, id, task, &l.alpha_tmp)?;
        b.push(Role::Beta, id, task, &l.beta_tmp)?;
        b.push(Role::EpsAlpha, id, task, &l.eps_alpha_tmp)?;
        b.push(Role::EpsBeta, id, task, &l.eps_beta_tmp)?;
    }
    b.to_bytes(&TemporaryMeta {
        kind: FileKind::Temporary,
        task_name: tmp.task_name.clone(),
        phi: tmp.phi,
        p: tmp.p,
        layers: tmp.layers.keys().cloned().collect(),
    })
}

pub fn temporary_from_bytes(bytes: &[u8]) -> Result<TemporaryFactors> {
    let c = container::parse(bytes)?;
    let meta: TemporaryMeta = meta_as(&c, FileKind::Temporary)?;
    let task = Some(meta.task_name.as_str());
    let mut layers = BTreeMap::new();
    for id in &meta.layers {
        layers.insert(
            id.clone(),
            TemporaryLayer {
                alpha_tmp: c.find(Role::Alpha, id, task)?.clone(),
                beta_tmp: c.find(Role::Beta, id, task)?.clone(),
                eps_alpha_tmp: c.find(Role::EpsAlpha, id, task)?.clone(),
                eps_beta_tmp: c.find(Role::EpsBeta, id, task)?.clone(),
            },
        );
    }
    let tmp = TemporaryFactors { task_name: meta.task_name, phi: meta.phi, p: meta.p, layers };
    tmp.validate()?;
    Ok(tmp)
}

pub fn save_temporary(path: &Path, tmp: &TemporaryFactors) -> Result<()> {
    container::write_atomic(path, &temporary_to_bytes(tmp)?)
}

pub fn load_temporary(path: &Path) -> Result<TemporaryFactors> {
    temporary_from_bytes(&std::fs::read(path)?)
}

/// Wrapping sum of the f32 bit patterns, a cheap per-tensor fingerprint.
pub fn tensor_checksum(t: &Tensor) -> u32 {
    t.data.data().iter().fold(0u32, |acc, &v| acc.wrapping_add((v as f32).to_bits()))
}
