//! The SHRX tensor container.
//!
//! ```text
//! "SHRX" | u32 version | u64 manifest_len | manifest JSON
//!        | u64 meta_len | meta JSON | payload
//! ```
//!
//! Integers are little-endian. The manifest is a JSON array of tensor
//! entries whose offsets are relative to the start of the payload. Tensors
//! are row-major little-endian f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ShareError};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"SHRX";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    LoraA,
    LoraB,
    Alpha,
    Beta,
    EpsAlpha,
    EpsBeta,
    MeanA,
    MeanB,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Role,
    pub layer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_name: Option<String>,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

/// A tensor decoded back to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub entry: ManifestEntry,
    pub data: DenseMatrix,
}

/// Incrementally assembled container.
#[derive(Debug, Default)]
pub struct ContainerBuilder {
    manifest: Vec<ManifestEntry>,
    payload: Vec<u8>,
}

impl ContainerBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, role: Role, layer_id: &str, task_name: Option<&str>, m: &DenseMatrix) -> Result<()> {
        let offset = self.payload.len() as u64;
        for (idx, &v) in m.data().iter().enumerate() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(ShareError::NonFinite { row: idx / m.cols().max(1), col: idx % m.cols().max(1) });
            }
            self.payload.extend_from_slice(&f.to_le_bytes());
        }
        let name = match task_name {
            Some(t) => format!("{t}/{layer_id}/{}", role_label(role)),
            None => format!("{layer_id}/{}", role_label(role)),
        };
        self.manifest.push(ManifestEntry {
            name,
            role,
            layer_id: layer_id.to_string(),
            task_name: task_name.map(str::to_string),
            shape: [m.rows(), m.cols()],
            dtype: "f32".into(),
            offset,
            byte_len: self.payload.len() as u64 - offset,
        });
        Ok(())
    }

    pub fn push_vector(&mut self, role: Role, layer_id: &str, v: &[f64]) -> Result<()> {
        self.push(role, layer_id, None, &DenseMatrix::row_vector(v))
    }

    pub fn to_bytes<M: Serialize>(&self, meta: &M) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let meta = serde_json::to_vec(meta)?;
        let mut out = Vec::with_capacity(24 + manifest.len() + meta.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

fn role_label(role: Role) -> &'static str {
    match role {
        Role::LoraA => "lora_a",
        Role::LoraB => "lora_b",
        Role::Alpha => "alpha",
        Role::Beta => "beta",
        Role::EpsAlpha => "eps_alpha",
        Role::EpsBeta => "eps_beta",
        Role::MeanA => "mean_a",
        Role::MeanB => "mean_b",
    }
}

/// A parsed container: manifest, raw metadata and decoded tensors.
#[derive(Clone, Debug)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn find(&self, role: Role, layer_id: &str, task_name: Option<&str>) -> Result<&DenseMatrix> {
        self.tensors
            .iter()
            .find(|t| t.entry.role == role && t.entry.layer_id == layer_id && t.entry.task_name.as_deref() == task_name)
            .map(|t| &t.data)
            .ok_or_else(|| {
                ShareError::validation(
                    "manifest",
                    format!(
                        "missing {} tensor for layer {layer_id}{}",
                        role_label(role),
                        task_name.map(|t| format!(" of task {t}")).unwrap_or_default()
                    ),
                )
            })
    }

    pub fn find_vector(&self, role: Role, layer_id: &str) -> Result<Vec<f64>> {
        let m = self.find(role, layer_id, None)?;
        if m.rows() != 1 {
            return Err(ShareError::validation(
                format!("{layer_id}/{}", role_label(role)),
                "vectors are stored as a single row",
            ));
        }
        Ok(m.data().to_vec())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: u64, what: &str) -> Result<&'a [u8]> {
        let start = self.pos as u64;
        let end = start.checked_add(len).ok_or_else(|| ShareError::Format(format!("{what} length overflows")))?;
        if end > self.bytes.len() as u64 {
            return Err(ShareError::Corruption {
                detail: format!("truncated {what}"),
                start,
                end,
                available: self.bytes.len() as u64,
            });
        }
        self.pos = end as usize;
        Ok(&self.bytes[start as usize..end as usize])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}

pub fn parse(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ShareError::Format("missing SHRX magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(ShareError::Format(format!("unsupported SHRX version {version} (expected {VERSION})")));
    }
    let manifest_len = cur.u64("manifest length")?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(cur.take(manifest_len, "manifest")?)
        .map_err(|e| ShareError::Format(format!("manifest: {e}")))?;
    let meta_len = cur.u64("metadata length")?;
    let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| ShareError::Format(format!("metadata: {e}")))?;
    let base = cur.pos as u64;
    let payload = &bytes[cur.pos..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
    let mut tensors = Vec::with_capacity(manifest.len());
    for entry in manifest {
        if entry.dtype != "f32" {
            return Err(ShareError::Format(format!(
                "tensor {} has dtype {}, only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        let [rows, cols] = entry.shape;
        let expected = 4u64 * rows as u64 * cols as u64;
        if entry.byte_len != expected {
            return Err(ShareError::Format(format!(
                "tensor {} declares {} bytes, shape {rows}x{cols} needs {expected}",
                entry.name, entry.byte_len
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.byte_len)
            .ok_or_else(|| ShareError::Format(format!("tensor {} offset overflows", entry.name)))?;
        if end > payload.len() as u64 {
            return Err(ShareError::Corruption {
                detail: format!("tensor {} runs past the end of the file", entry.name),
                start: base + entry.offset,
                end: base + end,
                available: bytes.len() as u64,
            });
        }
        let raw = &payload[entry.offset as usize..end as usize];
        let data: Vec<f64> =
            raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes")))).collect();
        let data = DenseMatrix::new(rows, cols, data)
            .map_err(|e| ShareError::validation(entry.name.clone(), e.to_string()))?;
        spans.push((entry.offset, end, ""));
        tensors.push(Tensor { entry, data });
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ShareError::Format(format!(
                "tensor payloads overlap at offsets {}..{} and {}..{}",
                w[0].0, w[0].1, w[1].0, w[1].1
            )));
        }
    }
    Ok(Container { meta, tensors })
}

pub fn read(path: &Path) -> Result<Container> {
    parse(&fs::read(path)?)
}

/// Write via a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir()?,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| ShareError::Argument(format!("{} is not a file path", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut b = ContainerBuilder::new();
        b.push(Role::Alpha, "l0", None, &DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap()).unwrap();
        b.push_vector(Role::MeanA, "l0", &[0.25, -1.0]).unwrap();
        b.to_bytes(&serde_json::json!({"kind": "test"})).unwrap()
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let c = parse(&bytes).unwrap();
        assert_eq!(c.tensors.len(), 2);
        assert_eq!(c.find(Role::Alpha, "l0", None).unwrap().get(1, 1), 4.5);
        assert_eq!(c.find_vector(Role::MeanA, "l0").unwrap(), vec![0.25, -1.0]);
        assert_eq!(c.meta["kind"], "test");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample();
        bytes[0] = b'X';
        assert!(matches!(parse(&bytes), Err(ShareError::Format(_))));
        let mut bytes = sample();
        bytes[4] = 2;
        assert!(matches!(parse(&bytes), Err(ShareError::Format(_))));
    }

    #[test]
    fn truncation_reports_offsets() {
        let bytes = sample();
        let cut = &bytes[..bytes.len() - 3];
        match parse(cut) {
            Err(ShareError::Corruption { end, available, .. }) => {
                assert_eq!(available, cut.len() as u64);
                assert!(end > available);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse(&bytes[..10]), Err(ShareError::Corruption { .. })));
    }

    #[test]
    fn non_finite_after_narrowing_is_rejected() {
        let mut b = ContainerBuilder::new();
        let huge = DenseMatrix::from_rows(&[vec![1e300]]).unwrap();
        assert!(b.push(Role::Beta, "l", None, &huge).is_err());
    }
}
