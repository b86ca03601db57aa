//! Checkpoint format.
//!
//! Layout: magic "RFNT", format version u32, a canonical JSON blob (config,
//! step, k, optimizer scalars, RNG state), then a manifest of
//! (name, shape, byte offset) entries followed by the raw little-endian f32
//! buffers. Offsets are relative to the start of the data section and must
//! pack the section tightly in manifest order. All integers little-endian.
//!
//! Loading rebuilds the two networks from the embedded config and then
//! overwrites every parameter and optimizer buffer, so a round trip is
//! bitwise transparent. The parser trusts nothing: every length is checked
//! against the remaining input before use.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{TrainConfig, TrainState};
use crate::backend::{AdamParams, AdamState, Moments, SeededRng, Shape};

pub const MAGIC: [u8; 4] = *b"RFNT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("bad checkpoint metadata: {0}")]
    BadMeta(String),
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint contains unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("tensor `{name}` has shape {got}, model expects {expected}")]
    ShapeMismatch { name: String, expected: Shape, got: Shape },
    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamMeta {
    fn of(state: &AdamState) -> Self {
        let p = state.params();
        Self { t: state.step_count(), lr: p.lr, beta1: p.beta1, beta2: p.beta2, epsilon: p.epsilon }
    }

    fn params(&self) -> AdamParams {
        AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    config: TrainConfig,
    step: u64,
    k_t: f32,
    adam_d: AdamMeta,
    adam_g: AdamMeta,
    rng: [u64; 4],
}

struct ManifestEntry {
    name: String,
    shape: Shape,
    offset: u64,
}

fn moment_names(param: &str) -> (String, String) {
    (format!("{param}.adam_m"), format!("{param}.adam_s"))
}

/// Serialize the full training state.
pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let meta = MetaJson {
        config: state.config.clone(),
        step: state.step,
        k_t: state.k_t,
        adam_d: AdamMeta::of(&state.adam_d),
        adam_g: AdamMeta::of(&state.adam_g),
        rng: state.rng.state(),
    };
    let json = serde_json::to_vec(&meta).expect("config serializes");

    // (name, shape, data) in fixed order: per network, each parameter
    // followed by its Adam moment buffers.
    let mut tensors: Vec<(String, Shape, Vec<f32>)> = Vec::new();
    for (graph, adam) in [
        (&state.discriminator, &state.adam_d),
        (&state.generator, &state.adam_g),
    ] {
        for (param, moments) in graph.params().iter().zip(adam.moments()) {
            let shape = param.tensor.shape();
            let (m_name, s_name) = moment_names(&param.name);
            tensors.push((param.name.clone(), shape, param.tensor.to_vec()));
            tensors.push((m_name, shape, moments.m.clone()));
            tensors.push((s_name, shape, moments.s.clone()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for dim in [shape.batch, shape.channels, shape.height, shape.width] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (data.len() * 4) as u64;
    }
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn rest(self) -> &'a [u8] {
        &self.bytes[self.pos..]
    }
}

/// Parse a checkpoint from raw bytes. Rejects malformed input without
/// panicking or over-allocating; never trusts a declared length it has not
/// checked against the remaining bytes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = cur.u64("json length")?;
    let json_len = usize::try_from(json_len).map_err(|_| CheckpointError::Truncated("json"))?;
    let json = cur.take(json_len, "json")?;
    let meta: MetaJson =
        serde_json::from_slice(json).map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    meta.config
        .validate()
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    if !(0.0..=1.0).contains(&meta.k_t) {
        return Err(CheckpointError::BadMeta(format!("k_t {} out of [0, 1]", meta.k_t)));
    }

    let count = cur.u32("manifest count")?;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        if name_len > MAX_NAME_LEN {
            return Err(CheckpointError::BadManifest(format!(
                "tensor name of {name_len} bytes exceeds the {MAX_NAME_LEN} limit"
            )));
        }
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| CheckpointError::BadManifest("tensor name is not utf-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("shape")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let offset = cur.u64("offset")?;
        manifest.push(ManifestEntry { name, shape, offset });
    }
    let data = cur.rest();

    // Offsets must tile the data section exactly, in order.
    let mut expected_offset = 0u64;
    for entry in &manifest {
        if entry.offset != expected_offset {
            return Err(CheckpointError::BadManifest(format!(
                "tensor `{}` at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel = entry
            .shape
            .batch
            .checked_mul(entry.shape.channels)
            .and_then(|v| v.checked_mul(entry.shape.height))
            .and_then(|v| v.checked_mul(entry.shape.width))
            .ok_or_else(|| {
                CheckpointError::BadManifest(format!("tensor `{}` shape overflows", entry.name))
            })?;
        expected_offset = expected_offset
            .checked_add(numel as u64 * 4)
            .ok_or_else(|| CheckpointError::BadManifest("data section overflows".into()))?;
    }
    if expected_offset != data.len() as u64 {
        return Err(CheckpointError::Truncated("tensor data"));
    }

    // Rebuild the networks from the config, then overwrite everything.
    let mut state = TrainState::new(meta.config.clone())
        .map_err(|e| CheckpointError::BadMeta(e.to_string()))?;
    state.step = meta.step;
    state.k_t = meta.k_t;
    state.rng = SeededRng::from_state(meta.rng);

    let read_f32s = |entry: &ManifestEntry| -> Result<Vec<f32>, CheckpointError> {
        let start = entry.offset as usize;
        let numel = entry.shape.numel();
        let end = start + numel * 4;
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(entry.name.clone()));
        }
        Ok(values)
    };

    let mut by_name: std::collections::HashMap<&str, &ManifestEntry> = Default::default();
    for entry in &manifest {
        if by_name.insert(entry.name.as_str(), entry).is_some() {
            return Err(CheckpointError::BadManifest(format!(
                "duplicate tensor `{}`",
                entry.name
            )));
        }
    }

    let mut consumed = 0usize;
    let mut restore_graph = |graph: &crate::models::ModelGraph,
                             adam_meta: &AdamMeta|
     -> Result<AdamState, CheckpointError> {
        let mut moments = Vec::with_capacity(graph.params().len());
        for param in graph.params() {
            let expected = param.tensor.shape();
            let mut fetch = |name: &str| -> Result<Vec<f32>, CheckpointError> {
                let entry = by_name
                    .get(name)
                    .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
                if entry.shape != expected {
                    return Err(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected,
                        got: entry.shape,
                    });
                }
                consumed += 1;
                read_f32s(entry)
            };
            let values = fetch(&param.name)?;
            let (m_name, s_name) = moment_names(&param.name);
            let m = fetch(&m_name)?;
            let s = fetch(&s_name)?;
            param.tensor.set_data(&values).expect("shape checked");
            moments.push(Moments { m, s });
        }
        Ok(AdamState::restore(adam_meta.params(), adam_meta.t, moments))
    };

    state.adam_d = restore_graph(&state.discriminator, &meta.adam_d)?;
    state.adam_g = restore_graph(&state.generator, &meta.adam_g)?;

    if consumed != manifest.len() {
        let expected: std::collections::HashSet<String> = state
            .discriminator
            .params()
            .iter()
            .chain(state.generator.params())
            .flat_map(|p| {
                let (m, s) = moment_names(&p.name);
                [p.name.clone(), m, s]
            })
            .collect();
        let unknown = manifest
            .iter()
            .find(|e| !expected.contains(&e.name))
            .map(|e| e.name.clone())
            .unwrap_or_else(|| "<unknown>".into());
        return Err(CheckpointError::UnknownTensor(unknown));
    }
    Ok(state)
}

/// Write atomically: stage to a sibling temp file, then rename into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(state);
    let io = |source: std::io::Error| CheckpointError::Io { path: path.into(), source };
    let tmp = staging_path(path);
    std::fs::write(&tmp, &bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    parse_checkpoint(&bytes)
}

pub(crate) fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
