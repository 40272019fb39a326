//! On-disk formats: RTDF region features, RTDC checkpoints, vocabulary
//! files and JSON-lines manifests. All binary fields are little-endian.
//!
//! RTDF layout: `"RTDF"`, then u32 version, N, n1, n2, D (a 24-byte
//! header), then the global vector (D f32) and N grids of n1·n2·D f32 in
//! row, column, channel order.
//!
//! RTDC layout: `"RTDC"`, u32 version, u32 tensor count; per tensor a u16
//! name length, the UTF-8 name, a u8 rank, rank u32 dims and the f64 data;
//! finally the CRC32 of every preceding byte.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::RegionGrid;
use crate::autodiff::Tensor;
use crate::dataset::{Dataset, DatasetError};
use crate::decoder::{DecoderParams, ModelConfig};
use crate::features::{FeatureError, FeatureRecord};
use crate::vocab::{VocabError, Vocabulary};

pub const RTDF_MAGIC: &[u8; 4] = b"RTDF";
pub const RTDF_VERSION: u32 = 1;
pub const RTDF_HEADER_BYTES: usize = 24;
pub const RTDC_MAGIC: &[u8; 4] = b"RTDC";
pub const RTDC_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { expected: u32, found: u32 },
    #[error("truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("header has a zero or oversized dimension: N={n} n1={n1} n2={n2} D={d}")]
    Header { n: u32, n1: u32, n2: u32, d: u32 },
    #[error("non-finite value at {what}")]
    NonFinite { what: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("tensor name is not UTF-8")]
    BadName,
    #[error("tensor {0:?} appears twice")]
    DuplicateTensor(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, model expects {expected:?}")]
    ShapeConflict {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("vocabulary: {0}")]
    Vocab(#[from] VocabError),
    #[error("{path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image {0:?} listed twice in manifest")]
    DuplicateImage(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
}

fn read(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Bounds-checked little-endian cursor.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(IoError::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), IoError> {
        let found = self.take(4).map_err(|_| IoError::BadMagic {
            expected: *expected,
            found: self.bytes.to_vec(),
        })?;
        if found != expected {
            return Err(IoError::BadMagic {
                expected: *expected,
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn narrow(v: f64, what: impl FnOnce() -> String) -> Result<f32, IoError> {
    let x = v as f32;
    if !x.is_finite() {
        return Err(IoError::NonFinite { what: what() });
    }
    Ok(x)
}

pub fn encode_rtdf(record: &FeatureRecord) -> Result<Vec<u8>, IoError> {
    let (n1, n2) = record.grid_shape();
    let d = record.dim();
    let n = record.region_count();
    let mut out = Vec::with_capacity(RTDF_HEADER_BYTES + 4 * d * (1 + n * n1 * n2));
    out.extend_from_slice(RTDF_MAGIC);
    for v in [RTDF_VERSION, n as u32, n1 as u32, n2 as u32, d as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, &v) in record.global().iter().enumerate() {
        out.extend_from_slice(&narrow(v, || format!("global[{i}]"))?.to_le_bytes());
    }
    for (r, grid) in record.grids().iter().enumerate() {
        for (i, &v) in grid.data().iter().enumerate() {
            out.extend_from_slice(&narrow(v, || format!("region {r} value {i}"))?.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_rtdf(bytes: &[u8], image_id: &str) -> Result<FeatureRecord, IoError> {
    let mut r = Reader::new(bytes);
    r.magic(RTDF_MAGIC)?;
    let version = r.u32()?;
    if version != RTDF_VERSION {
        return Err(IoError::Version {
            expected: RTDF_VERSION,
            found: version,
        });
    }
    let (n, n1, n2, d) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let header = IoError::Header { n, n1, n2, d };
    if [n, n1, n2, d].contains(&0) {
        return Err(header);
    }
    let cells = (n1 as usize).checked_mul(n2 as usize).ok_or(IoError::Header { n, n1, n2, d })?;
    let expected = cells
        .checked_mul(n as usize)
        .and_then(|c| c.checked_add(1))
        .and_then(|c| c.checked_mul(d as usize))
        .and_then(|c| c.checked_mul(4))
        .ok_or(header)?;
    if r.remaining() < expected {
        return Err(IoError::Truncated {
            expected: RTDF_HEADER_BYTES + expected,
            actual: bytes.len(),
        });
    }
    if r.remaining() > expected {
        return Err(IoError::TrailingBytes {
            extra: r.remaining() - expected,
        });
    }
    let mut floats = |count: usize, what: &dyn Fn(usize) -> String| -> Result<Vec<f64>, IoError> {
        let raw = r.take(4 * count)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(IoError::NonFinite { what: what(i) })
                }
            })
            .collect()
    };
    let d = d as usize;
    let global = floats(d, &|i| format!("global[{i}]"))?;
    let mut grids = Vec::with_capacity(n as usize);
    for region in 0..n as usize {
        let data = floats(cells * d, &|i| format!("region {region} value {i}"))?;
        grids.push(RegionGrid::new(n1 as usize, n2 as usize, d, data).expect("sizes checked"));
    }
    Ok(FeatureRecord::new(image_id, global, grids)?)
}

pub fn write_rtdf(record: &FeatureRecord, path: &Path) -> Result<(), IoError> {
    write(path, &encode_rtdf(record)?)
}

/// Reads a feature file; the image id is the file stem.
pub fn read_rtdf(path: &Path) -> Result<FeatureRecord, IoError> {
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_rtdf(&read(path)?, id)
}

pub fn encode_checkpoint<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>, IoError> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(RTDC_MAGIC);
    out.extend_from_slice(&RTDC_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name) {
            return Err(IoError::DuplicateTensor(name.to_string()));
        }
        if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite {
                what: format!("{name}[{i}]"),
            });
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &dim in t.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Named tensors of a checkpoint, in file order, after the checksum passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, IoError> {
    let mut r = Reader::new(bytes);
    r.magic(RTDC_MAGIC)?;
    if bytes.len() < 16 {
        return Err(IoError::Truncated {
            expected: 16,
            actual: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(IoError::Crc { stored, computed });
    }
    let mut r = Reader::new(body);
    r.magic(RTDC_MAGIC)?;
    let version = r.u32()?;
    if version != RTDC_VERSION {
        return Err(IoError::Version {
            expected: RTDC_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| IoError::BadName)?.to_string();
        if !seen.insert(name.clone()) {
            return Err(IoError::DuplicateTensor(name));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or(IoError::Truncated {
                expected: body.len().saturating_add(1),
                actual: body.len(),
            })?;
        let data: Vec<f64> = r
            .take(8 * numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite {
                what: format!("{name}[{i}]"),
            });
        }
        let t = Tensor::new(shape.clone(), data).map_err(|_| IoError::ShapeConflict {
            name: name.clone(),
            expected: Vec::new(),
            found: shape,
        })?;
        out.push((name, t));
    }
    if r.remaining() != 0 {
        return Err(IoError::TrailingBytes { extra: r.remaining() });
    }
    Ok(out)
}

/// Matches checkpoint tensors to `config`'s parameter table.
pub fn params_from_checkpoint(tensors: Vec<(String, Tensor)>, config: &ModelConfig) -> Result<DecoderParams, IoError> {
    let shapes = config.param_shapes();
    let mut by_name: HashMap<String, Tensor> = HashMap::new();
    for (name, t) in tensors {
        if !shapes.iter().any(|(n, _)| *n == name) {
            return Err(IoError::UnknownTensor(name));
        }
        by_name.insert(name, t);
    }
    let mut ordered = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let t = by_name.remove(name).ok_or_else(|| IoError::MissingTensor(name.to_string()))?;
        if t.shape() != shape.as_slice() {
            return Err(IoError::ShapeConflict {
                name: name.to_string(),
                expected: shape,
                found: t.shape().to_vec(),
            });
        }
        ordered.push(t);
    }
    Ok(DecoderParams::from_tensors(config.clone(), ordered).expect("shapes verified"))
}

pub fn save_checkpoint(params: &DecoderParams, path: &Path) -> Result<(), IoError> {
    write(path, &encode_checkpoint(params.named_tensors())?)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<DecoderParams, IoError> {
    params_from_checkpoint(decode_checkpoint(&read(path)?)?, config)
}

pub fn encode_vocab(vocab: &Vocabulary) -> String {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    s
}

pub fn decode_vocab(text: &str) -> Result<Vocabulary, IoError> {
    Ok(Vocabulary::from_tokens(text.lines().map(str::to_string).collect())?)
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), IoError> {
    write(path, encode_vocab(vocab).as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, IoError> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| IoError::Vocab(VocabError::BadToken {
        line: 0,
        token: format!("invalid UTF-8: {e}"),
    }))?;
    decode_vocab(&text)
}

/// Sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Vocabulary file, relative to the checkpoint's directory.
    pub vocab: String,
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

fn sidecar(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

fn vocab_beside(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("vocab")
}

/// Writes the checkpoint, its JSON sidecar (`.json`) and vocabulary
/// (`.vocab`) next to each other.
pub fn save_model(params: &DecoderParams, vocab: &Vocabulary, ckpt: &Path) -> Result<(), IoError> {
    save_checkpoint(params, ckpt)?;
    let vocab_path = vocab_beside(ckpt);
    save_vocab(vocab, &vocab_path)?;
    let file = ModelFile {
        schema_version: MODEL_SCHEMA_VERSION,
        model: params.config.clone(),
        vocab: vocab_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
    };
    let json = serde_json::to_string_pretty(&file).expect("serializable");
    write(&sidecar(ckpt), json.as_bytes())
}

pub fn load_model(ckpt: &Path) -> Result<(DecoderParams, Vocabulary), IoError> {
    let side = sidecar(ckpt);
    let text = read(&side)?;
    let file: ModelFile = serde_json::from_slice(&text).map_err(|e| IoError::Json {
        path: side.clone(),
        message: e.to_string(),
    })?;
    let vocab = load_vocab(&ckpt.parent().unwrap_or(Path::new("")).join(&file.vocab))?;
    if vocab.len() != file.model.vocab_size {
        return Err(IoError::ShapeConflict {
            name: "vocabulary".into(),
            expected: vec![file.model.vocab_size],
            found: vec![vocab.len()],
        });
    }
    Ok((load_checkpoint(ckpt, &file.model)?, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: String,
    /// Feature file, relative to the manifest's directory.
    pub features: String,
    pub refs: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, IoError> {
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| IoError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !ids.insert(row.image_id.clone()) {
            return Err(IoError::DuplicateImage(row.image_id));
        }
        if !dir.join(&row.features).is_file() {
            return Err(err(format!("feature file {:?} not found", row.features)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), IoError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write(path, text.as_bytes())
}

/// Loads every manifest row's features and references.
pub fn load_records(path: &Path) -> Result<Vec<(FeatureRecord, Vec<String>)>, IoError> {
    let dir = path.parent().unwrap_or(Path::new(""));
    read_manifest(path)?
        .into_iter()
        .map(|row| {
            let bytes = read(&dir.join(&row.features))?;
            Ok((decode_rtdf(&bytes, &row.image_id)?, row.refs))
        })
        .collect()
}

pub fn load_dataset(manifest: &Path, vocab: Vocabulary, max_len: usize) -> Result<Dataset, IoError> {
    Ok(Dataset::encode(vocab, max_len, load_records(manifest)?)?)
}

/// Writes one feature file per record under `features/` and a manifest
/// listing them.
pub fn write_records(records: &[(FeatureRecord, Vec<String>)], manifest: &Path) -> Result<(), IoError> {
    let dir = manifest.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::with_capacity(records.len());
    for (rec, refs) in records {
        let rel = format!("features/{}.rtdf", rec.image_id());
        write_rtdf(rec, &dir.join(&rel))?;
        rows.push(ManifestRow {
            image_id: rec.image_id().to_string(),
            features: rel,
            refs: refs.clone(),
        });
    }
    write_manifest(&rows, manifest)
}
