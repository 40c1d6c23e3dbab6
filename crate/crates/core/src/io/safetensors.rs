//! Minimal safetensors container: an 8-byte little-endian header length, a
//! UTF-8 JSON header, then the raw little-endian data region.
//!
//! Keys in the header are written in sorted order and the header is padded
//! with spaces to a multiple of 8 bytes, so the same tensors always produce
//! the same bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::engine::{EngineConfig, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const METADATA_KEY: &str = "__metadata__";
const DIGEST_KEY: &str = "sha256";
const CONFIG_KEY: &str = "engine_config";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "erasure-lab";

/// Headers larger than this are rejected before allocation.
const MAX_HEADER_LEN: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::DtypeUnsupported(other.to_string())),
        }
    }
}

/// Header entry of one tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offsets into the data region, end exclusive.
    pub byte_range: (usize, usize),
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed container: metadata strings plus tensors keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Matrix>,
}

fn matrix_shape(m: &Matrix) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

fn encode(m: &Matrix, dtype: Dtype, out: &mut Vec<u8>) {
    match dtype {
        Dtype::F64 => m.as_slice().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => m
            .as_slice()
            .iter()
            .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
    }
}

/// Header JSON for `tensors` with the given metadata; returns the padded
/// header and the data region.
fn layout(
    tensors: &[(String, &Matrix)],
    dtype: Dtype,
    metadata: &BTreeMap<String, String>,
) -> Result<(Map<String, Value>, Vec<u8>)> {
    let mut header = Map::new();
    let mut data = Vec::new();
    for (name, m) in tensors {
        if name == METADATA_KEY {
            return Err(Error::MalformedHeader(format!("reserved tensor name `{name}`")));
        }
        let begin = data.len();
        encode(m, dtype, &mut data);
        let entry = serde_json::json!({
            "dtype": dtype.name(),
            "shape": matrix_shape(m),
            "data_offsets": [begin, data.len()],
        });
        if header.insert(name.clone(), entry).is_some() {
            return Err(Error::MalformedHeader(format!("duplicate tensor `{name}`")));
        }
    }
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }
    Ok((header, data))
}

fn digest(header_without_digest: &Map<String, Value>, data: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(header_without_digest)?);
    h.update(data);
    Ok(hex::encode(h.finalize()))
}

/// Serializes tensors into container bytes. A sha256 digest over the header
/// and data is added to the metadata.
pub fn to_bytes(
    tensors: &[(String, &Matrix)],
    dtype: Dtype,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut metadata = metadata.clone();
    metadata.remove(DIGEST_KEY);
    let (unsigned, data) = layout(tensors, dtype, &metadata)?;
    metadata.insert(DIGEST_KEY.into(), digest(&unsigned, &data)?);
    let (header, _) = layout(tensors, dtype, &metadata)?;

    let mut json = serde_json::to_vec(&header)?;
    while json.len() % 8 != 0 {
        json.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn usize_list(v: &Value, what: &str, name: &str) -> Result<Vec<usize>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: {what} is not a list")))?;
    arr.iter()
        .map(|x| {
            x.as_u64()
                .and_then(|u| usize::try_from(u).ok())
                .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: bad {what} entry {x}")))
        })
        .collect()
}

fn parse_record(name: &str, v: &Value) -> Result<TensorRecord> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::MalformedHeader(format!("`{name}` is not an object")))?;
    if let Some(k) = obj.keys().find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets")) {
        return Err(Error::MalformedHeader(format!("`{name}`: unknown field `{k}`")));
    }
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: missing dtype")))?;
    let dtype = Dtype::parse(dtype)?;
    let shape = usize_list(
        obj.get("shape")
            .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: missing shape")))?,
        "shape",
        name,
    )?;
    let offsets = usize_list(
        obj.get("data_offsets")
            .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: missing data_offsets")))?,
        "data_offsets",
        name,
    )?;
    if offsets.len() != 2 || offsets[0] > offsets[1] {
        return Err(Error::MalformedHeader(format!("`{name}`: bad data_offsets {offsets:?}")));
    }
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::MalformedHeader(format!(
            "`{name}`: only 1-D and 2-D tensors are supported, got shape {shape:?}"
        )));
    }
    let rec = TensorRecord {
        name: name.to_string(),
        dtype,
        shape,
        byte_range: (offsets[0], offsets[1]),
    };
    let expected = rec
        .shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::MalformedHeader(format!("`{name}`: shape overflows")))?;
    if expected != offsets[1] - offsets[0] {
        return Err(Error::MalformedHeader(format!(
            "`{name}`: {} bytes declared for {} elements of {}",
            offsets[1] - offsets[0],
            rec.numel(),
            dtype.name()
        )));
    }
    Ok(rec)
}

fn decode(rec: &TensorRecord, bytes: &[u8]) -> Result<Matrix> {
    let values: Vec<f64> = match rec.dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let (rows, cols) = match rec.shape[..] {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!(),
    };
    Matrix::from_vec(rows, cols, values)
}

/// Parses container bytes. Offsets must tile the data region exactly. If
/// the metadata carries a digest it is verified.
pub fn from_bytes(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedFile(format!("{} bytes, header length needs 8", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if n > MAX_HEADER_LEN {
        return Err(Error::MalformedHeader(format!("header length {n} exceeds limit")));
    }
    let n = n as usize;
    if bytes.len() - 8 < n {
        return Err(Error::TruncatedFile(format!(
            "header declares {n} bytes, only {} present",
            bytes.len() - 8
        )));
    }
    let text = std::str::from_utf8(&bytes[8..8 + n])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    if !text.starts_with('{') {
        return Err(Error::MalformedHeader("header does not start with `{`".into()));
    }
    let header: Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedHeader(format!("invalid JSON: {e}")))?;
    let Value::Object(mut header) = header else {
        return Err(Error::MalformedHeader("header is not an object".into()));
    };
    let data = &bytes[8 + n..];

    let mut metadata = BTreeMap::new();
    if let Some(meta) = header.remove(METADATA_KEY) {
        let Value::Object(meta) = meta else {
            return Err(Error::MalformedHeader("metadata is not an object".into()));
        };
        for (k, v) in meta {
            let Value::String(s) = v else {
                return Err(Error::MalformedHeader(format!("metadata `{k}` is not a string")));
            };
            metadata.insert(k, s);
        }
    }

    let mut records = header
        .iter()
        .map(|(name, v)| parse_record(name, v))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.byte_range);
    let mut cursor = 0;
    for r in &records {
        if r.byte_range.0 != cursor {
            return Err(Error::MalformedHeader(if r.byte_range.0 < cursor {
                format!("`{}` overlaps the previous tensor", r.name)
            } else {
                format!("gap before `{}`", r.name)
            }));
        }
        cursor = r.byte_range.1;
    }
    if cursor > data.len() {
        return Err(Error::TruncatedFile(format!(
            "tensors need {cursor} data bytes, file has {}",
            data.len()
        )));
    }
    if cursor < data.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the last tensor",
            data.len() - cursor
        )));
    }

    if let Some(stored) = metadata.get(DIGEST_KEY) {
        let mut unsigned = header.clone();
        let mut meta = metadata.clone();
        meta.remove(DIGEST_KEY);
        if !meta.is_empty() {
            let m: Map<String, Value> = meta.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
            unsigned.insert(METADATA_KEY.into(), Value::Object(m));
        }
        let computed = digest(&unsigned, data)?;
        if &computed != stored {
            return Err(Error::ChecksumMismatch {
                stored: stored.clone(),
                computed,
            });
        }
    }

    let tensors = records
        .iter()
        .map(|r| Ok((r.name.clone(), decode(r, &data[r.byte_range.0..r.byte_range.1])?)))
        .collect::<Result<_>>()?;
    Ok(TensorFile { metadata, tensors })
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_tensors(
    path: &Path,
    tensors: &[(String, &Matrix)],
    dtype: Dtype,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path, &to_bytes(tensors, dtype, metadata)?)
}

pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Checkpoint bytes: every tensor as F64 with the engine config in the
/// metadata.
pub fn checkpoint_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    let mut meta = BTreeMap::new();
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(&ckpt.config)?);
    to_bytes(&ckpt.tensors(), Dtype::F64, &meta)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let file = from_bytes(bytes)?;
    if !file.metadata.contains_key(DIGEST_KEY) {
        return Err(Error::MalformedHeader("checkpoint has no digest".into()));
    }
    if file.metadata.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(Error::MalformedHeader("not an erasure-lab checkpoint".into()));
    }
    let cfg = file
        .metadata
        .get(CONFIG_KEY)
        .ok_or_else(|| Error::MalformedHeader("missing engine config".into()))?;
    let cfg: EngineConfig =
        serde_json::from_str(cfg).map_err(|e| Error::MalformedHeader(format!("engine config: {e}")))?;
    ModelCheckpoint::from_tensors(cfg, file.tensors)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::init_model;

    fn hand_built() -> Vec<u8> {
        let header = br#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#;
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header);
        for x in [1.0f32, -2.5, 0.125, 3.0] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    #[test]
    fn hand_built_f32_file() {
        let f = from_bytes(&hand_built()).unwrap();
        let w = &f.tensors["w"];
        assert_eq!(w.shape(), (2, 2));
        assert_eq!(w.as_slice(), &[1.0, -2.5, 0.125, 3.0]);
        assert!(f.metadata.is_empty());
    }

    #[test]
    fn offsets_past_end_are_truncation() {
        let mut b = hand_built();
        b.truncate(b.len() - 4);
        assert!(matches!(from_bytes(&b), Err(Error::TruncatedFile(_))));
        assert!(matches!(from_bytes(&b[..5]), Err(Error::TruncatedFile(_))));
    }

    #[test]
    fn overlaps_and_gaps_are_rejected() {
        let build = |header: &str, data: usize| {
            let mut out = (header.len() as u64).to_le_bytes().to_vec();
            out.extend_from_slice(header.as_bytes());
            out.extend(std::iter::repeat_n(0u8, data));
            out
        };
        let overlap = r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#;
        let gap = r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[8,12]}}"#;
        assert!(matches!(from_bytes(&build(overlap, 12)), Err(Error::MalformedHeader(_))));
        assert!(matches!(from_bytes(&build(gap, 12)), Err(Error::MalformedHeader(_))));
        let bf16 = r#"{"a":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#;
        assert!(matches!(from_bytes(&build(bf16, 4)), Err(Error::DtypeUnsupported(_))));
        assert!(matches!(from_bytes(&build("[1]", 0)), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let bytes = checkpoint_bytes(&ckpt).unwrap();
        assert_eq!(bytes, checkpoint_bytes(&ckpt).unwrap());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        for ((na, a), (nb, b)) in ckpt.tensors().iter().zip(back.tensors()) {
            assert_eq!(na, &nb);
            let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn flipped_data_byte_fails_digest() {
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let mut bytes = checkpoint_bytes(&ckpt).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(
            checkpoint_from_bytes(&bytes),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.st");
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, ckpt.config);
        assert!(matches!(load_checkpoint(&dir.path().join("none.st")), Err(Error::Io { .. })));
    }
}
