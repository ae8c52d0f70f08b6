//! Reader and writer for the safetensors container: an 8-byte little-endian header length, a JSON
//! header mapping tensor names to dtype/shape/byte range, then the raw little-endian data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::float::{DType, Float};

/// Tensors plus the free-form string metadata stored under `__metadata__`.
pub struct SafeTensors<F: Float> {
    pub tensors: BTreeMap<String, ArrayD<F>>,
    pub metadata: BTreeMap<String, String>,
}

/// Name, dtype and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

pub fn serialize<F: Float>(tensors: &BTreeMap<String, ArrayD<F>>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".into(), json!(metadata));
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        let nbytes = t.len() * F::DTYPE.size_in_bytes();
        header.insert(
            name.clone(),
            json!({
                "dtype": F::DTYPE.as_str(),
                "shape": t.shape(),
                "data_offsets": [offset, offset + nbytes],
            }),
        );
        offset += nbytes;
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("json of plain values");
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in tensors.values() {
        for &v in t.as_standard_layout().iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<F: Float>(
    path: &Path,
    tensors: &BTreeMap<String, ArrayD<F>>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = serialize(tensors, metadata);
    // Write-then-rename so readers never observe a half-written file.
    let tmp = path.with_extension("safetensors.partial");
    fs::write(&tmp, bytes).map_err(|source| Error::Io { path: tmp.clone(), source })?;
    fs::rename(&tmp, path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

struct Entry {
    info: TensorInfo,
    begin: usize,
    end: usize,
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Entry>, BTreeMap<String, String>, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the 8-byte header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let data_start = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {n} exceeds file size {}", bytes.len())))?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..data_start])
        .map_err(|e| Error::Format(format!("header is not a JSON object: {e}")))?;
    let data_len = bytes.len() - data_start;

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::new();
    for (name, v) in header {
        if name == "__metadata__" {
            if let Value::Object(m) = v {
                for (k, val) in m {
                    if let Value::String(s) = val {
                        metadata.insert(k, s);
                    }
                }
            }
            continue;
        }
        let bad = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
        let dtype_str = v.get("dtype").and_then(Value::as_str).ok_or_else(|| bad("missing dtype"))?;
        let dtype = DType::parse(dtype_str).ok_or_else(|| bad(&format!("unsupported dtype {dtype_str}")))?;
        let shape: Vec<usize> = v
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing shape"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("shape is not a list of integers"))?;
        let offsets: Vec<usize> = v
            .get("data_offsets")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing data_offsets"))?
            .iter()
            .map(|d| d.as_u64().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("data_offsets are not integers"))?;
        let [begin, end] = offsets[..] else {
            return Err(bad("data_offsets must have two entries"));
        };
        let expected = shape.iter().product::<usize>() * dtype.size_in_bytes();
        if end < begin || end > data_len || end - begin != expected {
            return Err(bad(&format!(
                "byte range {begin}..{end} does not hold {expected} bytes within {data_len}"
            )));
        }
        entries.push(Entry {
            info: TensorInfo { name, dtype, shape },
            begin,
            end,
        });
    }
    Ok((entries, metadata, data_start))
}

fn decode<F: Float>(raw: &[u8], dtype: DType) -> Vec<F> {
    match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| F::cast(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| F::cast(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        DType::F16 => raw
            .chunks_exact(2)
            .map(|c| F::cast(half::f16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        DType::BF16 => raw
            .chunks_exact(2)
            .map(|c| F::cast(half::bf16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
    }
}

pub fn deserialize<F: Float>(bytes: &[u8]) -> Result<SafeTensors<F>> {
    let (entries, metadata, data_start) = parse_header(bytes)?;
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in entries {
        let values = decode::<F>(&data[e.begin..e.end], e.info.dtype);
        let arr = ArrayD::from_shape_vec(IxDyn(&e.info.shape), values)
            .map_err(|err| Error::Format(format!("tensor `{}`: {err}", e.info.name)))?;
        tensors.insert(e.info.name, arr);
    }
    Ok(SafeTensors { tensors, metadata })
}

pub fn load<F: Float>(path: &Path) -> Result<SafeTensors<F>> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    deserialize(&bytes)
}

/// Lists what a file holds without decoding the data.
pub fn inspect(path: &Path) -> Result<Vec<TensorInfo>> {
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let (entries, _, _) = parse_header(&bytes)?;
    Ok(entries.into_iter().map(|e| e.info).collect())
}
