//! The `RNTENSOR` file container.
//!
//! Layout: the 8 magic bytes `RNTENSOR`, a little-endian `u64` header
//! length, that many bytes of UTF-8 JSON, then the raw little-endian
//! payload. A single tensor uses the header `{"dtype":"f32","shape":[..]}`;
//! a parameter store lists its entries by name and may carry free-form
//! metadata (e.g. the projection geometry a checkpoint was trained for).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"RNTENSOR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    entries: Vec<EntryHeader>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    meta: Value,
}

fn encode(header: &Header, payload: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len() * header.dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match header.dtype {
        Dtype::F32 => payload.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => payload.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing RNTENSOR magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let raw = &bytes[16 + hlen..];
    let w = header.dtype.width();
    if raw.len() % w != 0 {
        return Err(Error::Format("payload is not a whole number of values".into()));
    }
    let data = match header.dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((header, data))
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let header = Header {
        dtype,
        shape: Some(t.shape().to_vec()),
        entries: vec![],
        meta: Value::Null,
    };
    encode(&header, t.data())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (header, data) = decode(bytes)?;
    let shape = header
        .shape
        .ok_or_else(|| Error::Format("header has no `shape`; is this a parameter store?".into()))?;
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_store(store: &ParamStore, meta: Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.num_scalars());
    for (name, e) in store.iter() {
        entries.push(EntryHeader {
            name: name.to_string(),
            shape: e.value.shape().to_vec(),
        });
        payload.extend_from_slice(e.value.data());
    }
    let header = Header {
        dtype: Dtype::F64,
        shape: None,
        entries,
        meta,
    };
    encode(&header, &payload)
}

pub fn decode_store(bytes: &[u8]) -> Result<(ParamStore, Value)> {
    let (header, data) = decode(bytes)?;
    let mut store = ParamStore::new();
    let mut offset = 0;
    for e in header.entries {
        let n: usize = e.shape.iter().product();
        let slice = data
            .get(offset..offset + n)
            .ok_or_else(|| Error::Format(format!("payload too short for `{}`", e.name)))?;
        store.insert(e.name, Tensor::new(e.shape, slice.to_vec())?)?;
        offset += n;
    }
    if offset != data.len() {
        return Err(Error::Format("payload longer than declared entries".into()));
    }
    Ok((store, header.meta))
}

pub fn write_store(path: &Path, store: &ParamStore, meta: Value) -> Result<()> {
    fs::write(path, encode_store(store, meta)?)?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<(ParamStore, Value)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingDependency(format!("checkpoint {} not found", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    decode_store(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensor(&t, Dtype::F32).unwrap();
        assert_eq!(&bytes[..8], b"RNTENSOR");
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + hlen], br#"{"dtype":"f32","shape":[2]}"#);
        assert_eq!(&bytes[16 + hlen..], [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
    }

    #[test]
    fn store_round_trip_keeps_meta() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        s.insert("a", Tensor::full(&[2, 2], 7.0)).unwrap();
        let meta = json!({"theta_miss": 90.0});
        let (back, m) = decode_store(&encode_store(&s, meta.clone()).unwrap()).unwrap();
        assert_eq!(m, meta);
        for (name, e) in s.iter() {
            assert_eq!(back.value(name).unwrap(), &e.value);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_tensor(b"NOTATENSOR......").is_err());
        assert!(decode_tensor(b"RNTENSOR").is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bitwise(values in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(values);
            let back = decode_tensor(&encode_tensor(&t, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn f32_round_trip_within_precision(values in proptest::collection::vec(-1.0f64..1.0, 1..64)) {
            let t = Tensor::from_vec(values);
            let back = decode_tensor(&encode_tensor(&t, Dtype::F32).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&t).unwrap() < 1e-7);
        }
    }
}
