//! Minimal reader for the safetensors container (F32, F16 and BF16 payloads).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub struct SafeTensors {
    tensors: HashMap<String, Tensor>,
}

impl SafeTensors {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PlvmError::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| PlvmError::Archive(format!("safetensors: {m}"));
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(8..8 + n).ok_or_else(|| bad("header past end of file"))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header)?;
        let body = &bytes[8 + n..];
        let mut tensors = HashMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            let e: Entry = serde_json::from_value(value)?;
            let [start, end] = e.data_offsets;
            let chunk = body.get(start..end).ok_or_else(|| bad("tensor past end of file"))?;
            let data: Vec<f32> = match e.dtype.as_str() {
                "F32" => chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                "F16" => chunk
                    .chunks_exact(2)
                    .map(|c| f16_to_f32(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
                "BF16" => chunk
                    .chunks_exact(2)
                    .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16))
                    .collect(),
                other => return Err(bad(&format!("unsupported dtype {other}"))),
            };
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(bad(&format!("{name}: payload does not match shape")));
            }
            tensors.insert(name, Tensor { shape: e.shape, data });
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| PlvmError::Archive(format!("safetensors: missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }
}

/// Serializes F32 tensors; used to build fixtures.
pub fn write_f32(tensors: &[(&str, Vec<usize>, Vec<f32>)]) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut body = Vec::new();
    for (name, shape, data) in tensors {
        let start = body.len();
        for v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        header.insert(
            name.to_string(),
            Entry {
                dtype: "F32".into(),
                shape: shape.clone(),
                data_offsets: [start, body.len()],
            },
        );
    }
    let header = serde_json::to_vec(&header).expect("serializable header");
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out
}

fn f16_to_f32(h: u16) -> f32 {
    let sign = ((h >> 15) as u32) << 31;
    let exp = ((h >> 10) & 0x1f) as u32;
    let mant = (h & 0x3ff) as u32;
    let bits = match (exp, mant) {
        (0, 0) => sign,
        (0, m) => {
            // subnormal: renormalize
            let mut e = 127 - 15 + 1;
            let mut m = m;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            sign | ((e as u32) << 23) | ((m & 0x3ff) << 13)
        }
        (0x1f, m) => sign | 0x7f80_0000 | (m << 13),
        (e, m) => sign | ((e + 127 - 15) << 23) | (m << 13),
    };
    f32::from_bits(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_f32() {
        let bytes = write_f32(&[("a.b", vec![2, 2], vec![1.0, -2.0, 3.5, 0.0])]);
        let st = SafeTensors::parse(&bytes).unwrap();
        let t = st.get("a.b").unwrap();
        assert_eq!(t.shape, vec![2, 2]);
        assert_eq!(t.data, vec![1.0, -2.0, 3.5, 0.0]);
        assert!(st.get("missing").is_err());
    }

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f32(0x3c00), 1.0);
        assert_eq!(f16_to_f32(0xc000), -2.0);
        assert_eq!(f16_to_f32(0x0001), 2f32.powi(-24));
        assert!(f16_to_f32(0x7c00).is_infinite());
    }
}
