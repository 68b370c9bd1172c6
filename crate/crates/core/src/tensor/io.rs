//! `TSR1` tensor container and checkpoint directories.
//!
//! Layout: magic `TSR1`, version `u32 = 1`, dtype `u8 = 1` (f32), `ndim: u8`,
//! `ndim` extents as `u64`, then the row-major payload. All little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSR1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const INDEX_FILE: &str = "index.json";

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(fmt("missing TSR1 magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    if bytes[8] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[8])));
    }
    let ndim = bytes[9] as usize;
    let header = 10 + 8 * ndim;
    if bytes.len() < header {
        return Err(fmt("truncated header"));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(Error::Format(format!(
            "payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Contents of a checkpoint directory's `index.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointIndex {
    /// Parameter name → file name inside the directory.
    pub tensors: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.tsr")
}

pub fn save_checkpoint<'a>(
    dir: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (String, &'a Tensor<f32>)>,
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = CheckpointIndex { tensors: BTreeMap::new(), meta };
    for (name, t) in tensors {
        let file = file_name_for(&name);
        if index.tensors.values().any(|f| *f == file) {
            return Err(Error::InvalidArgument(format!("duplicate checkpoint file name for {name}")));
        }
        write_tensor(dir.join(&file), t)?;
        index.tensors.insert(name, file);
    }
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(BTreeMap<String, Tensor<f32>>, serde_json::Value)> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    let mut out = BTreeMap::new();
    for (name, file) in index.tensors {
        out.insert(name, read_tensor(dir.join(file))?);
    }
    Ok((out, index.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new([2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"TSR1");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 2);
        assert_eq!(&b[10..18], &2u64.to_le_bytes());
        assert_eq!(&b[18..26], &1u64.to_le_bytes());
        assert_eq!(&b[26..30], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 34);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = b;
        bad[8] = 2;
        assert!(decode(&bad).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::from_fn([2, 3], |i| i as f32 * 0.1);
        let b = Tensor::from_fn([4], |i| -(i as f32));
        save_checkpoint(
            dir.path(),
            vec![("a.w".to_string(), &a), ("b".to_string(), &b)],
            serde_json::json!({"k": 1}),
        )
        .unwrap();
        let (m, meta) = load_checkpoint(dir.path()).unwrap();
        assert!(m["a.w"].bit_eq(&a));
        assert!(m["b"].bit_eq(&b));
        assert_eq!(meta["k"], 1);
    }

    proptest! {
        #[test]
        fn container_roundtrip_is_bit_exact(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919)))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
