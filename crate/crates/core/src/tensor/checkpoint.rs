//! Binary checkpoint format.
//!
//! ```text
//! "HLFP"                 magic
//! u32 LE                 format version
//! u64 LE                 tensor count
//! per tensor, sorted by name:
//!   u32 LE               name length in bytes
//!   [u8]                 UTF-8 name
//!   u32 LE               rank
//!   u64 LE * rank        dims
//!   f32 LE * prod(dims)  values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{HlfpError, Result};

pub const MAGIC: &[u8; 4] = b"HLFP";
pub const VERSION: u32 = 1;

/// Named tensors, parameters and buffers alike.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> HlfpError {
    HlfpError::Checkpoint(msg.into())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            tensors: store
                .tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Copies every tensor the store expects. Extra tensors in the checkpoint
    /// are ignored, which is what lets a cutout load the full model's file.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.tensors().into_iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| HlfpError::MissingParameter(name.clone()))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| bad(e.to_string());
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.tensors {
            let name_len = u32::try_from(name.len()).map_err(|_| bad("tensor name too long"))?;
            w.write_all(&name_len.to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_exact::<4>(r)? != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(read_exact(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(read_exact(r)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(read_exact(r)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)
                .map_err(|e| bad(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(read_exact(r)?);
                shape.push(usize::try_from(d).map_err(|_| bad("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("{name}: element count overflow")))?;
            let mut raw = vec![0u8; n.checked_mul(4).ok_or_else(|| bad("size overflow"))?];
            r.read_exact(&mut raw)
                .map_err(|e| bad(format!("{name}: truncated data: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HlfpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HlfpError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.tensors.insert(
            "trunk.stem.conv.weight".into(),
            Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.1 - 0.7),
        );
        c.tensors.insert(
            "branch3.head.fc.bias".into(),
            Tensor::new(vec![1], vec![f32::from_bits(0x8000_0001)]).unwrap(),
        );
        c
    }

    #[test]
    fn bit_exact_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors.len(), 2);
        for (k, t) in &c.tensors {
            assert!(back.tensors[k].bitwise_eq(t));
        }
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"HLFP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        // first tensor in name order
        let len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        assert_eq!(&bytes[20..20 + len], b"branch3.head.fc.bias");
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }

    #[test]
    fn load_into_ignores_extra_and_requires_expected() {
        let c = sample();
        let mut s = ParamStore::new();
        s.insert_param("branch3.head.fc.bias", Tensor::zeros(&[1]));
        c.load_into(&mut s).unwrap();
        assert!(s
            .param("branch3.head.fc.bias")
            .unwrap()
            .bitwise_eq(&c.tensors["branch3.head.fc.bias"]));
        s.insert_param("branch4.head.fc.bias", Tensor::zeros(&[1]));
        assert!(matches!(c.load_into(&mut s), Err(HlfpError::MissingParameter(_))));
    }
}
