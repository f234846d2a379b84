//! `RCK1` checkpoint files: little-endian, a header with the config hash and
//! step, then named f32 tensors.

use std::io::Read;
use std::path::Path;

use super::Tensor;
use crate::error::{IoContext, Result};
use crate::io_util::{write_atomic, ByteReader};

const MAGIC: &[u8; 4] = b"RCK1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for nt in &self.tensors {
            out.extend_from_slice(&(nt.name.len() as u32).to_le_bytes());
            out.extend_from_slice(nt.name.as_bytes());
            out.extend_from_slice(&(nt.tensor.shape.len() as u32).to_le_bytes());
            for &d in &nt.tensor.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &nt.tensor.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.error("tensor name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            tensors.push(NamedTensor {
                name,
                tensor: Tensor { shape, data },
            });
        }
        if !r.is_empty() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Self {
            config_hash,
            step,
            tensors,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .at(path)?;
    Checkpoint::from_bytes(&bytes)
}
