//! Named-block binary checkpoints with a CRC32 trailer.
//!
//! Layout: magic `BEACONCK`, version u16, block count u32, then per block the name
//! (u16 length + UTF-8), rank u8, dims as u32 and the f32 payload. The trailer is the
//! CRC32 of everything after the header.

use std::fs;
use std::path::Path;

use super::{Parameters, Tensor, TensorError};
use crate::binio::{crc32, verify_crc_trailer, BinError, LeReader, LeWriter};

const MAGIC: &str = "BEACONCK";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Tensor)>,
}

fn qualified(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot every tensor of `params` under `prefix`.
    pub fn capture(params: &dyn Parameters, prefix: &str) -> Self {
        let mut blocks = Vec::new();
        params.visit(&mut |name, t| blocks.push((qualified(prefix, name), t.clone())));
        Self { blocks }
    }

    pub fn merge(&mut self, other: Checkpoint) {
        self.blocks.extend(other.blocks);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Load tensors back into `params`. Every parameter must be present with a matching
    /// shape; extra blocks are ignored so one file can hold several components.
    pub fn restore(&self, params: &mut dyn Parameters, prefix: &str) -> Result<(), TensorError> {
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let key = qualified(prefix, name);
            match self.get(&key) {
                None => err = Some(TensorError::MissingBlock(key)),
                Some(src) if src.shape() != t.shape() => {
                    err = Some(TensorError::Shape(format!(
                        "{key}: checkpoint {:?} vs model {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new();
        w.bytes(MAGIC.as_bytes());
        w.u16(VERSION);
        w.u32(self.blocks.len() as u32);
        for (name, t) in &self.blocks {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        let crc = crc32(&w.as_slice()[HEADER_LEN..]);
        w.u32(crc);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut r = LeReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(BinError::Format(format!("unsupported checkpoint version {version}")).into());
        }
        let n_blocks = r.u32()? as usize;
        let payload = verify_crc_trailer(bytes, HEADER_LEN)?;
        let mut r = LeReader::new(&payload[HEADER_LEN..]);
        let mut blocks = Vec::with_capacity(n_blocks.min(1024));
        for _ in 0..n_blocks {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| BinError::Format("block name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 4 > r.remaining() {
                return Err(BinError::Format(format!("block {name} overruns the file")).into());
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()? as f64);
            }
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| BinError::Format(format!("block {name}: {e}")))?;
            blocks.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(BinError::Format(format!("{} trailing bytes", r.remaining())).into());
        }
        Ok(Self { blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
