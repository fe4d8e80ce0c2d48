//! `VIZGEN01` parameter checkpoints.
//!
//! Layout: the 8 ASCII bytes `VIZGEN01`, then one record per parameter until
//! end of file. A record is the name length (`u32` LE), the UTF-8 name, the
//! rank (`u32` LE), one `u32` LE per extent, and the values as `f32` LE.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIZGEN01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode_checkpoint(params: &ParamSet) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for p in params.iter() {
        let name = p.name().as_bytes();
        out.extend((name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value().shape();
        out.extend((shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend((e as u32).to_le_bytes());
        }
        for v in p.value().data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile(format!("truncated checkpoint while reading {what}")))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return Err(Error::CorruptFile("checkpoint shorter than its magic".into()));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a VIZGEN01 checkpoint".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CorruptFile("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 {
            return Err(Error::CorruptFile(format!("parameter `{name}` has rank 0")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::CorruptFile("extent product overflows".into()))?;
        let raw = r.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::CorruptFile("payload size overflows".into()))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| Error::CorruptFile(format!("parameter `{name}`: {e}")))?;
        records.push(NamedTensor { name, tensor });
    }
    Ok(records)
}

pub fn save_checkpoint(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Copies checkpoint values into `params`. Names, order and shapes must match.
pub fn restore(params: &mut ParamSet, records: &[NamedTensor]) -> Result<()> {
    if records.len() != params.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            params.len()
        )));
    }
    for (p, r) in params.iter().zip(records) {
        if p.name() != r.name || p.value().shape() != r.tensor.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "model expects `{}` {:?}, checkpoint has `{}` {:?}",
                p.name(),
                p.value().shape(),
                r.name,
                r.tensor.shape()
            )));
        }
    }
    for (p, r) in params.iter_mut().zip(records) {
        p.set_value(r.tensor.clone())?;
    }
    Ok(())
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the serialised parameter set.
pub fn param_checksum(params: &ParamSet) -> String {
    sha256_hex(&encode_checkpoint(params))
}
