//! NTC v1: the kit's raw tensor container.
//!
//! Layout, all little-endian: magic `NTC1`, u32 rank, rank × u32
//! extents, then row-major f32 payload. Payload length must match the
//! extents exactly — no trailing bytes.

use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

use super::{FormatError, Result};

const FMT: &str = "ntc";
pub const MAGIC: &[u8; 4] = b"NTC1";
/// Caps rank and element count so hostile headers can't trigger huge
/// allocations before the length check runs.
pub const MAX_RANK: u32 = 8;
pub const MAX_ELEMS: u64 = 1 << 28;

fn err(offset: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Malformed { format: FMT, offset, msg: msg.into() }
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| err(offset, "truncated header"))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_ntc(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.get(0..4) != Some(MAGIC.as_slice()) {
        return Err(err(0, "missing NTC1 magic"));
    }
    let rank = u32_at(bytes, 4)?;
    if rank > MAX_RANK {
        return Err(err(4, format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for i in 0..rank as usize {
        let e = u32_at(bytes, 8 + 4 * i)?;
        if e == 0 {
            return Err(err(8 + 4 * i, "zero extent"));
        }
        numel = numel
            .checked_mul(e as u64)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| err(8 + 4 * i, format!("element count exceeds {MAX_ELEMS}")))?;
        shape.push(e as usize);
    }
    let payload_at = 8 + 4 * rank as usize;
    let want = numel as usize * 4;
    let got = bytes.len() - payload_at.min(bytes.len());
    if got != want {
        return Err(err(
            payload_at,
            format!("payload is {got} bytes, extents require {want}"),
        ));
    }
    let data: Vec<f32> = bytes[payload_at..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(shape, data).map_err(|e| err(payload_at, e.to_string()))
}

pub fn encode_ntc(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_ntc(path: &Path) -> Result<Tensor<f32>> {
    parse_ntc(&std::fs::read(path)?)
}

pub fn write_ntc(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_ntc(t))?;
    Ok(())
}
