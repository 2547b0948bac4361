//! `EHDT` tensor blobs.
//!
//! Layout (little-endian): magic `EHDT`, `u8` version (1), `u8` dtype (0 = f32),
//! `u8` ndim, `ndim` x `u64` dims, then the row-major `f32` payload.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EHDT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> TensorError {
    TensorError::Format {
        offset,
        msg: msg.into(),
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format_err(*pos, format!("truncated {what}")))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected EHDT"));
    }
    let version = take(bytes, &mut pos, 1, "version")?[0];
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dtype = take(bytes, &mut pos, 1, "dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(format_err(5, format!("unsupported dtype code {dtype}")));
    }
    let ndim = take(bytes, &mut pos, 1, "ndim")?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let at = pos;
        let raw = take(bytes, &mut pos, 8, "dims")?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        let d = usize::try_from(d).map_err(|_| format_err(at, "dimension overflows usize"))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        shape.push(d);
    }
    let payload_len = numel
        .checked_mul(4)
        .ok_or_else(|| format_err(pos, "payload size overflows"))?;
    let payload = take(bytes, &mut pos, payload_len, "payload")?;
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_file(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"EHDT");
        assert_eq!(b[4..7], [1, 0, 2]);
        assert_eq!(b.len(), 7 + 16 + 8);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let b = encode(&t);
        match decode(&b[..b.len() - 2]) {
            Err(TensorError::Format { offset, .. }) => assert_eq!(offset, 15),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let mut b = encode(&Tensor::new(vec![1], vec![0.0f32]).unwrap());
        b[5] = 7;
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 5, .. })));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(TensorError::Format { offset: 0, .. })));
    }
}
