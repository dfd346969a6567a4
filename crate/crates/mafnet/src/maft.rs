//! MAFT binary tensor files.
//!
//! Layout: `b"MAFT"`, version `0x01`, dtype byte, rank byte, `rank`
//! little-endian `u32` extents, then the row-major little-endian payload.
//! Dtype `0x01` is `f32`; `0x02` is `f64`.

use std::io::{Read, Write};
use std::path::Path;

use mafnet_core::{Scalar, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"MAFT";
pub const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 7;

fn dtype_width(dtype: u8) -> Option<usize> {
    match dtype {
        0x01 => Some(4),
        0x02 => Some(8),
        _ => None,
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> CliResult<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| CliError::data(format!("rank {} exceeds 255", t.rank())))?;
    let width = dtype_width(T::DTYPE).expect("scalar types carry a known dtype");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE, rank]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| CliError::data(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            0x01 => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
        }
    }
    Ok(out)
}

/// Decodes a tensor, converting the stored dtype to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> CliResult<Tensor<T>> {
    let bad = |msg: String| CliError::data(format!("MAFT: {msg}"));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {:#04x}", bytes[4])));
    }
    let dtype = bytes[5];
    let width = dtype_width(dtype).ok_or_else(|| bad(format!("unknown dtype {dtype:#04x}")))?;
    let rank = bytes[6] as usize;
    let dims_end = HEADER_LEN + 4 * rank;
    if bytes.len() < dims_end {
        return Err(bad(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = numel
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            shape,
            expected
        )));
    }
    let data: Vec<T> = match dtype {
        0x01 => payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> CliResult<()> {
    let bytes = encode(t)?;
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| CliError::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> CliResult<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..7], b"MAFT\x01\x01\x02");
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 15 + 24);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::<f64>::new([1, 2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f32>::ones([4]);
        let good = encode(&t).unwrap();
        assert!(decode::<f32>(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut bad = good;
        bad[5] = 0x09;
        assert!(decode::<f32>(&bad).is_err());
    }
}
