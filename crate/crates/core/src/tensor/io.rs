//! Little-endian binary tensor files: magic `PNT1`, precision in bits (u8),
//! rank (u32), each dimension (u64), then the elements.

use std::io::{Read, Write};

use super::{EngineError, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PNT1";

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<(), EngineError> {
    let mut buf = Vec::with_capacity(16 + t.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(T::PRECISION.bits());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a tensor stored at either precision, converting to `T`.
pub fn read_tensor<T: Scalar>(mut r: impl Read) -> Result<Tensor<T>, EngineError> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        return Err(EngineError::Format("bad magic".into()));
    }
    let bits = head[4];
    let rank = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(EngineError::Format(format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let data: Vec<T> = match bits {
        32 => {
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            bytes.chunks_exact(4).map(|c| T::cast(f32::read_le(c) as f64)).collect()
        }
        64 => {
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            bytes.chunks_exact(8).map(|c| T::cast(f64::read_le(c))).collect()
        }
        other => return Err(EngineError::Format(format!("unsupported precision {other}"))),
    };
    Tensor::new(shape, data)
}
