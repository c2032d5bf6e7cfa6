//! NDT1 tensor serialization.
//!
//! Layout, all little-endian: magic bytes `NDT1`, `u32` rank, one `u32` per
//! extent, then the row-major `f32` payload.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"NDT1";
const MAX_RANK: u32 = 8;

impl Tensor {
    pub fn write_ndt1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        let dims = self.shape().dims();
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.numel() * 4);
        for &v in self.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Read one tensor; the reader is left positioned right after its payload.
    pub fn read_ndt1<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Integrity(format!(
                "bad tensor magic {:02x?}, expected {:02x?}",
                magic, MAGIC
            )));
        }
        let rank = read_u32(r)?;
        if rank > MAX_RANK {
            return Err(Error::Integrity(format!("implausible tensor rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = read_u32(r)? as usize;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::Integrity("tensor extent product overflows".into())
            })?;
            dims.push(d);
        }
        if numel > (1 << 31) {
            return Err(Error::Integrity(format!(
                "implausible tensor payload of {numel} elements"
            )));
        }
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite value in tensor payload".into()));
        }
        Tensor::new(dims, data)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
