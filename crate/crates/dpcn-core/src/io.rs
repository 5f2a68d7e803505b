//! DPCN-T tensor dump format.
//!
//! Layout, all little-endian: magic `D P C N`, u16 version (=1), u8 dtype
//! (0 = f32, 1 = f64), u8 rank, rank x u32 dims, then the row-major
//! payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DPCNT_MAGIC: [u8; 4] = *b"DPCN";
pub const DPCNT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::MalformedHeader(format!("unknown dtype code {other}"))),
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Total encoded size in bytes for a tensor of the given rank/numel.
pub fn dpcnt_byte_len(rank: usize, numel: usize, dtype: Dtype) -> usize {
    4 + 2 + 1 + 1 + rank * 4 + numel * dtype.elem_size()
}

pub fn write_dpcnt<W: Write>(w: &mut W, t: &Tensor, dtype: Dtype) -> Result<()> {
    w.write_all(&DPCNT_MAGIC)?;
    w.write_all(&DPCNT_VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code()])?;
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::MalformedHeader(format!("rank {rank} exceeds u8")));
    }
    w.write_all(&[rank as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match dtype {
        Dtype::F32 => {
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_dpcnt<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != DPCNT_MAGIC {
        return Err(Error::MalformedHeader("bad DPCN-T magic".into()));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != DPCNT_VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {version}")));
    }
    let mut buf1 = [0u8; 1];
    r.read_exact(&mut buf1)?;
    let dtype = Dtype::from_code(buf1[0])?;
    r.read_exact(&mut buf1)?;
    let rank = buf1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        if d == 0 {
            return Err(Error::MalformedHeader("zero-sized dimension".into()));
        }
        shape.push(d);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for _ in 0..numel {
                r.read_exact(&mut buf4)?;
                data.push(f32::from_le_bytes(buf4) as f64);
            }
        }
        Dtype::F64 => {
            let mut buf8 = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf8)?;
                data.push(f64::from_le_bytes(buf8));
            }
        }
    }
    Tensor::try_new(shape, data)
}

pub fn save_dpcnt(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dpcnt(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_dpcnt(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_dpcnt(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 1e-300, 3.0, 0.0, -0.0]);
        let mut buf = Vec::new();
        write_dpcnt(&mut buf, &t, Dtype::F64).unwrap();
        assert_eq!(buf.len(), dpcnt_byte_len(2, 6, Dtype::F64));
        let back = read_dpcnt(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_bytes_are_as_documented() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]);
        let mut buf = Vec::new();
        write_dpcnt(&mut buf, &t, Dtype::F32).unwrap();
        assert_eq!(&buf[0..4], b"DPCN");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(buf[6], 0); // f32
        assert_eq!(buf[7], 1); // rank
        assert_eq!(u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]), 2);
    }

    #[test]
    fn f32_narrows_then_widens() {
        let t = Tensor::new(vec![2], vec![0.1, -7.0]);
        let mut buf = Vec::new();
        write_dpcnt(&mut buf, &t, Dtype::F32).unwrap();
        let back = read_dpcnt(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data[0], 0.1f32 as f64);
        assert_eq!(back.data[1], -7.0);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_dpcnt(&mut &b"NOPE"[..]).is_err());
        let mut buf = Vec::new();
        write_dpcnt(&mut buf, &Tensor::scalar(1.0), Dtype::F64).unwrap();
        buf[5] = 9; // version
        assert!(read_dpcnt(&mut buf.as_slice()).is_err());
    }
}
