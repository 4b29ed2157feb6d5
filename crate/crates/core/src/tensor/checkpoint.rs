//! CKP1 checkpoint format: a flat list of tensors.
//!
//! Layout: magic "CKP1", little-endian u32 tensor count, then per tensor a
//! u32 rank, `rank` u32 dims, and the elements as little-endian f32.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKP_MAGIC: &[u8; 4] = b"CKP1";

pub fn write_tensors<S: Scalar>(path: &Path, tensors: &[Tensor<S>]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(CKP_MAGIC)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&(v.into_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Format {
            offset: at,
            detail: format!("truncated while reading {}", what),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32_at(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

pub fn read_tensors<S: Scalar>(path: &Path) -> Result<Vec<Tensor<S>>> {
    let mut r = Counting {
        inner: BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CKP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {:?}, want \"CKP1\"", magic),
        });
    }
    let count = r.u32_at("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let rank = r.u32_at("rank")? as usize;
        if rank > 8 {
            return Err(Error::Format {
                offset: r.offset - 4,
                detail: format!("tensor {} has implausible rank {}", i, rank),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32_at("dim")? as usize;
            numel = numel.checked_mul(d).ok_or(Error::Format {
                offset: r.offset - 4,
                detail: format!("tensor {} dimension overflow", i),
            })?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact_at(&mut buf, &format!("tensor {} data", i))?;
            data.push(S::from_f64(f32::from_le_bytes(buf) as f64));
        }
        out.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckp");
        let tensors = vec![
            Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 0.25, 9.0]).unwrap(),
            Tensor::<f32>::scalar(42.0),
        ];
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors::<f32>(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].shape(), &[2, 3]);
        assert_eq!(back[0].data(), tensors[0].data());
        assert_eq!(back[1].data(), tensors[1].data());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckp");
        std::fs::write(&path, b"XXXX\x00\x00\x00\x00").unwrap();
        match read_tensors::<f32>(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected bad-magic format error, got {:?}", other.map(|_| ())),
        }
    }
}
