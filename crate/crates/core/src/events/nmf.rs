//! NMF1 binary dataset format.
//!
//! Layout: magic "NMF1" (4 bytes), little-endian u32 fields num_samples,
//! num_classes, T, P, H, W, then per sample a u32 label followed by
//! T*P*H*W little-endian 32-bit floats. Round trips are bit-exact.
//!
//! The file carries no normalized flag; on read a sample whose maximum entry
//! is <= 1 is treated as normalized.

use super::{Dataset, FrameTensor, Sample};
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const NMF_MAGIC: &[u8; 4] = b"NMF1";

pub fn write_frames(path: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    let (t, p, h, w) = dataset.dims;
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(NMF_MAGIC)?;
        for v in [
            dataset.samples.len(),
            dataset.num_classes,
            t,
            p,
            h,
            w,
        ] {
            if v > u32::MAX as usize {
                return Err(Error::Format {
                    offset: 4,
                    detail: format!("field {} overflows u32", v),
                });
            }
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in &dataset.samples {
            out.write_all(&(s.label as u32).to_le_bytes())?;
            for v in s.frames.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
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

pub fn read_frames(path: &Path) -> Result<Dataset> {
    let mut r = Counting {
        inner: BufReader::new(std::fs::File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != NMF_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "bad magic {:?}, want \"NMF1\"",
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let num_samples = r.u32_at("num_samples")? as usize;
    let num_classes = r.u32_at("num_classes")? as usize;
    let t = r.u32_at("T")? as usize;
    let p = r.u32_at("P")? as usize;
    let h = r.u32_at("H")? as usize;
    let w = r.u32_at("W")? as usize;
    let numel = t
        .checked_mul(p)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or(Error::Format {
            offset: 8,
            detail: "sample dimension product overflows".to_string(),
        })?;
    if numel == 0 {
        return Err(Error::Format {
            offset: 8,
            detail: format!("degenerate dims ({}, {}, {}, {})", t, p, h, w),
        });
    }

    let mut samples = Vec::with_capacity(num_samples);
    let mut buf4 = [0u8; 4];
    for i in 0..num_samples {
        let label = r
            .u32_at(&format!("label of sample {}", i))
            .map_err(|e| tag_sample(e, i))? as usize;
        let mut data = Vec::with_capacity(numel);
        let mut raw = vec![0u8; numel * 4];
        r.read_exact_at(&mut raw, &format!("frames of sample {}", i))
            .map_err(|e| tag_sample(e, i))?;
        for c in raw.chunks_exact(4) {
            buf4.copy_from_slice(c);
            data.push(f32::from_le_bytes(buf4));
        }
        let max = data.iter().cloned().fold(0.0f32, f32::max);
        samples.push(Sample {
            frames: FrameTensor::from_data((t, p, h, w), data, max <= 1.0)?,
            label,
        });
    }
    let ds = Dataset {
        samples,
        num_classes,
        dims: (t, p, h, w),
        seed: 0,
    };
    ds.validate()?;
    Ok(ds)
}

fn tag_sample(e: Error, index: usize) -> Error {
    match e {
        Error::Format { offset, detail } => Error::Format {
            offset,
            detail: format!("{} (sample {})", detail, index),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{synth_dataset, SynthConfig};

    fn tiny() -> Dataset {
        let cfg = SynthConfig {
            height: 8,
            width: 8,
            frames: 3,
            shape_side: 2,
            step: 2,
            noise: 0.1,
            n_train: 5,
            n_test: 2,
        };
        synth_dataset(&cfg, 77).unwrap().0
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nmf");
        let d = tiny();
        write_frames(&path, &d).unwrap();
        let back = read_frames(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nmf");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        match read_frames(&path) {
            Err(Error::Format { offset: 0, detail }) => assert!(detail.contains("magic")),
            other => panic!("want bad-magic error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncation_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.nmf");
        let d = tiny();
        write_frames(&path, &d).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // cut into the middle of the second sample
        let header = 4 + 6 * 4;
        let per_sample = 4 + d.dims.0 * d.dims.1 * d.dims.2 * d.dims.3 * 4;
        let cut = header + per_sample + per_sample / 2;
        let trunc = path.with_extension("cut");
        std::fs::write(&trunc, &bytes[..cut]).unwrap();
        match read_frames(&trunc) {
            Err(Error::Format { detail, .. }) => {
                assert!(detail.contains("sample 1"), "detail: {}", detail)
            }
            other => panic!("want truncation error, got {:?}", other.map(|_| ())),
        }
    }
}
