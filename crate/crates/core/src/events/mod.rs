//! Neuromorphic data model: event streams, frame binning, polarity
//! decomposition, synthetic dataset generation and the NMF1 file format.

mod nmf;
mod synth;

pub use nmf::{read_frames, write_frames, NMF_MAGIC};
pub use synth::{synth_dataset, Direction, SynthConfig};

use crate::error::{Error, Result};

/// Default binarize threshold for mapping normalized counts to discrete
/// polarity codes.
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// One change event from a dynamic vision sensor.
/// `ch` is the polarity channel: 0 = OFF (brightness decrease), 1 = ON.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    pub ch: u8,
}

/// A time-ordered sequence of events from one sensor.
#[derive(Clone, Debug)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
    pub duration_us: u64,
}

impl EventStream {
    pub fn validate(&self) -> Result<()> {
        let mut last = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.t_us < last {
                return Err(Error::InvalidStream(format!(
                    "event {} timestamp {} decreases below {}",
                    i, e.t_us, last
                )));
            }
            last = e.t_us;
            if (e.x as usize) >= self.width || (e.y as usize) >= self.height {
                return Err(Error::InvalidStream(format!(
                    "event {} at ({}, {}) outside {}x{} sensor",
                    i, e.x, e.y, self.width, self.height
                )));
            }
            if e.ch > 1 {
                return Err(Error::InvalidStream(format!(
                    "event {} has channel {}, want 0 (OFF) or 1 (ON)",
                    i, e.ch
                )));
            }
        }
        if let Some(e) = self.events.last() {
            if self.duration_us < e.t_us {
                return Err(Error::InvalidStream(format!(
                    "duration {} shorter than last timestamp {}",
                    self.duration_us, e.t_us
                )));
            }
        }
        Ok(())
    }
}

/// Binned event counts of one sample: a (T, P, H, W) tensor of non-negative
/// f32 values, P = 2 polarity channels (0 = OFF, 1 = ON).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    dims: (usize, usize, usize, usize),
    data: Vec<f32>,
    normalized: bool,
}

impl FrameTensor {
    pub fn zeros(t: usize, p: usize, h: usize, w: usize) -> Self {
        FrameTensor {
            dims: (t, p, h, w),
            data: vec![0.0; t * p * h * w],
            normalized: false,
        }
    }

    pub fn from_data(dims: (usize, usize, usize, usize), data: Vec<f32>, normalized: bool) -> Result<Self> {
        let numel = dims.0 * dims.1 * dims.2 * dims.3;
        if numel != data.len() {
            return Err(Error::Dimension {
                axis: "numel",
                detail: format!("dims {:?} want {} values, got {}", dims, numel, data.len()),
            });
        }
        Ok(FrameTensor {
            dims,
            data,
            normalized,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn index(&self, f: usize, ch: usize, y: usize, x: usize) -> usize {
        let (_, p, h, w) = self.dims;
        ((f * p + ch) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, f: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(f, ch, y, x)]
    }

    #[inline]
    pub fn set(&mut self, f: usize, ch: usize, y: usize, x: usize, v: f32) {
        let i = self.index(f, ch, y, x);
        self.data[i] = v;
    }

    pub fn total(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum()
    }
}

/// A labeled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: FrameTensor,
    pub label: usize,
}

/// A homogeneous collection of samples. `seed` records provenance for
/// synthetic data; it is not serialized and not part of equality.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub dims: (usize, usize, usize, usize),
    pub seed: u64,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.num_classes == other.num_classes
            && self.dims == other.dims
    }
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.frames.dims() != self.dims {
                return Err(Error::Dimension {
                    axis: "sample",
                    detail: format!(
                        "sample {} has dims {:?}, dataset dims {:?}",
                        i,
                        s.frames.dims(),
                        self.dims
                    ),
                });
            }
            if s.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "sample {} label {} outside {} classes",
                    i, s.label, self.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Discrete polarity codes of one frame: 0 = background, 1 = OFF only,
/// 2 = ON only, 3 = both channels active.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolarityGrid {
    pub codes: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl PolarityGrid {
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.codes[y * self.width + x]
    }

    /// Pixel count per code; the four counts partition the image.
    pub fn code_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &c in &self.codes {
            counts[c as usize] += 1;
        }
        counts
    }
}

/// Bins an event stream into `t_frames` equal time intervals.
/// Event at time `t` lands in frame `min(floor(t*T/duration), T-1)`.
/// Total count is conserved exactly.
pub fn bin_events(stream: &EventStream, t_frames: usize) -> Result<FrameTensor> {
    if t_frames == 0 {
        return Err(Error::Config("frame count T must be >= 1".to_string()));
    }
    stream.validate()?;
    if stream.duration_us == 0 && !stream.events.is_empty() {
        return Err(Error::InvalidStream(
            "zero duration with non-empty events".to_string(),
        ));
    }
    let mut out = FrameTensor::zeros(t_frames, 2, stream.height, stream.width);
    for e in &stream.events {
        let f = ((e.t_us as u128 * t_frames as u128) / stream.duration_us.max(1) as u128) as usize;
        let f = f.min(t_frames - 1);
        let i = out.index(f, e.ch as usize, e.y as usize, e.x as usize);
        out.data[i] += 1.0;
    }
    Ok(out)
}

/// Divides every entry by the per-sample maximum (1 if the max is 0) and sets
/// the normalized flag. Idempotent and order-preserving.
pub fn normalize(frames: &FrameTensor) -> FrameTensor {
    let max = frames.data.iter().cloned().fold(0.0f32, f32::max);
    let div = if max > 0.0 { max } else { 1.0 };
    FrameTensor {
        dims: frames.dims,
        data: frames.data.iter().map(|v| v / div).collect(),
        normalized: true,
    }
}

/// Decomposes frame `t` into discrete polarity codes by binarizing both
/// channels at threshold `b`: code = [OFF >= b] + 2*[ON >= b].
pub fn polarity_grid(frames: &FrameTensor, t: usize, b: f32) -> Result<PolarityGrid> {
    if !frames.normalized {
        return Err(Error::Config(
            "polarity_grid requires normalized frames".to_string(),
        ));
    }
    let (tf, _, h, w) = frames.dims;
    if t >= tf {
        return Err(Error::Dimension {
            axis: "frame",
            detail: format!("frame index {} outside 0..{}", t, tf),
        });
    }
    if !(0.0 < b && b < 1.0) {
        return Err(Error::Config(format!("binarize threshold {} outside (0,1)", b)));
    }
    let mut codes = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let off = frames.at(t, 0, y, x) >= b;
            let on = frames.at(t, 1, y, x) >= b;
            codes[y * w + x] = (off as u8) + 2 * (on as u8);
        }
    }
    Ok(PolarityGrid {
        codes,
        height: h,
        width: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream_of(events: Vec<Event>, h: usize, w: usize, dur: u64) -> EventStream {
        EventStream {
            events,
            height: h,
            width: w,
            duration_us: dur,
        }
    }

    #[test]
    fn equal_interval_binning() {
        // 4 events at t = {0,4,8,12} us, duration 16, T = 4, all at (1,1,ch=1):
        // one count per frame at [f,1,1,1].
        let ev = [0u64, 4, 8, 12]
            .iter()
            .map(|&t| Event {
                t_us: t,
                x: 1,
                y: 1,
                ch: 1,
            })
            .collect();
        let frames = bin_events(&stream_of(ev, 4, 4, 16), 4).unwrap();
        for f in 0..4 {
            assert_eq!(frames.at(f, 1, 1, 1), 1.0);
        }
        assert_eq!(frames.total(), 4.0);
    }

    #[test]
    fn empty_stream_bins_to_zeros() {
        let frames = bin_events(&stream_of(vec![], 8, 8, 0), 16).unwrap();
        assert_eq!(frames.dims(), (16, 2, 8, 8));
        assert!(frames.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn last_microsecond_lands_in_last_frame() {
        let ev = vec![Event {
            t_us: 15,
            x: 0,
            y: 0,
            ch: 0,
        }];
        let frames = bin_events(&stream_of(ev, 2, 2, 16), 16).unwrap();
        assert_eq!(frames.at(15, 0, 0, 0), 1.0);
    }

    #[test]
    fn zero_duration_with_events_is_invalid() {
        let ev = vec![Event {
            t_us: 0,
            x: 0,
            y: 0,
            ch: 0,
        }];
        assert!(matches!(
            bin_events(&stream_of(ev, 2, 2, 0), 4),
            Err(Error::InvalidStream(_))
        ));
    }

    #[test]
    fn normalize_zero_and_half() {
        let z = FrameTensor::zeros(2, 2, 2, 2);
        let nz = normalize(&z);
        assert!(nz.is_normalized());
        assert!(nz.data().iter().all(|v| *v == 0.0));

        let mut f = FrameTensor::zeros(1, 2, 1, 2);
        f.set(0, 0, 0, 0, 4.0);
        f.set(0, 1, 0, 1, 2.0);
        let n = normalize(&f);
        assert_eq!(n.at(0, 0, 0, 0), 1.0);
        assert_eq!(n.at(0, 1, 0, 1), 0.5);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut f = FrameTensor::zeros(1, 2, 2, 2);
        f.set(0, 0, 0, 0, 3.0);
        f.set(0, 1, 1, 1, 7.0);
        let once = normalize(&f);
        let twice = normalize(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn polarity_codes() {
        let mut f = FrameTensor::zeros(1, 2, 1, 3);
        // pixel 0: nothing -> code 0; pixel 1: OFF only -> 1; pixel 2: both -> 3
        f.set(0, 0, 0, 1, 1.0);
        f.set(0, 0, 0, 2, 0.6);
        f.set(0, 1, 0, 2, 0.7);
        let mut f = f;
        f.normalized = true; // values already in [0,1]
        let g = polarity_grid(&f, 0, 0.5).unwrap();
        assert_eq!(g.at(0, 0), 0);
        assert_eq!(g.at(0, 1), 1);
        assert_eq!(g.at(0, 2), 3);
    }

    #[test]
    fn polarity_grid_rejects_unnormalized() {
        let f = FrameTensor::zeros(1, 2, 2, 2);
        assert!(polarity_grid(&f, 0, 0.5).is_err());
    }

    #[test]
    fn polarity_counts_partition_pixels() {
        let mut f = FrameTensor::zeros(1, 2, 4, 4);
        f.set(0, 0, 0, 0, 1.0);
        f.set(0, 1, 2, 3, 1.0);
        f.normalized = true;
        let g = polarity_grid(&f, 0, 0.5).unwrap();
        assert_eq!(g.code_counts().iter().sum::<usize>(), 16);
    }
}
