//! Synthetic motion dataset: a square moving in one of four directions,
//! ON events on the leading edge, OFF events on the trailing edge, plus
//! independent background noise. Deterministic given the seed.

use super::{bin_events, normalize, Dataset, Event, EventStream, Sample};
use crate::derive_seed;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NUM_DIRECTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub fn from_label(label: usize) -> Direction {
        match label % NUM_DIRECTIONS {
            0 => Direction::Right,
            1 => Direction::Left,
            2 => Direction::Down,
            _ => Direction::Up,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shape_side: usize,
    pub step: usize,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 32,
            width: 32,
            frames: 16,
            shape_side: 3,
            step: 1,
            noise: 0.01,
            n_train: 1000,
            n_test: 200,
        }
    }
}

impl SynthConfig {
    fn travel(&self) -> usize {
        self.shape_side + self.step * (self.frames - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Config("height, width and frames must be >= 1".to_string()));
        }
        if self.shape_side == 0 || self.step == 0 {
            return Err(Error::Config("shape side and step must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} outside [0,1)", self.noise)));
        }
        let travel = self.travel();
        if travel > self.width || travel > self.height || self.shape_side > self.height || self.shape_side > self.width {
            return Err(Error::Config(format!(
                "degenerate geometry: side {} with step {} over {} frames travels {} px, image is {}x{}",
                self.shape_side, self.step, self.frames, travel, self.height, self.width
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Placement of one sample's moving square; exposed so tests can rebuild the
/// expected frames from first principles.
#[derive(Clone, Copy, Debug)]
pub struct SampleGeometry {
    pub direction: Direction,
    /// Top-left corner of the square at frame 0.
    pub x0: usize,
    pub y0: usize,
}

/// Square position at frame `t` (top-left corner).
pub fn square_at(geo: &SampleGeometry, cfg: &SynthConfig, t: usize) -> (usize, usize) {
    let d = cfg.step * t;
    match geo.direction {
        Direction::Right => (geo.x0 + d, geo.y0),
        Direction::Left => (geo.x0 - d, geo.y0),
        Direction::Down => (geo.x0, geo.y0 + d),
        Direction::Up => (geo.x0, geo.y0 - d),
    }
}

/// Leading and trailing edge cells of the square at frame `t`:
/// `(on_cells, off_cells)` as (x, y) lists.
pub fn edge_cells(
    geo: &SampleGeometry,
    cfg: &SynthConfig,
    t: usize,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let side = cfg.shape_side;
    let (xl, yt) = square_at(geo, cfg, t);
    let (xr, yb) = (xl + side - 1, yt + side - 1);
    let mut on = Vec::with_capacity(side);
    let mut off = Vec::with_capacity(side);
    match geo.direction {
        Direction::Right => {
            for y in yt..=yb {
                on.push((xr, y));
                off.push((xl, y));
            }
        }
        Direction::Left => {
            for y in yt..=yb {
                on.push((xl, y));
                off.push((xr, y));
            }
        }
        Direction::Down => {
            for x in xl..=xr {
                on.push((x, yb));
                off.push((x, yt));
            }
        }
        Direction::Up => {
            for x in xl..=xr {
                on.push((x, yt));
                off.push((x, yb));
            }
        }
    }
    (on, off)
}

/// Deterministic geometry for sample `index` of stream `stream`
/// (0 = train, 1 = test). The direction is the label.
pub fn sample_geometry(
    cfg: &SynthConfig,
    seed: u64,
    stream: u64,
    index: usize,
) -> SampleGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index as u64));
    let label = index % NUM_DIRECTIONS;
    let direction = Direction::from_label(label);
    let travel = cfg.travel();
    let side = cfg.shape_side;
    let (x0, y0) = match direction {
        Direction::Right => (
            rng.gen_range(0..=cfg.width - travel),
            rng.gen_range(0..=cfg.height - side),
        ),
        Direction::Left => (
            rng.gen_range(travel - side..=cfg.width - side),
            rng.gen_range(0..=cfg.height - side),
        ),
        Direction::Down => (
            rng.gen_range(0..=cfg.width - side),
            rng.gen_range(0..=cfg.height - travel),
        ),
        Direction::Up => (
            rng.gen_range(0..=cfg.width - side),
            rng.gen_range(travel - side..=cfg.height - side),
        ),
    };
    SampleGeometry { direction, x0, y0 }
}

const FRAME_US: u64 = 1000;

fn build_sample(cfg: &SynthConfig, seed: u64, stream: u64, index: usize) -> Result<Sample> {
    let geo = sample_geometry(cfg, seed, stream, index);
    // Separate RNG stream for noise so geometry stays stable across noise rates.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream + 2, index as u64));
    let mut events = Vec::new();
    for t in 0..cfg.frames {
        let t_us = t as u64 * FRAME_US;
        let (on, off) = edge_cells(&geo, cfg, t);
        for (x, y) in on {
            events.push(Event {
                t_us,
                x: x as u16,
                y: y as u16,
                ch: 1,
            });
        }
        for (x, y) in off {
            events.push(Event {
                t_us,
                x: x as u16,
                y: y as u16,
                ch: 0,
            });
        }
        if cfg.noise > 0.0 {
            for ch in 0..2u8 {
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if noise_rng.gen::<f64>() < cfg.noise {
                            events.push(Event {
                                t_us,
                                x: x as u16,
                                y: y as u16,
                                ch,
                            });
                        }
                    }
                }
            }
        }
    }
    let stream_data = EventStream {
        events,
        height: cfg.height,
        width: cfg.width,
        duration_us: cfg.frames as u64 * FRAME_US,
    };
    let frames = normalize(&bin_events(&stream_data, cfg.frames)?);
    Ok(Sample {
        frames,
        label: index % NUM_DIRECTIONS,
    })
}

/// Generates (train, test) datasets of moving squares. Fully deterministic
/// given the seed; frames come back normalized.
pub fn synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let dims = (cfg.frames, 2, cfg.height, cfg.width);
    let mk = |stream: u64, n: usize| -> Result<Dataset> {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            samples.push(build_sample(cfg, seed, stream, i)?);
        }
        Ok(Dataset {
            samples,
            num_classes: NUM_DIRECTIONS,
            dims,
            seed,
        })
    };
    Ok((mk(0, cfg.n_train)?, mk(1, cfg.n_test)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            height: 16,
            width: 16,
            frames: 4,
            shape_side: 3,
            step: 2,
            noise: 0.0,
            n_train: 8,
            n_test: 4,
        }
    }

    #[test]
    fn leading_edge_column_matches_hand_geometry() {
        // direction right, step 2: frame t's ON column is x0 + side + 2t - 1.
        let cfg = small_cfg();
        let (train, _) = synth_dataset(&cfg, 11).unwrap();
        let geo = sample_geometry(&cfg, 11, 0, 0);
        assert_eq!(geo.direction, Direction::Right);
        let s = &train.samples[0];
        for t in 0..cfg.frames {
            let col = geo.x0 + cfg.shape_side + 2 * t - 1;
            for y in geo.y0..geo.y0 + cfg.shape_side {
                assert!(
                    s.frames.at(t, 1, y, col) > 0.0,
                    "missing ON event at frame {} col {} row {}",
                    t,
                    col,
                    y
                );
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let cfg = small_cfg();
        let (a_train, a_test) = synth_dataset(&cfg, 99).unwrap();
        let (b_train, b_test) = synth_dataset(&cfg, 99).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn noiseless_support_stays_in_corridor() {
        // With noise = 0, activity outside the travel corridor is exactly zero
        // (brute-force sum over cells).
        let cfg = small_cfg();
        let (train, _) = synth_dataset(&cfg, 5).unwrap();
        for (i, s) in train.samples.iter().enumerate() {
            let geo = sample_geometry(&cfg, 5, 0, i);
            let travel = cfg.shape_side + cfg.step * (cfg.frames - 1);
            // corridor bounding box
            let (bx, by, bw, bh) = match geo.direction {
                Direction::Right => (geo.x0, geo.y0, travel, cfg.shape_side),
                Direction::Left => (geo.x0 + cfg.shape_side - travel, geo.y0, travel, cfg.shape_side),
                Direction::Down => (geo.x0, geo.y0, cfg.shape_side, travel),
                Direction::Up => (geo.x0, geo.y0 + cfg.shape_side - travel, cfg.shape_side, travel),
            };
            for t in 0..cfg.frames {
                for ch in 0..2 {
                    for y in 0..cfg.height {
                        for x in 0..cfg.width {
                            let inside = x >= bx && x < bx + bw && y >= by && y < by + bh;
                            if !inside {
                                assert_eq!(
                                    s.frames.at(t, ch, y, x),
                                    0.0,
                                    "sample {} stray activity at t={} ch={} ({}, {})",
                                    i,
                                    t,
                                    ch,
                                    x,
                                    y
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let mut cfg = small_cfg();
        cfg.step = 10; // travel = 3 + 30 > 16
        assert!(matches!(synth_dataset(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn labels_are_balanced_round_robin() {
        let cfg = small_cfg();
        let (train, _) = synth_dataset(&cfg, 3).unwrap();
        let mut counts = [0usize; 4];
        for s in &train.samples {
            counts[s.label] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn samples_are_normalized() {
        let cfg = SynthConfig {
            noise: 0.05,
            ..small_cfg()
        };
        let (train, test) = synth_dataset(&cfg, 1).unwrap();
        for s in train.samples.iter().chain(&test.samples) {
            assert!(s.frames.is_normalized());
            assert!(s.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
