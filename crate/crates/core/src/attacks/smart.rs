//! Smart trigger: mask-activity selection of tile and polarity, and the
//! seeded random walk that moves the square inside its tile.

use super::{polarity_pattern, trigger_side};
use crate::error::{Error, Result};
use crate::events::{polarity_grid, Dataset, FrameTensor, BINARIZE_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Half-open pixel bounds of one mask tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileRect {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl TileRect {
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
}

/// Per-tile activity and polarity histograms, averaged over samples.
/// Drawing `c` horizontal and vertical lines splits the image into
/// (c+1)^2 tiles, indexed row-major.
#[derive(Clone, Debug)]
pub struct MaskActivity {
    pub grid_lines: usize,
    pub height: usize,
    pub width: usize,
    /// Mean per sample of the count of non-background pixels (codes 1..3)
    /// over all frames, per tile.
    pub activity: Vec<f64>,
    /// Mean per sample of the pixel-code counts over all frames, per tile.
    pub histogram: Vec<[f64; 4]>,
}

impl MaskActivity {
    pub fn tiles_per_side(&self) -> usize {
        self.grid_lines + 1
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_per_side() * self.tiles_per_side()
    }

    pub fn tile_rect(&self, index: usize) -> TileRect {
        tile_rect(self.height, self.width, self.grid_lines, index)
    }
}

fn boundary(extent: usize, parts: usize, i: usize) -> usize {
    i * extent / parts
}

pub(crate) fn tile_rect(height: usize, width: usize, c: usize, index: usize) -> TileRect {
    let side = c + 1;
    let ty = index / side;
    let tx = index % side;
    TileRect {
        y0: boundary(height, side, ty),
        y1: boundary(height, side, ty + 1),
        x0: boundary(width, side, tx),
        x1: boundary(width, side, tx + 1),
    }
}

fn tile_of(height: usize, width: usize, c: usize, y: usize, x: usize) -> usize {
    let side = c + 1;
    // inverse of the boundary rule: tile i covers [i*extent/side, (i+1)*extent/side)
    let ty = (y * side + side - 1) / height; // upper bound guess, then correct
    let ty = correct_tile(height, side, y, ty);
    let tx = (x * side + side - 1) / width;
    let tx = correct_tile(width, side, x, tx);
    ty * side + tx
}

fn correct_tile(extent: usize, side: usize, pos: usize, guess: usize) -> usize {
    let mut t = guess.min(side - 1);
    while boundary(extent, side, t) > pos {
        t -= 1;
    }
    while boundary(extent, side, t + 1) <= pos {
        t += 1;
    }
    t
}

/// Sums polarity activity per tile over every sample and frame (binarized at
/// the default threshold), then averages over samples. Background pixels
/// (code 0) do not count toward activity but do appear in the histograms.
pub fn compute_mask_activity(dataset: &Dataset, c: usize) -> Result<MaskActivity> {
    if c == 0 {
        return Err(Error::Config("grid lines c must be >= 1".to_string()));
    }
    dataset.validate()?;
    let (t, _, h, w) = dataset.dims;
    let tiles = (c + 1) * (c + 1);
    let mut activity = vec![0.0f64; tiles];
    let mut histogram = vec![[0.0f64; 4]; tiles];
    for sample in &dataset.samples {
        for f in 0..t {
            let grid = polarity_grid(&sample.frames, f, BINARIZE_THRESHOLD)?;
            for y in 0..h {
                for x in 0..w {
                    let code = grid.at(y, x);
                    let tile = tile_of(h, w, c, y, x);
                    histogram[tile][code as usize] += 1.0;
                    if code != 0 {
                        activity[tile] += 1.0;
                    }
                }
            }
        }
    }
    let n = dataset.len() as f64;
    for v in &mut activity {
        *v /= n;
    }
    for hrow in &mut histogram {
        for v in hrow.iter_mut() {
            *v /= n;
        }
    }
    Ok(MaskActivity {
        grid_lines: c,
        height: h,
        width: w,
        activity,
        histogram,
    })
}

/// Chooses the trigger tile and polarity. `most_active` picks the argmax of
/// tile activity (else argmin); `least_polarity` picks the argmin of the
/// tile's code histogram (else argmax). Ties break toward the lowest tile
/// index, then the lowest polarity code.
pub fn select_smart(activity: &MaskActivity, most_active: bool, least_polarity: bool) -> (usize, u8) {
    let mut tile = 0usize;
    for (i, v) in activity.activity.iter().enumerate() {
        let better = if most_active {
            *v > activity.activity[tile]
        } else {
            *v < activity.activity[tile]
        };
        if better {
            tile = i;
        }
    }
    let hist = &activity.histogram[tile];
    let mut code = 0u8;
    for p in 1..4u8 {
        let better = if least_polarity {
            hist[p as usize] < hist[code as usize]
        } else {
            hist[p as usize] > hist[code as usize]
        };
        if better {
            code = p;
        }
    }
    (tile, code)
}

/// Positions of the smart trigger's random walk: starts uniformly inside the
/// tile, then moves by a step drawn from {-2..2}^2 per frame, clamped so the
/// square stays inside the tile.
pub fn smart_trajectory(
    tile: &TileRect,
    side: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if side > tile.height() || side > tile.width() {
        return Err(Error::Placement(format!(
            "square of side {} does not fit a {}x{} tile",
            side,
            tile.height(),
            tile.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y_max, x_max) = (tile.y1 - side, tile.x1 - side);
    let mut y = rng.gen_range(tile.y0..=y_max);
    let mut x = rng.gen_range(tile.x0..=x_max);
    let mut out = Vec::with_capacity(frames);
    out.push((y, x));
    for _ in 1..frames {
        let dy = rng.gen_range(-2i64..=2);
        let dx = rng.gen_range(-2i64..=2);
        y = ((y as i64 + dy).max(tile.y0 as i64) as usize).min(y_max);
        x = ((x as i64 + dx).max(tile.x0 as i64) as usize).min(x_max);
        out.push((y, x));
    }
    Ok(out)
}

/// Stamps the polarity square along a seeded random walk inside the tile.
pub fn apply_smart(
    frames: &FrameTensor,
    tile: &TileRect,
    polarity: u8,
    size: f64,
    seed: u64,
) -> Result<FrameTensor> {
    if !frames.is_normalized() {
        return Err(Error::Config("apply_smart requires normalized frames".to_string()));
    }
    let (t, _, h, _) = frames.dims();
    let side = trigger_side(h, size);
    let walk = smart_trajectory(tile, side, t, seed)?;
    let (off, on) = polarity_pattern(polarity);
    let mut out = frames.clone();
    for (f, (y0, x0)) in walk.iter().enumerate() {
        for y in *y0..*y0 + side {
            for x in *x0..*x0 + side {
                out.set(f, 0, y, x, off);
                out.set(f, 1, y, x, on);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{normalize, Sample};

    fn dataset_with_hot_pixel(y: usize, x: usize) -> Dataset {
        let mut samples = Vec::new();
        for _ in 0..3 {
            let mut f = FrameTensor::zeros(4, 2, 12, 12);
            for t in 0..4 {
                f.set(t, 1, y, x, 1.0);
            }
            samples.push(Sample {
                frames: normalize(&f),
                label: 0,
            });
        }
        Dataset {
            samples,
            num_classes: 4,
            dims: (4, 2, 12, 12),
            seed: 0,
        }
    }

    #[test]
    fn c2_gives_nine_tiles() {
        let ds = dataset_with_hot_pixel(0, 0);
        let act = compute_mask_activity(&ds, 2).unwrap();
        assert_eq!(act.num_tiles(), 9);
    }

    #[test]
    fn all_zero_dataset_has_zero_activity() {
        let mut ds = dataset_with_hot_pixel(0, 0);
        for s in &mut ds.samples {
            s.frames = normalize(&FrameTensor::zeros(4, 2, 12, 12));
        }
        let act = compute_mask_activity(&ds, 2).unwrap();
        assert!(act.activity.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_hot_pixel_concentrates_in_its_tile() {
        let ds = dataset_with_hot_pixel(1, 1); // tile 0
        let act = compute_mask_activity(&ds, 2).unwrap();
        assert!(act.activity[0] > 0.0);
        for (i, v) in act.activity.iter().enumerate().skip(1) {
            assert_eq!(*v, 0.0, "tile {} unexpectedly active", i);
        }
        // 4 frames, one pixel per frame, averaged over samples -> 4.0
        assert_eq!(act.activity[0], 4.0);
    }

    #[test]
    fn center_concentration_selects_center_tile() {
        let ds = dataset_with_hot_pixel(6, 6); // middle tile of 3x3
        let act = compute_mask_activity(&ds, 2).unwrap();
        let (tile, _) = select_smart(&act, true, true);
        assert_eq!(tile, 4);
    }

    #[test]
    fn least_polarity_breaks_ties_to_lowest_code() {
        let ds = dataset_with_hot_pixel(0, 0);
        let mut act = compute_mask_activity(&ds, 2).unwrap();
        act.histogram[0] = [100.0, 5.0, 0.0, 0.0];
        act.activity = vec![0.0; 9];
        act.activity[0] = 1.0;
        let (tile, code) = select_smart(&act, true, true);
        assert_eq!(tile, 0);
        assert_eq!(code, 2); // count 0, ties with p3, lowest code wins
    }

    #[test]
    fn uniform_activity_ties_to_tile_zero() {
        let ds = dataset_with_hot_pixel(0, 0);
        let mut act = compute_mask_activity(&ds, 2).unwrap();
        act.activity = vec![1.0; 9];
        let (tile, _) = select_smart(&act, true, true);
        assert_eq!(tile, 0);
    }

    #[test]
    fn trajectory_is_deterministic_and_smooth() {
        let tile = TileRect {
            y0: 4,
            y1: 12,
            x0: 4,
            x1: 12,
        };
        let a = smart_trajectory(&tile, 3, 16, 99).unwrap();
        let b = smart_trajectory(&tile, 3, 16, 99).unwrap();
        assert_eq!(a, b);
        for pair in a.windows(2) {
            let dy = pair[1].0 as i64 - pair[0].0 as i64;
            let dx = pair[1].1 as i64 - pair[0].1 as i64;
            assert!(dy.abs() <= 2 && dx.abs() <= 2, "step ({}, {})", dy, dx);
        }
        for (y, x) in &a {
            assert!(*y >= 4 && *y + 3 <= 12);
            assert!(*x >= 4 && *x + 3 <= 12);
        }
    }

    #[test]
    fn exact_fit_tile_keeps_trigger_stationary() {
        let tile = TileRect {
            y0: 2,
            y1: 5,
            x0: 7,
            x1: 10,
        };
        let walk = smart_trajectory(&tile, 3, 8, 5).unwrap();
        assert!(walk.iter().all(|p| *p == (2, 7)));
    }

    #[test]
    fn oversized_square_rejected() {
        let tile = TileRect {
            y0: 0,
            y1: 4,
            x0: 0,
            x1: 4,
        };
        assert!(matches!(
            smart_trajectory(&tile, 5, 4, 0),
            Err(Error::Placement(_))
        ));
    }
}
