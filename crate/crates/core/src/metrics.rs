//! Attack-quality and stealthiness measurement: ASR, clean-accuracy
//! degradation, windowed SSIM and MSE between clean and triggered frames.

use crate::error::{Error, Result};
use crate::events::{Dataset, FrameTensor};
use crate::snn::{predict, SpikingNet};
use crate::tensor::Scalar;

/// Attack summary: V1 is the clean baseline accuracy, V2 the clean accuracy
/// of the attacked model.
#[derive(Clone, Debug)]
pub struct AttackReport {
    pub baseline_acc: f64,
    pub clean_acc: f64,
    pub asr: f64,
    pub degradation_pct: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct StealthReport {
    pub mean_ssim: f64,
    pub min_ssim: f64,
    pub mean_mse: f64,
    /// SSIM per frame index, averaged over the sampled pairs.
    pub per_frame_ssim: Vec<f64>,
}

/// Attack success rate: applies the trigger to every test sample whose true
/// label differs from the target and returns the fraction classified as the
/// target. `apply` receives the sample and its index (for per-sample
/// trigger randomness).
pub fn asr<S: Scalar>(
    net: &SpikingNet<S>,
    test: &Dataset,
    apply: &dyn Fn(&FrameTensor, usize) -> Result<FrameTensor>,
    target: usize,
) -> Result<f64> {
    let mut triggered = Vec::new();
    for (i, s) in test.samples.iter().enumerate() {
        if s.label == target {
            continue;
        }
        triggered.push(crate::events::Sample {
            frames: apply(&s.frames, i)?,
            label: s.label,
        });
    }
    if triggered.is_empty() {
        return Err(Error::UndefinedAsr);
    }
    let ds = Dataset {
        samples: triggered,
        num_classes: test.num_classes,
        dims: test.dims,
        seed: test.seed,
    };
    let preds = predict(net, &ds)?;
    let hits = preds.iter().filter(|p| **p == target).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Clean accuracy degradation in percent: (V2 - V1) / V1 * 100.
/// Negative means the attack cost accuracy.
pub fn degradation(v1: f64, v2: f64) -> Result<f64> {
    if v1 <= 0.0 {
        return Err(Error::Config(format!(
            "degradation undefined for baseline accuracy {}",
            v1
        )));
    }
    Ok((v2 - v1) / v1 * 100.0)
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01; // (0.01 L)^2 with L = 1
const SSIM_C2: f64 = 0.03 * 0.03;

/// Summed-area table with one row/col of zero padding.
fn sat(values: &[f32], h: usize, w: usize, f: impl Fn(f32) -> f64) -> Vec<f64> {
    let mut t = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            t[(y + 1) * (w + 1) + (x + 1)] = f(values[y * w + x])
                + t[y * (w + 1) + (x + 1)]
                + t[(y + 1) * (w + 1) + x]
                - t[y * (w + 1) + x];
        }
    }
    t
}

fn sat_sum(t: &[f64], w: usize, y0: usize, x0: usize, side: usize) -> f64 {
    let (y1, x1) = (y0 + side, x0 + side);
    t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0]
}

fn sat2(a: &[f32], b: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            let v = a[y * w + x] as f64 * b[y * w + x] as f64;
            t[(y + 1) * (w + 1) + (x + 1)] =
                v + t[y * (w + 1) + (x + 1)] + t[(y + 1) * (w + 1) + x] - t[y * (w + 1) + x];
        }
    }
    t
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let sa = sat(a, h, w, |v| v as f64);
    let sb = sat(b, h, w, |v| v as f64);
    let saa = sat2(a, a, h, w);
    let sbb = sat2(b, b, h, w);
    let sab = sat2(a, b, h, w);

    let win = SSIM_WINDOW;
    let area = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - win) {
        for x0 in 0..=(w - win) {
            let mu_a = sat_sum(&sa, w, y0, x0, win) / area;
            let mu_b = sat_sum(&sb, w, y0, x0, win) / area;
            let var_a = sat_sum(&saa, w, y0, x0, win) / area - mu_a * mu_a;
            let var_b = sat_sum(&sbb, w, y0, x0, win) / area - mu_b * mu_b;
            let cov = sat_sum(&sab, w, y0, x0, win) / area - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    total / count as f64
}

/// Per-frame SSIM between two normalized frame tensors: windowed (8x8,
/// stride 1, L = 1) per channel, averaged over windows then channels.
pub fn ssim_per_frame(x: &FrameTensor, xh: &FrameTensor) -> Result<Vec<f64>> {
    if x.dims() != xh.dims() {
        return Err(Error::Dimension {
            axis: "frames",
            detail: format!("dims {:?} vs {:?}", x.dims(), xh.dims()),
        });
    }
    if !x.is_normalized() || !xh.is_normalized() {
        return Err(Error::Config("ssim requires normalized frames".to_string()));
    }
    let (t, p, h, w) = x.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension {
            axis: "window",
            detail: format!("{}x{} smaller than the {} px SSIM window", h, w, SSIM_WINDOW),
        });
    }
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let mut acc = 0.0;
        for ch in 0..p {
            let start = x.index(f, ch, 0, 0);
            let a = &x.data()[start..start + h * w];
            let b = &xh.data()[start..start + h * w];
            acc += ssim_plane(a, b, h, w);
        }
        out.push(acc / p as f64);
    }
    Ok(out)
}

/// Mean SSIM over frames (the paper's frame-averaged stealthiness score).
pub fn ssim_frames(x: &FrameTensor, xh: &FrameTensor) -> Result<f64> {
    let per = ssim_per_frame(x, xh)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Mean over all cells of (x - x_hat)^2.
pub fn mse_frames(x: &FrameTensor, xh: &FrameTensor) -> Result<f64> {
    if x.dims() != xh.dims() {
        return Err(Error::Dimension {
            axis: "frames",
            detail: format!("dims {:?} vs {:?}", x.dims(), xh.dims()),
        });
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(xh.data())
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    Ok(total / x.data().len() as f64)
}

/// Stealth summary over clean/triggered sample pairs.
pub fn stealth_report(pairs: &[(FrameTensor, FrameTensor)]) -> Result<StealthReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = pairs[0].0.dims().0;
    let mut per_frame = vec![0.0f64; t];
    let mut mean_ssim = 0.0;
    let mut min_ssim = f64::INFINITY;
    let mut mean_mse = 0.0;
    for (x, xh) in pairs {
        let per = ssim_per_frame(x, xh)?;
        let s = per.iter().sum::<f64>() / per.len() as f64;
        mean_ssim += s;
        min_ssim = min_ssim.min(s);
        mean_mse += mse_frames(x, xh)?;
        for (acc, v) in per_frame.iter_mut().zip(&per) {
            *acc += v / pairs.len() as f64;
        }
    }
    Ok(StealthReport {
        mean_ssim: mean_ssim / pairs.len() as f64,
        min_ssim,
        mean_mse: mean_mse / pairs.len() as f64,
        per_frame_ssim: per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(seed: u64) -> FrameTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..2 * 2 * 12 * 12).map(|_| rng.gen::<f32>()).collect();
        FrameTensor::from_data((2, 2, 12, 12), data, true).unwrap()
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = random_frames(1);
        let s = ssim_frames(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "ssim(x,x) = {}", s);
    }

    #[test]
    fn ssim_constant_frames_collapse_to_formula() {
        // constant frames a vs b with zero variance: (2ab+c1)/(a^2+b^2+c1)
        let a = 0.6f32;
        let b = 0.3f32;
        let xa = FrameTensor::from_data((1, 1, 8, 8), vec![a; 64], true).unwrap();
        let xb = FrameTensor::from_data((1, 1, 8, 8), vec![b; 64], true).unwrap();
        let want = (2.0 * a as f64 * b as f64 + SSIM_C1) / ((a as f64).powi(2) + (b as f64).powi(2) + SSIM_C1);
        let got = ssim_frames(&xa, &xb).unwrap();
        assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
    }

    #[test]
    fn ssim_is_symmetric() {
        let x = random_frames(2);
        let y = random_frames(3);
        let a = ssim_frames(&x, &y).unwrap();
        let b = ssim_frames(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mse_identity_and_offset() {
        let x = random_frames(4);
        assert_eq!(mse_frames(&x, &x).unwrap(), 0.0);

        let gamma = 0.05f32;
        let shifted: Vec<f32> = x.data().iter().map(|v| v + gamma).collect();
        let xh = FrameTensor::from_data(x.dims(), shifted, false).unwrap();
        let got = mse_frames(&x, &xh).unwrap();
        assert!((got - (gamma as f64).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn mse_matches_brute_force_double_loop() {
        let x = FrameTensor::from_data(
            (2, 2, 2, 2),
            (0..16).map(|i| i as f32 / 16.0).collect(),
            true,
        )
        .unwrap();
        let y = FrameTensor::from_data(
            (2, 2, 2, 2),
            (0..16).map(|i| (15 - i) as f32 / 16.0).collect(),
            true,
        )
        .unwrap();
        let mut acc = 0.0f64;
        for f in 0..2 {
            for c in 0..2 {
                for yy in 0..2 {
                    for xx in 0..2 {
                        let d = (x.at(f, c, yy, xx) - y.at(f, c, yy, xx)) as f64;
                        acc += d * d;
                    }
                }
            }
        }
        let want = acc / 16.0;
        assert!((mse_frames(&x, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn degradation_values() {
        assert_eq!(degradation(0.5, 0.5).unwrap(), 0.0);
        assert!((degradation(50.0, 55.0).unwrap() - 10.0).abs() < 1e-12);
        // inputs from the paper's baseline/attack tables
        let d = degradation(68.3, 67.7).unwrap();
        assert!((d - (-0.8784773060029283)).abs() < 1e-9, "d = {}", d);
        assert!(degradation(0.0, 0.5).is_err());
    }
}
