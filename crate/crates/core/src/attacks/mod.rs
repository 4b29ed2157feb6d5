//! Backdoor trigger families and the poisoning pipeline.
//!
//! Static and moving triggers overwrite a polarity-patterned square; the
//! smart trigger picks its tile and polarity from dataset activity; the
//! dynamic trigger is a learned l-infinity-bounded perturbation trained
//! jointly with the classifier.

mod dynamic;
mod smart;

pub use dynamic::{gen_dynamic, train_dynamic, DynEpoch, DynamicSpec, TriggerGenerator};
pub use smart::{apply_smart, compute_mask_activity, select_smart, MaskActivity, TileRect};

use crate::error::{Error, Result};
use crate::events::{Dataset, FrameTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TriggerKind {
    Static,
    Moving,
    Smart,
    Dynamic,
}

impl TriggerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TriggerKind::Static),
            "moving" => Ok(TriggerKind::Moving),
            "smart" => Ok(TriggerKind::Smart),
            "dynamic" => Ok(TriggerKind::Dynamic),
            other => Err(Error::Config(format!("unknown trigger kind `{}`", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TriggerKind::Static => "static",
            TriggerKind::Moving => "moving",
            TriggerKind::Smart => "smart",
            TriggerKind::Dynamic => "dynamic",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    TopLeft,
    Middle,
    BottomRight,
    Explicit(usize, usize),
}

impl Location {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "top-left" => Ok(Location::TopLeft),
            "middle" => Ok(Location::Middle),
            "bottom-right" => Ok(Location::BottomRight),
            other => {
                let parts: Vec<&str> = other.split(',').collect();
                if parts.len() == 2 {
                    let row = parts[0].trim().parse().map_err(|_| bad_loc(other))?;
                    let col = parts[1].trim().parse().map_err(|_| bad_loc(other))?;
                    Ok(Location::Explicit(row, col))
                } else {
                    Err(bad_loc(other))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Location::TopLeft => "top-left".to_string(),
            Location::Middle => "middle".to_string(),
            Location::BottomRight => "bottom-right".to_string(),
            Location::Explicit(r, c) => format!("{},{}", r, c),
        }
    }

    /// Top-left corner of a `side`-pixel square in an HxW image.
    pub fn resolve(&self, h: usize, w: usize, side: usize) -> Result<(usize, usize)> {
        if side > h || side > w {
            return Err(Error::Placement(format!(
                "square of side {} does not fit a {}x{} image",
                side, h, w
            )));
        }
        Ok(match self {
            Location::TopLeft => (0, 0),
            Location::Middle => ((h - side) / 2, (w - side) / 2),
            Location::BottomRight => (h - side, w - side),
            Location::Explicit(r, c) => {
                if r + side > h || c + side > w {
                    return Err(Error::Placement(format!(
                        "square of side {} at ({}, {}) leaves the {}x{} image",
                        side, r, c, h, w
                    )));
                }
                (*r, *c)
            }
        })
    }
}

fn bad_loc(s: &str) -> Error {
    Error::Config(format!(
        "bad location `{}`: want top-left|middle|bottom-right|row,col",
        s
    ))
}

/// Full description of one attack.
#[derive(Clone, Debug)]
pub struct TriggerSpec {
    pub kind: TriggerKind,
    /// Polarity code 0..=3: p0 background, p1 OFF, p2 ON, p3 both.
    pub polarity: u8,
    /// Trigger size as an area fraction of the image.
    pub size: f64,
    pub location: Location,
    /// Grid lines for smart masks; the image splits into (c+1)^2 tiles.
    pub grid_lines: usize,
    pub most_active: bool,
    pub least_polarity: bool,
    /// l-infinity budget of the dynamic trigger.
    pub gamma: f64,
    /// Clean/backdoor weight of the dynamic classifier objective.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        TriggerSpec {
            kind: TriggerKind::Static,
            polarity: 3,
            size: 0.1,
            location: Location::TopLeft,
            grid_lines: 2,
            most_active: true,
            least_polarity: true,
            gamma: 0.01,
            alpha: 0.5,
            seed: 0,
        }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.polarity > 3 {
            return Err(Error::Config(format!("polarity {} outside 0..=3", self.polarity)));
        }
        if !(self.size > 0.0 && self.size <= 1.0) {
            return Err(Error::Config(format!("trigger size {} outside (0,1]", self.size)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.kind == TriggerKind::Dynamic && !(0.5..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0.5, 1] for the dynamic attack",
                self.alpha
            )));
        }
        if self.kind == TriggerKind::Smart && self.grid_lines == 0 {
            return Err(Error::Config("smart attack needs grid lines c >= 1".to_string()));
        }
        Ok(())
    }
}

/// Trigger square side from the area fraction: max(1, round(H * sqrt(s))).
pub fn trigger_side(h: usize, size: f64) -> usize {
    ((h as f64 * size.sqrt()).round() as usize).max(1)
}

/// Channel pattern of a polarity code as (OFF, ON) values.
pub fn polarity_pattern(polarity: u8) -> (f32, f32) {
    match polarity {
        0 => (0.0, 0.0),
        1 => (1.0, 0.0),
        2 => (0.0, 1.0),
        _ => (1.0, 1.0),
    }
}

fn stamp_square(frames: &mut FrameTensor, frame: usize, row: usize, col: usize, side: usize, polarity: u8) {
    let (off, on) = polarity_pattern(polarity);
    for y in row..row + side {
        for x in col..col + side {
            frames.set(frame, 0, y, x, off);
            frames.set(frame, 1, y, x, on);
        }
    }
}

fn require_normalized(frames: &FrameTensor, what: &str) -> Result<()> {
    if !frames.is_normalized() {
        return Err(Error::Config(format!("{} requires normalized frames", what)));
    }
    Ok(())
}

/// Overwrites the same square with the polarity pattern in every frame.
/// Pixels outside the square are untouched.
pub fn apply_static(frames: &FrameTensor, spec: &TriggerSpec) -> Result<FrameTensor> {
    require_normalized(frames, "apply_static")?;
    spec.validate()?;
    let (t, _, h, w) = frames.dims();
    let side = trigger_side(h, spec.size);
    let (row, col) = spec.location.resolve(h, w, side)?;
    let mut out = frames.clone();
    for f in 0..t {
        stamp_square(&mut out, f, row, col, side, spec.polarity);
    }
    Ok(out)
}

/// Pixels the moving trigger covers at frame `t`: the square starts at the
/// spec location and advances 2 px per frame, wrapping at `W - side + 1`
/// ("constant loop").
pub fn moving_position(
    spec: &TriggerSpec,
    h: usize,
    w: usize,
    t: usize,
) -> Result<(usize, usize, usize)> {
    let side = trigger_side(h, spec.size);
    let (row, col0) = spec.location.resolve(h, w, side)?;
    let period = w - side + 1;
    Ok((row, (col0 + 2 * t) % period, side))
}

/// The static square, advancing two pixels per frame along the row and
/// wrapping around.
pub fn apply_moving(frames: &FrameTensor, spec: &TriggerSpec) -> Result<FrameTensor> {
    require_normalized(frames, "apply_moving")?;
    spec.validate()?;
    let (t, _, h, w) = frames.dims();
    let mut out = frames.clone();
    for f in 0..t {
        let (row, col, side) = moving_position(spec, h, w, f)?;
        stamp_square(&mut out, f, row, col, side, spec.polarity);
    }
    Ok(out)
}

/// Poisoning plan: fraction of training samples replaced by triggered,
/// relabeled samples (dirty label).
#[derive(Clone, Copy, Debug)]
pub struct PoisonPlan {
    pub eps: f64,
    pub target_label: usize,
}

impl PoisonPlan {
    /// Number of poisoned samples for a dataset of size n:
    /// m = max(1, round(eps * n)).
    pub fn count(&self, n: usize) -> usize {
        ((self.eps * n as f64).round() as usize).max(1)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("poisoning rate {} outside (0,1)", self.eps)));
        }
        if self.target_label >= num_classes {
            return Err(Error::Config(format!(
                "target label {} outside {} classes",
                self.target_label, num_classes
            )));
        }
        Ok(())
    }
}

/// Replaces m uniformly chosen samples (without replacement, seeded) by
/// triggered versions labeled with the target. Sample order is preserved;
/// returns the sorted poisoned indices. `apply` receives each victim's
/// frames and a per-sample seed derived from `seed` and the sample index.
pub fn poison_dataset(
    dataset: &Dataset,
    apply: &dyn Fn(&FrameTensor, u64) -> Result<FrameTensor>,
    plan: &PoisonPlan,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    dataset.validate()?;
    plan.validate(dataset.num_classes)?;
    let n = dataset.len();
    let m = plan.count(n);
    if m >= n {
        return Err(Error::Config(format!(
            "poisoning rate {} rounds to {} of {} samples",
            plan.eps, m, n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, 0x9011, 0));
    let mut chosen = rand::seq::index::sample(&mut rng, n, m).into_vec();
    chosen.sort_unstable();

    let mut out = dataset.clone();
    for &i in &chosen {
        let per_sample = crate::derive_seed(seed, 0x9012, i as u64);
        out.samples[i] = crate::events::Sample {
            frames: apply(&dataset.samples[i].frames, per_sample)?,
            label: plan.target_label,
        };
    }
    Ok((out, chosen))
}

/// Default generator widths for the dynamic attack at desk scale.
pub const GEN_CHANNELS: (usize, usize) = (6, 12);

/// A trained/selected trigger ready to apply to samples.
#[derive(Clone, Debug)]
pub enum TriggerArtifact {
    /// Static or moving polarity square.
    Square(TriggerSpec),
    /// Smart trigger with its selected tile and polarity.
    Smart {
        spec: TriggerSpec,
        tile: TileRect,
        polarity: u8,
    },
    /// Trained perturbation generator with its l-infinity budget.
    Dynamic {
        gen: TriggerGenerator<f32>,
        gamma: f64,
    },
}

impl TriggerArtifact {
    /// Applies the trigger to one sample. `seed` drives per-sample
    /// randomness (the smart trigger's walk); square and dynamic triggers
    /// ignore it.
    pub fn apply(&self, frames: &FrameTensor, seed: u64) -> Result<FrameTensor> {
        match self {
            TriggerArtifact::Square(spec) => match spec.kind {
                TriggerKind::Static => apply_static(frames, spec),
                TriggerKind::Moving => apply_moving(frames, spec),
                other => Err(Error::Config(format!(
                    "square artifact cannot apply a {} trigger",
                    other.name()
                ))),
            },
            TriggerArtifact::Smart {
                spec,
                tile,
                polarity,
            } => apply_smart(frames, tile, *polarity, spec.size, seed),
            TriggerArtifact::Dynamic { gen, gamma } => Ok(gen_dynamic(gen, frames, *gamma)?.0),
        }
    }
}

/// One end-to-end attack: poisoned (or jointly trained) model, the trigger
/// artifact, and the quality report.
pub struct AttackRun {
    pub net: crate::snn::SpikingNet<f32>,
    pub artifact: TriggerArtifact,
    /// Indices of the poisoned training samples (empty for dynamic).
    pub poisoned_indices: Vec<usize>,
    pub report: crate::metrics::AttackReport,
    /// Per-epoch (epoch, loss, clean_acc) of the attack training run.
    pub epochs: Vec<crate::snn::EpochMetrics>,
    /// Per-epoch dynamic metrics, when kind = dynamic.
    pub dyn_epochs: Vec<DynEpoch>,
}

/// Builds the trigger artifact for a spec: squares pass through, the smart
/// trigger selects its tile and polarity from the clean training set.
pub fn resolve_artifact(spec: &TriggerSpec, clean_train: &Dataset) -> Result<TriggerArtifact> {
    spec.validate()?;
    match spec.kind {
        TriggerKind::Static | TriggerKind::Moving => Ok(TriggerArtifact::Square(spec.clone())),
        TriggerKind::Smart => {
            let activity = compute_mask_activity(clean_train, spec.grid_lines)?;
            let (tile_idx, polarity) = select_smart(&activity, spec.most_active, spec.least_polarity);
            Ok(TriggerArtifact::Smart {
                spec: spec.clone(),
                tile: activity.tile_rect(tile_idx),
                polarity,
            })
        }
        TriggerKind::Dynamic => Err(Error::Config(
            "dynamic triggers are trained, not resolved; use execute_attack".to_string(),
        )),
    }
}

/// Runs one full attack: trains the victim model (poisoning for square and
/// smart triggers, joint training for the dynamic one) and measures V1/V2,
/// ASR and degradation on the test set. `baseline_acc` is V1 from a paired
/// clean run; when absent a clean model is trained inline with the same
/// seeds.
pub fn execute_attack(
    train: &Dataset,
    test: &Dataset,
    net_cfg: &crate::snn::NetConfig,
    train_cfg: &crate::snn::TrainConfig,
    net_seed: u64,
    spec: &TriggerSpec,
    plan: &PoisonPlan,
    baseline_acc: Option<f64>,
) -> Result<AttackRun> {
    spec.validate()?;
    let dims = (train.dims.1, train.dims.2, train.dims.3);
    let v1 = match baseline_acc {
        Some(v) => v,
        None => {
            let mut clean = crate::snn::SpikingNet::<f32>::build(net_cfg, dims, train.num_classes, net_seed)?;
            crate::snn::fit(&mut clean, train, Some(test), train_cfg)?;
            crate::snn::evaluate(&clean, test)?
        }
    };

    let mut run = if spec.kind == TriggerKind::Dynamic {
        let mut net = crate::snn::SpikingNet::<f32>::build(net_cfg, dims, train.num_classes, net_seed)?;
        let mut gen = TriggerGenerator::<f32>::new(dims, GEN_CHANNELS, spec.seed)?;
        let dspec = DynamicSpec {
            alpha: spec.alpha,
            gamma: spec.gamma,
            target_label: plan.target_label,
        };
        let (dyn_epochs, _) = train_dynamic(&mut net, &mut gen, train, test, &dspec, train_cfg)?;
        let artifact = TriggerArtifact::Dynamic {
            gen,
            gamma: spec.gamma,
        };
        AttackRun {
            net,
            artifact,
            poisoned_indices: Vec::new(),
            report: crate::metrics::AttackReport {
                baseline_acc: v1,
                clean_acc: 0.0,
                asr: 0.0,
                degradation_pct: 0.0,
                seed: spec.seed,
            },
            epochs: Vec::new(),
            dyn_epochs,
        }
    } else {
        let artifact = resolve_artifact(spec, train)?;
        let apply = |f: &FrameTensor, s: u64| artifact.apply(f, s);
        let (poisoned, indices) = poison_dataset(train, &apply, plan, spec.seed)?;
        let mut net = crate::snn::SpikingNet::<f32>::build(net_cfg, dims, train.num_classes, net_seed)?;
        let epochs = crate::snn::fit(&mut net, &poisoned, Some(test), train_cfg)?;
        AttackRun {
            net,
            artifact,
            poisoned_indices: indices,
            report: crate::metrics::AttackReport {
                baseline_acc: v1,
                clean_acc: 0.0,
                asr: 0.0,
                degradation_pct: 0.0,
                seed: spec.seed,
            },
            epochs,
            dyn_epochs: Vec::new(),
        }
    };

    let v2 = crate::snn::evaluate(&run.net, test)?;
    let artifact = run.artifact.clone();
    let seed = spec.seed;
    let asr = crate::metrics::asr(
        &run.net,
        test,
        &|f, i| artifact.apply(f, crate::derive_seed(seed, 0xA5B, i as u64)),
        plan.target_label,
    )?;
    run.report.clean_acc = v2;
    run.report.asr = asr;
    run.report.degradation_pct = crate::metrics::degradation(v1, v2)?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{synth_dataset, SynthConfig};

    fn frames_32() -> FrameTensor {
        let mut f = FrameTensor::zeros(4, 2, 32, 32);
        f.set(0, 1, 20, 20, 4.0);
        crate::events::normalize(&f)
    }

    #[test]
    fn side_rule_hand_arithmetic() {
        // H = 34, s = 0.1 -> round(34 * sqrt(0.1)) = 11
        assert_eq!(trigger_side(34, 0.1), 11);
        assert_eq!(trigger_side(32, 0.01), 3);
        assert_eq!(trigger_side(4, 1e-6), 1); // floors at 1
    }

    #[test]
    fn p0_on_zero_region_is_identity() {
        let frames = frames_32();
        let spec = TriggerSpec {
            polarity: 0,
            ..Default::default()
        };
        let out = apply_static(&frames, &spec).unwrap();
        // the trigger writes zeros over an all-zero corner
        assert_eq!(out, frames);
    }

    #[test]
    fn p3_stamps_both_channels_every_frame() {
        let frames = frames_32();
        let spec = TriggerSpec {
            polarity: 3,
            size: 0.009, // side = round(32*0.0949) = 3
            ..Default::default()
        };
        let out = apply_static(&frames, &spec).unwrap();
        let side = trigger_side(32, spec.size);
        assert_eq!(side, 3);
        for f in 0..4 {
            for ch in 0..2 {
                let mut ones = 0;
                for y in 0..side {
                    for x in 0..side {
                        if out.at(f, ch, y, x) == 1.0 {
                            ones += 1;
                        }
                    }
                }
                assert_eq!(ones, 9, "frame {} channel {}", f, ch);
            }
        }
    }

    #[test]
    fn static_leaves_outside_pixels_untouched() {
        let frames = frames_32();
        let spec = TriggerSpec::default();
        let side = trigger_side(32, spec.size);
        let out = apply_static(&frames, &spec).unwrap();
        for f in 0..4 {
            for ch in 0..2 {
                for y in 0..32 {
                    for x in 0..32 {
                        if y < side && x < side {
                            continue;
                        }
                        assert_eq!(out.at(f, ch, y, x), frames.at(f, ch, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_placement_rejected() {
        let frames = frames_32();
        let spec = TriggerSpec {
            location: Location::Explicit(30, 30),
            size: 0.1, // side 10
            ..Default::default()
        };
        assert!(matches!(
            apply_static(&frames, &spec),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn moving_advances_two_px_per_frame() {
        let spec = TriggerSpec {
            size: 0.009, // side 3
            ..Default::default()
        };
        let (_, c0, side) = moving_position(&spec, 32, 32, 0).unwrap();
        let (_, c3, _) = moving_position(&spec, 32, 32, 3).unwrap();
        assert_eq!(side, 3);
        assert_eq!(c0, 0);
        assert_eq!(c3, 6);
    }

    #[test]
    fn moving_wraps_at_period() {
        // col0 = W - side: frame 1 lands at (col0 + 2) mod (W - side + 1) = 1
        let spec = TriggerSpec {
            size: 0.009,
            location: Location::Explicit(0, 29),
            ..Default::default()
        };
        let (_, c1, _) = moving_position(&spec, 32, 32, 1).unwrap();
        assert_eq!(c1, (29 + 2) % 30);
        assert_eq!(c1, 1);
    }

    #[test]
    fn moving_covers_16_distinct_columns() {
        let spec = TriggerSpec {
            size: 0.0009, // side 1 -> period 32
            ..Default::default()
        };
        let mut cols = std::collections::BTreeSet::new();
        for t in 0..16 {
            let (_, c, _) = moving_position(&spec, 32, 32, t).unwrap();
            cols.insert(c);
        }
        assert_eq!(cols.len(), 16);
    }

    fn tiny_dataset() -> Dataset {
        synth_dataset(
            &SynthConfig {
                height: 16,
                width: 16,
                frames: 4,
                shape_side: 3,
                step: 2,
                noise: 0.0,
                n_train: 100,
                n_test: 4,
            },
            21,
        )
        .unwrap()
        .0
    }

    #[test]
    fn poison_counts() {
        let plan = PoisonPlan {
            eps: 0.1,
            target_label: 0,
        };
        assert_eq!(plan.count(100), 10);
        // round(0.001 * 1176) = 1
        let low = PoisonPlan {
            eps: 0.001,
            target_label: 0,
        };
        assert_eq!(low.count(1176), 1);
        // floor-to-min rule
        assert_eq!(low.count(100), 1);
    }

    #[test]
    fn poison_changes_exactly_m_samples() {
        let ds = tiny_dataset();
        let spec = TriggerSpec::default();
        let plan = PoisonPlan {
            eps: 0.1,
            target_label: 0,
        };
        let (poisoned, idx) = poison_dataset(
            &ds,
            &|f, _seed| apply_static(f, &spec),
            &plan,
            7,
        )
        .unwrap();
        assert_eq!(idx.len(), 10);
        for (i, (a, b)) in ds.samples.iter().zip(&poisoned.samples).enumerate() {
            if idx.contains(&i) {
                assert_eq!(b.label, 0, "poisoned sample {} carries the target label", i);
            } else {
                assert_eq!(a, b, "clean sample {} must be bit-identical", i);
            }
        }
    }

    #[test]
    fn poison_rate_rounding_to_n_rejected() {
        let ds = tiny_dataset();
        let plan = PoisonPlan {
            eps: 0.999,
            target_label: 0,
        };
        // round(0.999*100) = 100 >= n
        assert!(poison_dataset(&ds, &|f, _| Ok(f.clone()), &plan, 0).is_err());
    }

    #[test]
    fn poison_is_deterministic() {
        let ds = tiny_dataset();
        let spec = TriggerSpec::default();
        let plan = PoisonPlan {
            eps: 0.05,
            target_label: 1,
        };
        let (a, ia) = poison_dataset(&ds, &|f, _| apply_static(f, &spec), &plan, 3).unwrap();
        let (b, ib) = poison_dataset(&ds, &|f, _| apply_static(f, &spec), &plan, 3).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(a, b);
    }
}
