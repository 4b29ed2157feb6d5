//! Adaptive-attacker harness: run attack -> fine-pruning over a grid of
//! poisoning rates and trigger kinds, recording pre/post metrics per cell.

use super::{fine_prune, PruneDirection};
use crate::attacks::{execute_attack, PoisonPlan, TriggerSpec};
use crate::error::Result;
use crate::events::Dataset;
use crate::snn::{NetConfig, TrainConfig};

#[derive(Clone, Debug)]
pub struct SweepCell {
    pub eps: f64,
    pub spec: TriggerSpec,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub kind: &'static str,
    pub eps: f64,
    pub pre_clean: f64,
    pub pre_asr: f64,
    pub post_prune_clean: f64,
    pub post_prune_asr: f64,
    pub post_finetune_clean: f64,
    pub post_finetune_asr: f64,
}

/// Runs each cell end to end: poison + train, then fine-prune with the given
/// defense parameters. The holdout used by the defense is the clean test
/// set's first half; metrics are measured on the second half.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_sweep(
    cells: &[SweepCell],
    train: &Dataset,
    test: &Dataset,
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    net_seed: u64,
    target_label: usize,
    tau: f64,
    direction: PruneDirection,
    fine_tune_epochs: usize,
) -> Result<Vec<SweepRow>> {
    let half = test.len() / 2;
    let holdout = Dataset {
        samples: test.samples[..half].to_vec(),
        num_classes: test.num_classes,
        dims: test.dims,
        seed: test.seed,
    };
    let eval = Dataset {
        samples: test.samples[half..].to_vec(),
        num_classes: test.num_classes,
        dims: test.dims,
        seed: test.seed,
    };

    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let plan = PoisonPlan {
            eps: cell.eps,
            target_label,
        };
        let run = execute_attack(
            train,
            &eval,
            net_cfg,
            train_cfg,
            net_seed,
            &cell.spec,
            &plan,
            None,
        )?;
        let artifact = run.artifact.clone();
        let seed = cell.spec.seed;
        let trigger = move |f: &crate::events::FrameTensor, i: usize| {
            artifact.apply(f, crate::derive_seed(seed, 0xA5B, i as u64))
        };
        let (_, prune) = fine_prune(
            &run.net,
            &holdout,
            tau,
            direction,
            fine_tune_epochs,
            train_cfg,
            &eval,
            &trigger,
            target_label,
        )?;
        rows.push(SweepRow {
            kind: cell.spec.kind.name(),
            eps: cell.eps,
            pre_clean: run.report.clean_acc,
            pre_asr: run.report.asr,
            post_prune_clean: prune.post_prune.0,
            post_prune_asr: prune.post_prune.1,
            post_finetune_clean: prune.post_finetune.0,
            post_finetune_asr: prune.post_finetune.1,
        });
    }
    Ok(rows)
}
