// Scratch harness for desk-scale tuning runs. Not part of the deliverable
// test suite; invoked manually while calibrating defaults.

use spikelab::attacks::{execute_attack, PoisonPlan, TriggerSpec};
use spikelab::events::{synth_dataset, SynthConfig};
use spikelab::snn::{evaluate, fit, NetConfig, SpikingNet, TrainConfig};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "baseline".to_string());
    let cfg = SynthConfig::default(); // 32x32, T=16, 1000 train / 200 test
    let t0 = Instant::now();
    let (train, test) = synth_dataset(&cfg, 7).unwrap();
    println!("synth: {:.2?}", t0.elapsed());

    let net_cfg = NetConfig::default();
    let train_cfg = TrainConfig {
        epochs: 15,
        batch: 16,
        lr: 0.01,
        seed: 7,
    };

    match which.as_str() {
        "baseline" | "lr3" | "lr5" | "lr10" | "k5" | "two" | "wide" => {
            let mut net_cfg = net_cfg.clone();
            let mut train_cfg = train_cfg;
            match which.as_str() {
                "lr3" => train_cfg.lr = 0.003,
                "lr5" => train_cfg.lr = 0.005,
                "lr10" => train_cfg.lr = 0.01,
                "k5" => net_cfg.kernel = 5,
                "two" => net_cfg.conv_channels = vec![8, 16],
                "wide" => net_cfg.conv_channels = vec![16],
                _ => {}
            }
            let mut net = SpikingNet::<f32>::build(&net_cfg, (2, 32, 32), 4, 7).unwrap();
            let t = Instant::now();
            let metrics = fit(&mut net, &train, Some(&test), &train_cfg).unwrap();
            for m in &metrics {
                println!(
                    "epoch {:2}  loss {:.5}  test_acc {:.3}",
                    m.epoch, m.loss, m.accuracy,
                );
            }
            println!("final acc {:.3}  total {:.1?}", evaluate(&net, &test).unwrap(), t.elapsed());
        }
        "static" => {
            let spec = TriggerSpec::default(); // static, p3, s=0.1, top-left
            let plan = PoisonPlan {
                eps: 0.1,
                target_label: 0,
            };
            let t = Instant::now();
            let run = execute_attack(&train, &test, &net_cfg, &train_cfg, 7, &spec, &plan, None)
                .unwrap();
            println!(
                "static: v1 {:.3} v2 {:.3} asr {:.3} degr {:.2}%  ({:.1?})",
                run.report.baseline_acc,
                run.report.clean_acc,
                run.report.asr,
                run.report.degradation_pct,
                t.elapsed()
            );
        }
        "moving" | "smart" => {
            use spikelab::attacks::{Location, TriggerKind};
            let spec = TriggerSpec {
                kind: if which == "moving" { TriggerKind::Moving } else { TriggerKind::Smart },
                location: Location::TopLeft,
                size: 0.1,
                polarity: 3,
                most_active: true,
                least_polarity: true,
                seed: 7,
                ..Default::default()
            };
            let plan = PoisonPlan {
                eps: if which == "smart" { 0.05 } else { 0.1 },
                target_label: 0,
            };
            let t = Instant::now();
            let run = execute_attack(&train, &test, &net_cfg, &train_cfg, 7, &spec, &plan, Some(0.99))
                .unwrap();
            println!(
                "{}: v2 {:.3} asr {:.3}  ({:.0?})",
                which, run.report.clean_acc, run.report.asr, t.elapsed()
            );
        }
        "dynamic" => {
            use spikelab::attacks::TriggerKind;
            for (alpha, gamma) in [(0.5, 0.1), (1.0, 0.1), (0.5, 0.01)] {
                let spec = TriggerSpec {
                    kind: TriggerKind::Dynamic,
                    alpha,
                    gamma,
                    seed: 7,
                    ..Default::default()
                };
                let plan = PoisonPlan { eps: 0.1, target_label: 0 };
                let t = Instant::now();
                let run = execute_attack(&train, &test, &net_cfg, &train_cfg, 7, &spec, &plan, Some(0.99)).unwrap();
                println!(
                    "dynamic a={} g={}: v2 {:.3} asr {:.3}  ({:.0?})",
                    alpha, gamma, run.report.clean_acc, run.report.asr, t.elapsed()
                );
                for e in &run.dyn_epochs {
                    println!(
                        "  epoch {} lc {:.4} lb {:.4} acc {:.3} asr {:.3}",
                        e.epoch, e.loss_clean, e.loss_backdoor, e.clean_acc, e.asr
                    );
                }
            }
        }
        "prune" => {
            use spikelab::defenses::{fine_prune, PruneDirection};
            let spec = TriggerSpec::default();
            let plan = PoisonPlan { eps: 0.1, target_label: 0 };
            let run = execute_attack(&train, &test, &net_cfg, &train_cfg, 7, &spec, &plan, Some(0.99)).unwrap();
            println!("pre: v2 {:.3} asr {:.3}", run.report.clean_acc, run.report.asr);
            let holdout = spikelab::events::Dataset {
                samples: test.samples[..100].to_vec(),
                num_classes: 4, dims: test.dims, seed: 0,
            };
            let eval = spikelab::events::Dataset {
                samples: test.samples[100..].to_vec(),
                num_classes: 4, dims: test.dims, seed: 0,
            };
            let artifact = run.artifact.clone();
            let trig = move |f: &spikelab::events::FrameTensor, i: usize| artifact.apply(f, i as u64);
            let t = Instant::now();
            let (_, res) = fine_prune(&run.net, &holdout, 0.5, PruneDirection::Least, 5, &train_cfg, &eval, &trig, 0).unwrap();
            println!(
                "tau 0.5: zeroed {:?} post_prune acc {:.3} asr {:.3} post_ft acc {:.3} asr {:.3}  ({:.0?})",
                res.zeroed, res.post_prune.0, res.post_prune.1, res.post_finetune.0, res.post_finetune.1, t.elapsed()
            );
        }
        "adaptive" => {
            use spikelab::defenses::{fine_prune, PruneDirection};
            // low-eps static cell with the paper's 30% trigger size
            let spec = TriggerSpec { size: 0.3, seed: 7, ..Default::default() };
            let plan = PoisonPlan { eps: 0.001, target_label: 0 };
            let run = execute_attack(&train, &test, &net_cfg, &train_cfg, 7, &spec, &plan, Some(0.99)).unwrap();
            println!("adaptive pre: v2 {:.3} asr {:.3} poisoned {:?}", run.report.clean_acc, run.report.asr, run.poisoned_indices);
            let holdout = spikelab::events::Dataset {
                samples: test.samples[..100].to_vec(),
                num_classes: 4, dims: test.dims, seed: 0,
            };
            let eval = spikelab::events::Dataset {
                samples: test.samples[100..].to_vec(),
                num_classes: 4, dims: test.dims, seed: 0,
            };
            let artifact = run.artifact.clone();
            let trig = move |f: &spikelab::events::FrameTensor, i: usize| artifact.apply(f, i as u64);
            let (_, res) = fine_prune(&run.net, &holdout, 0.5, PruneDirection::Least, 5, &train_cfg, &eval, &trig, 0).unwrap();
            println!(
                "adaptive tau 0.5: post_prune acc {:.3} asr {:.3} post_ft acc {:.3} asr {:.3}",
                res.post_prune.0, res.post_prune.1, res.post_finetune.0, res.post_finetune.1
            );
        }
        "seeds" => {
            // robustness of the desk config across seeds
            let mut tc = train_cfg;
            tc.lr = 0.01;
            for seed in [1u64, 2, 3, 4, 5] {
                let (tr, te) = synth_dataset(&cfg, seed).unwrap();
                let wide = NetConfig { conv_channels: vec![12], ..net_cfg.clone() };
            let mut net = SpikingNet::<f32>::build(&wide, (2, 32, 32), 4, seed).unwrap();
                let mut tc2 = tc;
                tc2.seed = seed;
                let t = Instant::now();
                let m = fit(&mut net, &tr, Some(&te), &tc2).unwrap();
                let best = m.iter().map(|e| e.accuracy).fold(0.0, f64::max);
                println!(
                    "seed {}: final {:.3} best {:.3}  ({:.0?})",
                    seed,
                    m.last().unwrap().accuracy,
                    best,
                    t.elapsed()
                );
            }
        }
        "probe" => {
            use spikelab::snn::{batch_frames, Capture, ForwardOpts};
            use spikelab::tensor::{backward, mse_loss, Tape, Tensor};
            let net = SpikingNet::<f32>::build(&net_cfg, (2, 32, 32), 4, 7).unwrap();
            let frames: Vec<&spikelab::events::FrameTensor> =
                train.samples[..16].iter().map(|s| &s.frames).collect();
            let inputs = batch_frames::<f32>(&frames).unwrap();
            let tape = Tape::new();
            let out = net
                .forward_frames(
                    &inputs,
                    ForwardOpts {
                        tape: Some(&tape),
                        train: false,
                        smooth: false,
                        dropout_seed: 0,
                    },
                    Capture {
                        penultimate: true,
                        conv_rates: true,
                    },
                )
                .unwrap();
            let conv = out.conv_rates.unwrap();
            let pen = out.penultimate.unwrap();
            println!(
                "conv-LIF mean rate: {:.4}  pen mean: {:.4}",
                conv.iter().sum::<f64>() / conv.len() as f64,
                pen.iter().sum::<f64>() / pen.len() as f64
            );
            let rates: Vec<f32> = out.rates.data().to_vec();
            println!(
                "output rates: min {:.3} mean {:.3} max {:.3}",
                rates.iter().cloned().fold(f32::INFINITY, f32::min),
                rates.iter().sum::<f32>() / rates.len() as f32,
                rates.iter().cloned().fold(0.0f32, f32::max)
            );
            let labels: Vec<usize> = train.samples[..16].iter().map(|s| s.label).collect();
            let mut tgt = vec![0.0f32; 16 * 4];
            for (i, l) in labels.iter().enumerate() {
                tgt[i * 4 + l] = 1.0;
            }
            let target = Tensor::from_vec(&[16, 4], tgt).unwrap();
            let loss = mse_loss(&out.rates, &target).unwrap();
            let grads = backward(&loss).unwrap();
            for (i, p) in out.bound.as_ref().unwrap().iter().enumerate() {
                let g = grads.wrt(p).unwrap();
                let norm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
                let pmax = g.iter().cloned().fold(0.0f32, |a, b| a.max(b.abs()));
                println!("param {} shape {:?}: |g| {:.5} max {:.6}", i, p.shape(), norm, pmax);
            }
        }
        other => {
            eprintln!("unknown mode {}", other);
        }
    }
}
