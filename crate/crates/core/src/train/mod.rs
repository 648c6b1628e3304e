//! Training loop, optimizer, learning-rate schedule and loss.
//!
//! Each iteration samples a batch of episodes, computes per-episode gradients
//! (in parallel under [`Exec::Parallel`]), sums them in batch order, clips the
//! mean to a global norm and takes one momentum step. Results never depend on
//! the thread count.

pub mod config;
pub mod loss;
pub mod optim;
pub mod schedule;

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{argmax, fuse_scores, mean_scores, BackwardOptions, ModelConfig, TwoStreamModel};
use crate::ops::NormMode;
use crate::par::Exec;
use crate::params::{axpy, scale_trainable, zeros_like, Parameters};
use crate::sampling::{fixed_stride_plan, realize_episode, sample_plan, Episode, SamplingConfig, VideoMeta};
use crate::synth::{Dataset, Split};

pub use config::{SamplingMode, TrainConfig};
pub use loss::step_cross_entropy;
pub use optim::{clip_global_norm, Sgd};
pub use schedule::{lr_schedule, Plateau, ScheduleAction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Stems frozen; recurrent cells and classifiers train.
    CellsOnly,
    EndToEnd,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::CellsOnly => "cells_only",
            Phase::EndToEnd => "end_to_end",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Budget,
    Schedule,
    /// Non-finite loss or gradient; the checkpoint is the last good one.
    NonFinite(String),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model (the final one when there is no validation split).
    pub checkpoint: Checkpoint<f32>,
    /// Model after the last completed iteration.
    pub last: TwoStreamModel<f32>,
    pub metrics: Vec<MetricRow>,
    pub stop: StopReason,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: &mut impl Write) -> Result<()> {
    writeln!(w, "iter,loss,train_acc,val_acc,lr,phase")?;
    for r in rows {
        let val = r.val_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:.6},{:.6},{},{:e},{}",
            r.iteration, r.loss, r.train_accuracy, val, r.lr, r.phase
        )?;
    }
    Ok(())
}

pub fn model_config(cfg: &TrainConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        variant: cfg.variant,
        rgb_channels: cfg.clip_frames * ds.channels,
        flow_channels: cfg.clip_frames * 2,
        stem_channels: cfg.stem_channels,
        hidden_channels: cfg.hidden_channels,
        input_rows: cfg.crop,
        input_cols: cfg.crop,
        num_classes: ds.num_classes(),
        share_gates: cfg.share_gates,
        norm: cfg.norm,
        fusion_weight: cfg.fusion_weight,
    }
}

pub fn sampling_config(cfg: &TrainConfig) -> SamplingConfig {
    SamplingConfig {
        n: cfg.steps,
        l_t: cfg.clip_frames,
        crop_rows: cfg.crop,
        crop_cols: cfg.crop,
    }
}

struct EpisodeResult {
    loss: f64,
    correct: bool,
    grads: TwoStreamModel<f32>,
    moments: usize,
}

/// Loss, fused-prediction correctness and parameter gradients of one episode.
fn episode_gradients(model: &TwoStreamModel<f32>, ep: &Episode<f32>, opts: BackwardOptions) -> Result<EpisodeResult> {
    let trace = model.forward_episode(&ep.rgb, &ep.flow, NormMode::PerSample, Exec::Sequential)?;
    let (lr, gr) = step_cross_entropy(&trace.rgb.scores, ep.label)?;
    let (lf, gf) = step_cross_entropy(&trace.flow.scores, ep.label)?;
    let fused = fuse_scores(
        &mean_scores(&trace.rgb.scores),
        &mean_scores(&trace.flow.scores),
        model.fusion_weight,
    )?;
    let mut grads = zeros_like(model);
    model.backward_episode(&trace, &gr, &gf, &mut grads, opts)?;
    let moments = TwoStreamModel::accumulate_moments(&trace, &mut grads);
    Ok(EpisodeResult {
        loss: lr + lf,
        correct: argmax(&fused) == ep.label,
        grads,
        moments,
    })
}

fn is_stem(name: &str) -> bool {
    name.contains(".stem.")
}

pub fn train(ds: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<TrainOutcome> {
    train_with(ds, cfg, exec, |_| {})
}

/// As [`train`], calling `progress` after every iteration.
pub fn train_with(ds: &Dataset, cfg: &TrainConfig, exec: Exec, mut progress: impl FnMut(&MetricRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Invalid("dataset has no training videos".into()));
    }
    let has_val = !ds.indices(Split::Val).is_empty();
    let mcfg = model_config(cfg, ds);
    let scfg = sampling_config(cfg);
    let meta = VideoMeta::from(ds);
    let mut model = TwoStreamModel::<f32>::init(&mcfg, cfg.seed)?;
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut plateau = Plateau::new(cfg.patience, cfg.min_improvement, cfg.decay_factor, cfg.max_decays);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = cfg.lr;
    let mut phase = if cfg.two_step { Phase::CellsOnly } else { Phase::EndToEnd };
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut best: Option<(f64, usize, TwoStreamModel<f32>)> = None;
    let mut stop = StopReason::Budget;
    let mut completed = 0;

    for it in 0..cfg.iterations {
        let mut episodes = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let v = *train_idx.choose(&mut rng).expect("non-empty");
            let plan = match cfg.sampling {
                SamplingMode::LongShort => sample_plan(meta, &scfg, &mut rng)?,
                SamplingMode::Fixed => fixed_stride_plan(meta, &scfg, &mut rng)?,
            };
            let flip = cfg.flip && rng.gen_bool(0.5);
            episodes.push(realize_episode::<f32>(&plan, ds, &ds.videos[v], flip)?);
        }
        let opts = match phase {
            Phase::CellsOnly => BackwardOptions::CELLS_ONLY,
            Phase::EndToEnd => BackwardOptions::FULL,
        };
        let results = exec.map(&episodes, |ep| episode_gradients(&model, ep, opts));
        let mut total = zeros_like(&model);
        let (mut loss, mut correct, mut moments) = (0.0, 0, 0);
        for r in results {
            let r = r?;
            axpy(&mut total, 1.0, &r.grads);
            loss += r.loss;
            correct += usize::from(r.correct);
            moments += r.moments;
        }
        let b = cfg.batch_size as f64;
        loss /= b;
        scale_trainable(&mut total, (1.0 / b) as f32);
        let norm = clip_global_norm(&mut total, cfg.clip_norm);
        if !loss.is_finite() || !norm.is_finite() {
            let msg = format!("iteration {it}: loss {loss}, gradient norm {norm}");
            log::error!("aborting: {msg}");
            stop = StopReason::NonFinite(msg);
            break;
        }
        let frozen = |n: &str| phase == Phase::CellsOnly && is_stem(n);
        let good = model.clone();
        opt.step(&mut model, &total, lr, &frozen)?;
        if model.views().iter().any(|v| v.data.iter().any(|x| !x.is_finite())) {
            let msg = format!("iteration {it}: update produced non-finite parameters");
            log::error!("aborting: {msg}");
            model = good;
            stop = StopReason::NonFinite(msg);
            break;
        }
        model.absorb_moments(&total, moments);
        completed = it + 1;

        let mut row = MetricRow {
            iteration: it + 1,
            loss,
            train_accuracy: correct as f64 / b,
            val_accuracy: None,
            lr,
            phase,
        };
        let eval_now = (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations;
        let mut action = ScheduleAction::Keep;
        if has_val && eval_now {
            let rep = evaluate(&model, ds, Split::Val, &scfg, &cfg.eval_strides, exec)?;
            let acc = rep.overall_accuracy;
            row.val_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, it + 1, model.clone()));
            }
            action = plateau.observe(100.0 * acc);
        }
        log::debug!(
            "iter {} loss {:.4} train {:.3} val {:?} lr {:e} {}",
            row.iteration,
            row.loss,
            row.train_accuracy,
            row.val_accuracy,
            row.lr,
            row.phase
        );
        progress(&row);
        metrics.push(row);
        match action {
            ScheduleAction::Keep => {}
            ScheduleAction::Decay => {
                lr = plateau.next_lr(lr, action);
                phase = Phase::EndToEnd;
                log::info!("iteration {}: learning rate decayed to {lr:e}, phase {phase}", it + 1);
            }
            ScheduleAction::Stop => {
                stop = StopReason::Schedule;
                break;
            }
        }
    }

    let (val_accuracy, iteration, chosen) = match best {
        Some((acc, i, m)) => (Some(acc), i, m),
        None => (None, completed, model.clone()),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: mcfg,
            meta: CheckpointMeta {
                iteration,
                steps: cfg.steps,
                clip_frames: cfg.clip_frames,
                val_accuracy,
                class_names: ds.classes.iter().map(|c| c.name.clone()).collect(),
            },
            model: chosen,
        },
        last: model,
        metrics,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bitwise_eq;
    use crate::synth::{generate, resolve_classes, GenerateConfig, SplitPlan, Suite};

    fn small(cfg: &mut TrainConfig) {
        cfg.stem_channels = 4;
        cfg.hidden_channels = 4;
        cfg.steps = 3;
        cfg.clip_frames = 3;
        cfg.batch_size = 2;
        cfg.eval_strides = vec![1];
    }

    fn data(names: &[&str], train: usize, val: usize) -> Dataset {
        let classes = resolve_classes(names).unwrap();
        let split = SplitPlan::Counts { train, val, test: 0 };
        generate(&GenerateConfig::new(classes, split, 5), Exec::Sequential).unwrap()
    }

    fn trainable_eq(a: &TwoStreamModel<f32>, b: &TwoStreamModel<f32>) -> bool {
        a.views()
            .iter()
            .zip(b.views())
            .filter(|(x, _)| x.kind.trainable())
            .all(|(x, y)| x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits()))
    }

    #[test]
    fn zero_lr_leaves_trainable_parameters_unchanged() {
        let ds = data(&["st_right", "st_left"], 4, 0);
        let mut cfg = TrainConfig {
            lr: 0.0,
            iterations: 6,
            two_step: false,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::Sequential).unwrap();
        let init = TwoStreamModel::<f32>::init(&model_config(&cfg, &ds), cfg.seed).unwrap();
        assert!(trainable_eq(&out.last, &init));
        assert!(!bitwise_eq(&out.last, &init), "running moments should move");
    }

    #[test]
    fn single_class_set_is_fit() {
        let ds = data(&["st_down"], 8, 0);
        let mut cfg = TrainConfig {
            lr: 0.01,
            iterations: 50,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::default()).unwrap();
        assert!(out.metrics.iter().rev().take(10).all(|r| r.train_accuracy == 1.0));
    }

    #[test]
    fn cells_only_phase_keeps_stems_bitwise() {
        let ds = data(&["st_right", "st_left"], 4, 0);
        let mut cfg = TrainConfig {
            lr: 0.05,
            iterations: 5,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::Sequential).unwrap();
        let init = TwoStreamModel::<f32>::init(&model_config(&cfg, &ds), cfg.seed).unwrap();
        assert_eq!(out.last.rgb.stem, init.rgb.stem);
        assert_eq!(out.last.flow.stem, init.flow.stem);
        assert_ne!(out.last.rgb.classifier, init.rgb.classifier);
        assert!(out.metrics.iter().all(|r| r.phase == Phase::CellsOnly));
    }

    #[test]
    fn shared_gates_stay_one_storage() {
        let ds = data(&["st_right", "st_left"], 4, 0);
        let mut cfg = TrainConfig {
            lr: 0.05,
            iterations: 3,
            two_step: false,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::Sequential).unwrap();
        let m = &out.last;
        assert!(std::ptr::eq(
            m.gates.for_stream(crate::model::Modality::Rgb),
            m.gates.for_stream(crate::model::Modality::Flow)
        ));
    }

    #[test]
    fn runs_are_deterministic_across_policies() {
        let ds = data(&["st_right", "st_left", "st_up"], 3, 2);
        let mut cfg = TrainConfig {
            lr: 0.02,
            iterations: 6,
            eval_every: 2,
            two_step: false,
            ..Default::default()
        };
        small(&mut cfg);
        let csv = |exec| {
            let out = train(&ds, &cfg, exec).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&out.metrics, &mut buf).unwrap();
            let mut ck = Vec::new();
            out.checkpoint.write_to(&mut ck).unwrap();
            (buf, ck)
        };
        let a = csv(Exec::Sequential);
        assert_eq!(a, csv(Exec::Sequential));
        assert_eq!(a, csv(Exec::default()));
        let text = String::from_utf8(a.0).unwrap();
        assert!(text.starts_with("iter,loss,train_acc,val_acc,lr,phase\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn best_validation_model_is_kept() {
        let ds = data(&["st_right", "st_left"], 3, 2);
        let mut cfg = TrainConfig {
            lr: 0.02,
            iterations: 6,
            eval_every: 2,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::Sequential).unwrap();
        let best = out
            .metrics
            .iter()
            .filter_map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.checkpoint.meta.val_accuracy, Some(best));
    }

    #[test]
    fn diverging_run_stops_with_last_good_model() {
        let ds = data(&["st_right", "st_left"], 3, 0);
        let mut cfg = TrainConfig {
            lr: 1e30,
            momentum: 0.0,
            clip_norm: 0.0,
            iterations: 20,
            two_step: false,
            norm: false,
            ..Default::default()
        };
        small(&mut cfg);
        let out = train(&ds, &cfg, Exec::Sequential).unwrap();
        assert!(matches!(out.stop, StopReason::NonFinite(_)), "{:?}", out.stop);
        assert!(out.last.views().iter().all(|v| v.data.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn suite_dataset_trains_without_errors() {
        let classes = Suite::NonStationary.classes();
        let ds = generate(&GenerateConfig::new(classes, SplitPlan::Fractions { count: 4 }, 1), Exec::Sequential).unwrap();
        let mut cfg = TrainConfig {
            iterations: 2,
            ..Default::default()
        };
        small(&mut cfg);
        train(&ds, &cfg, Exec::default()).unwrap();
    }
}
