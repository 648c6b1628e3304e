//! Test-time evaluation with multi-stride score accumulation.
//!
//! Each video is read once per stride in the sweep with a deterministic plan.
//! A stream's score for the video is the mean of its step scores over every
//! step of every stride; the two stream means are then fused and the argmax
//! is the prediction.

use serde::Serialize;

use crate::cell::Variant;
use crate::error::{Error, Result};
use crate::model::{argmax, fuse_scores, mean_scores, TwoStreamModel};
use crate::ops::NormMode;
use crate::par::Exec;
use crate::sampling::{eval_plan, realize_episode, SamplingConfig, VideoMeta};
use crate::synth::{Dataset, Split};
use crate::tensor::Real;

/// Mean step scores of one stride for one video.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrideTrace {
    pub stride: usize,
    pub rgb: Vec<f64>,
    pub flow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoResult {
    pub video: usize,
    pub label: usize,
    pub prediction: usize,
    pub fused: Vec<f64>,
    pub strides: Vec<StrideTrace>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub split: String,
    pub strides: Vec<usize>,
    pub class_names: Vec<String>,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub videos: Vec<VideoResult>,
}

impl EvalReport {
    /// Checks the confusion matrix against the per-video results and the
    /// accuracy figures against the matrix.
    pub fn check(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut expected = vec![vec![0usize; k]; k];
        for v in &self.videos {
            expected[v.label][v.prediction] += 1;
        }
        if expected != self.confusion {
            return Err(Error::Invalid("confusion matrix disagrees with video results".into()));
        }
        let total: usize = self.confusion.iter().flatten().sum();
        let trace: usize = (0..k).map(|i| self.confusion[i][i]).sum();
        if total != self.videos.len() || (self.overall_accuracy - ratio(trace, total)).abs() > 1e-12 {
            return Err(Error::Invalid("overall accuracy disagrees with confusion trace".into()));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let acc = ratio(row[i], row.iter().sum());
            if (acc - self.per_class_accuracy[i]).abs() > 1e-12 {
                return Err(Error::Invalid(format!("per-class accuracy of class {i} disagrees")));
            }
        }
        Ok(())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores one video under every stride of the sweep.
pub fn score_video<T: Real>(
    model: &TwoStreamModel<T>,
    ds: &Dataset,
    video: usize,
    sampling: &SamplingConfig,
    strides: &[usize],
    mode: NormMode,
) -> Result<VideoResult> {
    let v = &ds.videos[video];
    let mut traces = Vec::with_capacity(strides.len());
    for &stride in strides {
        let plan = eval_plan(VideoMeta::from(ds), sampling, stride)?;
        let ep = realize_episode::<T>(&plan, ds, v, false)?;
        let t = model.forward_episode(&ep.rgb, &ep.flow, mode, Exec::Sequential)?;
        traces.push(StrideTrace {
            stride,
            rgb: mean_scores(&t.rgb.scores),
            flow: mean_scores(&t.flow.scores),
        });
    }
    let rgb = mean_scores(&traces.iter().map(|s| s.rgb.clone()).collect::<Vec<_>>());
    let flow = mean_scores(&traces.iter().map(|s| s.flow.clone()).collect::<Vec<_>>());
    let fused = fuse_scores(&rgb, &flow, model.fusion_weight)?;
    Ok(VideoResult {
        video,
        label: v.label,
        prediction: argmax(&fused),
        fused,
        strides: traces,
    })
}

pub fn evaluate<T: Real>(
    model: &TwoStreamModel<T>,
    ds: &Dataset,
    split: Split,
    sampling: &SamplingConfig,
    strides: &[usize],
    exec: Exec,
) -> Result<EvalReport> {
    if model.num_classes() != ds.num_classes() {
        return Err(Error::Invalid(format!(
            "checkpoint predicts {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes()
        )));
    }
    if strides.is_empty() {
        return Err(Error::Invalid("stride sweep is empty".into()));
    }
    let indices = ds.indices(split);
    if indices.is_empty() {
        return Err(Error::Invalid(format!("{split} split is empty")));
    }
    let videos = exec
        .map(&indices, |&i| score_video(model, ds, i, sampling, strides, NormMode::PerSample))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let k = ds.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    for v in &videos {
        confusion[v.label][v.prediction] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let report = EvalReport {
        variant: model.variant(),
        split: split.to_string(),
        strides: strides.to_vec(),
        class_names: ds.classes.iter().map(|c| c.name.clone()).collect(),
        per_class_accuracy: confusion.iter().enumerate().map(|(i, r)| ratio(r[i], r.iter().sum())).collect(),
        overall_accuracy: ratio(correct, videos.len()),
        confusion,
        videos,
    };
    report.check()?;
    Ok(report)
}
