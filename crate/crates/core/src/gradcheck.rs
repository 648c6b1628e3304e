//! Central finite-difference check of the full two-stream backward pass.
//!
//! Runs in 64-bit with frozen norms so the loss is a fixed smooth function of
//! the parameters. Parameters are grouped by slot name; lattice banks are
//! split into one group per spatial location. A group's error is the
//! infinity-norm relative error of its gradient vector.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cell::Variant;
use crate::error::Result;
use crate::model::{random_clips, BackwardOptions, ModelConfig, TwoStreamModel};
use crate::ops::NormMode;
use crate::par::Exec;
use crate::params::{zeros_like, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::train::loss::step_cross_entropy;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Stem and hidden channel count.
    pub channels: usize,
    /// Recurrent map extent; stem inputs are twice as large.
    pub map_extent: usize,
    pub steps: usize,
    pub classes: usize,
    pub share_gates: bool,
    pub norm: bool,
    pub step_size: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            variant: Variant::L2stm,
            seed: 7,
            channels: 2,
            map_extent: 4,
            steps: 3,
            classes: 3,
            share_gates: true,
            norm: true,
            step_size: 1e-5,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub elements: usize,
    /// `max |analytic - numeric|` over the group divided by the group's largest
    /// gradient magnitude.
    pub worst_relative_error: f64,
    /// Largest per-element `|a - b| / max(|a|, |b|)`; dominated by round-off
    /// for elements whose gradient is near the finite-difference noise floor.
    pub worst_element_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_relative_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

struct Problem {
    model: TwoStreamModel<f64>,
    rgb: Vec<Tensor<f64>>,
    flow: Vec<Tensor<f64>>,
    label: usize,
}

fn build(cfg: &GradcheckConfig) -> Result<Problem> {
    let extent = 2 * cfg.map_extent;
    let mc = ModelConfig {
        variant: cfg.variant,
        rgb_channels: 2,
        flow_channels: 4,
        stem_channels: cfg.channels,
        hidden_channels: cfg.channels,
        input_rows: extent,
        input_cols: extent,
        num_classes: cfg.classes,
        share_gates: cfg.share_gates,
        norm: cfg.norm,
        fusion_weight: 0.5,
    };
    let mut model = TwoStreamModel::<f64>::init(&mc, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    for v in model.views_mut() {
        let range = match v.kind {
            ParamKind::Weight => continue,
            ParamKind::Bias => -0.2..0.2,
            ParamKind::NormScale | ParamKind::RunningVar => 0.5..1.5,
            ParamKind::NormShift | ParamKind::RunningMean => -0.5..0.5,
        };
        v.data.iter_mut().for_each(|x| *x = rng.gen_range(range.clone()));
    }
    let rgb = random_clips(cfg.steps, 2, extent, extent, &mut rng);
    let flow = random_clips(cfg.steps, 4, extent, extent, &mut rng);
    let label = rng.gen_range(0..cfg.classes);
    Ok(Problem { model, rgb, flow, label })
}

fn loss(p: &Problem, model: &TwoStreamModel<f64>) -> Result<f64> {
    let t = model.forward_episode(&p.rgb, &p.flow, NormMode::Running, Exec::Sequential)?;
    let (a, _) = step_cross_entropy(&t.rgb.scores, p.label)?;
    let (b, _) = step_cross_entropy(&t.flow.scores, p.label)?;
    Ok(a + b)
}

fn analytic(p: &Problem) -> Result<TwoStreamModel<f64>> {
    let t = p.model.forward_episode(&p.rgb, &p.flow, NormMode::Running, Exec::Sequential)?;
    let (_, gr) = step_cross_entropy(&t.rgb.scores, p.label)?;
    let (_, gf) = step_cross_entropy(&t.flow.scores, p.label)?;
    let mut grads = zeros_like(&p.model);
    p.model.backward_episode(&t, &gr, &gf, &mut grads, BackwardOptions::FULL)?;
    Ok(grads)
}

/// Group label for element `idx` of a slot.
fn group_of(name: &str, shape: &[usize], idx: usize) -> String {
    if shape.len() == 6 {
        let [_, rows, cols, out, kr, kc] = [shape[0], shape[1], shape[2], shape[3], shape[4], shape[5]];
        let per_loc = out * kr * kc;
        let loc = (idx / per_loc) % (rows * cols);
        return format!("{name}@({},{})", loc / cols, loc % cols);
    }
    name.to_string()
}

pub fn gradcheck(cfg: &GradcheckConfig, exec: Exec) -> Result<GradcheckReport> {
    gradcheck_with(cfg, exec, |_| {})
}

/// As [`gradcheck`], with a hook that may tamper with the analytic gradient
/// before comparison.
pub fn gradcheck_with(
    cfg: &GradcheckConfig,
    exec: Exec,
    corrupt: impl Fn(&mut TwoStreamModel<f64>),
) -> Result<GradcheckReport> {
    let p = build(cfg)?;
    let mut grads = analytic(&p)?;
    corrupt(&mut grads);
    let gviews = grads.views();
    let probes: Vec<(usize, usize, String, f64)> = p
        .model
        .views()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.kind.trainable())
        .flat_map(|(s, v)| {
            let g = gviews[s].data;
            (0..v.data.len()).map(move |e| (s, e, group_of(&v.name, &v.shape, e), g[e]))
        })
        .collect();
    let h = cfg.step_size;
    let numeric = exec.map(&probes, |(s, e, _, _)| -> Result<f64> {
        let mut plus = p.model.clone();
        plus.views_mut()[*s].data[*e] += h;
        let mut minus = p.model.clone();
        minus.views_mut()[*s].data[*e] -= h;
        Ok((loss(&p, &plus)? - loss(&p, &minus)?) / (2.0 * h))
    });
    let mut groups: Vec<GroupReport> = Vec::new();
    let mut scale: Vec<f64> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for ((_, _, group, an), fd) in probes.into_iter().zip(numeric) {
        let fd = fd?;
        let slot = *index.entry(group.clone()).or_insert_with(|| {
            groups.push(GroupReport {
                name: group,
                elements: 0,
                worst_relative_error: 0.0,
                worst_element_error: 0.0,
                worst_analytic: an,
                worst_numeric: fd,
                passed: true,
            });
            scale.push(0.0);
            groups.len() - 1
        });
        let g = &mut groups[slot];
        g.elements += 1;
        scale[slot] = scale[slot].max(an.abs()).max(fd.abs());
        let abs = (an - fd).abs();
        // stash the worst absolute gap; normalized once the group scale is known
        if abs > g.worst_relative_error || abs.is_nan() {
            g.worst_relative_error = abs;
            g.worst_analytic = an;
            g.worst_numeric = fd;
        }
        g.worst_element_error = g.worst_element_error.max(relative_error(an, fd));
    }
    for (g, s) in groups.iter_mut().zip(scale) {
        g.worst_relative_error /= s.max(1e-8);
        g.passed = g.worst_relative_error < cfg.tolerance;
    }
    Ok(GradcheckReport {
        variant: cfg.variant,
        tolerance: cfg.tolerance,
        groups,
    })
}
