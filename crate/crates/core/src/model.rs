//! Two-stream network: an appearance stream and a flow stream, each a small
//! convolutional stem feeding a recurrent cell and a pooled linear classifier.
//!
//! Input- and forget-gate kernels are either one shared set
//! ([`GateSharing::Shared`]) or one set per stream. Because a gradient
//! container has the same type as the model, backpropagating both streams into
//! one container sums the two modality gradients on the shared kernels.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{
    cell_backward_into, cell_forward, fill_uniform, init_core, init_gates, init_kernel, CellConfig, CellCore,
    CellNorms, CellRef, CellState, GateKernels, HiddenTransition, TapeNode, Variant,
};
use crate::error::{shape_err, Error, Result};
use crate::ops::conv::conv2d_backward_into;
use crate::ops::{
    avg_pool2, avg_pool2_backward, conv2d, global_avg_pool, global_avg_pool_backward, Affine, ChannelNorm, NormMode,
};
use crate::par::Exec;
use crate::params::{join, ParamView, ParamViewMut, Parameters};
use crate::tensor::{ConvKernel, LatticeFilterBank, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Flow,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Rgb, Modality::Flow];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two 3x3 convolutions with tanh, then 2x2 average pooling. The smooth
/// activation keeps central differences valid everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem<T> {
    pub conv1: ConvKernel<T>,
    pub conv2: ConvKernel<T>,
}

#[derive(Clone, Debug)]
pub struct StemCache<T> {
    input: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Real> Stem<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StemCache<T>)> {
        let a1 = conv2d(x, &self.conv1)?.map(|v| v.tanh());
        let a2 = conv2d(&a1, &self.conv2)?.map(|v| v.tanh());
        let out = avg_pool2(&a2)?;
        Ok((
            out,
            StemCache {
                input: x.clone(),
                a1,
                a2,
            },
        ))
    }

    /// Accumulates into `grad` when given; returns the input gradient when requested.
    pub fn backward_into(
        &self,
        grad_out: &Tensor<T>,
        cache: &StemCache<T>,
        grad: Option<&mut Stem<T>>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mask = |g: T, a: T| g * (T::one() - a * a);
        let g2 = avg_pool2_backward(grad_out)?.zip_map(&cache.a2, "stem_backward", mask)?;
        let mut scratch;
        let (gk1, gk2) = match grad {
            Some(g) => (&mut g.conv1, &mut g.conv2),
            None => {
                scratch = self.clone();
                let Stem { conv1, conv2 } = &mut scratch;
                (conv1, conv2)
            }
        };
        let g1 = conv2d_backward_into(&g2, &cache.a1, &self.conv2, gk2, true)?
            .expect("requested")
            .zip_map(&cache.a1, "stem_backward", mask)?;
        conv2d_backward_into(&g1, &cache.input, &self.conv1, gk1, want_input)
    }
}

impl<T: Real> Parameters<T> for Stem<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
    }
}

/// Everything private to one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams<T> {
    pub stem: Stem<T>,
    pub cell: CellCore<T>,
    pub classifier: Affine<T>,
}

impl<T: Real> Parameters<T> for StreamParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.stem.collect(&join(prefix, "stem"), out);
        self.cell.collect(&join(prefix, "cell"), out);
        self.classifier.collect(&join(prefix, "classifier"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.stem.collect_mut(&join(prefix, "stem"), out);
        self.cell.collect_mut(&join(prefix, "cell"), out);
        self.classifier.collect_mut(&join(prefix, "classifier"), out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GateSharing<T> {
    Shared(GateKernels<T>),
    Separate { rgb: GateKernels<T>, flow: GateKernels<T> },
}

impl<T: Real> GateSharing<T> {
    pub fn for_stream(&self, m: Modality) -> &GateKernels<T> {
        match (self, m) {
            (GateSharing::Shared(g), _) => g,
            (GateSharing::Separate { rgb, .. }, Modality::Rgb) => rgb,
            (GateSharing::Separate { flow, .. }, Modality::Flow) => flow,
        }
    }

    pub fn for_stream_mut(&mut self, m: Modality) -> &mut GateKernels<T> {
        match (self, m) {
            (GateSharing::Shared(g), _) => g,
            (GateSharing::Separate { rgb, .. }, Modality::Rgb) => rgb,
            (GateSharing::Separate { flow, .. }, Modality::Flow) => flow,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self, GateSharing::Shared(_))
    }
}

impl<T: Real> Parameters<T> for GateSharing<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        match self {
            GateSharing::Shared(g) => g.collect(&join(prefix, "gates"), out),
            GateSharing::Separate { rgb, flow } => {
                rgb.collect(&join(prefix, "rgb.gates"), out);
                flow.collect(&join(prefix, "flow.gates"), out);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        match self {
            GateSharing::Shared(g) => g.collect_mut(&join(prefix, "gates"), out),
            GateSharing::Separate { rgb, flow } => {
                rgb.collect_mut(&join(prefix, "rgb.gates"), out);
                flow.collect_mut(&join(prefix, "flow.gates"), out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channels of one stacked appearance clip (frames x image channels).
    pub rgb_channels: usize,
    /// Channels of one stacked flow clip (frames x 2).
    pub flow_channels: usize,
    pub stem_channels: usize,
    pub hidden_channels: usize,
    /// Crop extent fed to the stems; must be even.
    pub input_rows: usize,
    pub input_cols: usize,
    pub num_classes: usize,
    pub share_gates: bool,
    pub norm: bool,
    pub fusion_weight: f64,
}

impl ModelConfig {
    pub fn map_rows(&self) -> usize {
        self.input_rows / 2
    }

    pub fn map_cols(&self) -> usize {
        self.input_cols / 2
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.rgb_channels,
            self.flow_channels,
            self.stem_channels,
            self.hidden_channels,
            self.input_rows,
            self.input_cols,
        ];
        if extents.contains(&0) || self.num_classes == 0 {
            return Err(Error::Invalid(format!("model extents and class count must be positive: {self:?}")));
        }
        if !self.input_rows.is_multiple_of(2) || !self.input_cols.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "input extent {}x{} must be even for pooling",
                self.input_rows, self.input_cols
            )));
        }
        check_fusion_weight(self.fusion_weight)
    }

    fn cell_config(&self) -> CellConfig {
        CellConfig {
            variant: self.variant,
            input_channels: self.stem_channels,
            hidden_channels: self.hidden_channels,
            rows: self.map_rows(),
            cols: self.map_cols(),
            norm: self.norm,
        }
    }
}

fn check_fusion_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Invalid(format!("fusion weight {w} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStreamModel<T> {
    pub rgb: StreamParams<T>,
    pub flow: StreamParams<T>,
    pub gates: GateSharing<T>,
    pub fusion_weight: f64,
}

impl<T: Real> Parameters<T> for TwoStreamModel<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.gates.collect(prefix, out);
        self.rgb.collect(&join(prefix, "rgb"), out);
        self.flow.collect(&join(prefix, "flow"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.gates.collect_mut(prefix, out);
        self.rgb.collect_mut(&join(prefix, "rgb"), out);
        self.flow.collect_mut(&join(prefix, "flow"), out);
    }
}

/// Saved state of one stream over one episode.
#[derive(Clone, Debug)]
pub struct StreamTrace<T> {
    pub stems: Vec<StemCache<T>>,
    pub tape: Vec<TapeNode<T>>,
    /// Pooled hidden features per step.
    pub features: Vec<Vec<T>>,
    /// Class scores per step.
    pub scores: Vec<Vec<T>>,
    map_rows: usize,
    map_cols: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeTrace<T> {
    pub rgb: StreamTrace<T>,
    pub flow: StreamTrace<T>,
}

impl<T: Real> EpisodeTrace<T> {
    pub fn stream(&self, m: Modality) -> &StreamTrace<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }
}

/// Which gradients a backward pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Accumulate stem parameter gradients (off while the stems are frozen).
    pub stems: bool,
    /// Return gradients with respect to the stacked input clips.
    pub inputs: bool,
}

impl BackwardOptions {
    pub const FULL: BackwardOptions = BackwardOptions { stems: true, inputs: false };
    pub const CELLS_ONLY: BackwardOptions = BackwardOptions { stems: false, inputs: false };
}

impl<T: Real> TwoStreamModel<T> {
    /// Deterministic fan-in-scaled initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell_cfg = cfg.cell_config();
        let stem = |inp: usize, rng: &mut ChaCha8Rng| Stem {
            conv1: init_kernel(cfg.stem_channels, inp, rng),
            conv2: init_kernel(cfg.stem_channels, cfg.stem_channels, rng),
        };
        let stem_rgb = stem(cfg.rgb_channels, &mut rng);
        let stem_flow = stem(cfg.flow_channels, &mut rng);
        let gates = if cfg.share_gates {
            GateSharing::Shared(init_gates(&cell_cfg, &mut rng)?)
        } else {
            let rgb = init_gates(&cell_cfg, &mut rng)?;
            let flow = init_gates(&cell_cfg, &mut rng)?;
            GateSharing::Separate { rgb, flow }
        };
        let core_rgb = init_core(&cell_cfg, &mut rng)?;
        let core_flow = init_core(&cell_cfg, &mut rng)?;
        let classifier = |rng: &mut ChaCha8Rng| {
            let mut a = Affine::zeros(cfg.num_classes, cfg.hidden_channels);
            fill_uniform(&mut a.weight, cfg.hidden_channels, rng);
            a
        };
        let cls_rgb = classifier(&mut rng);
        let cls_flow = classifier(&mut rng);
        Ok(Self {
            rgb: StreamParams {
                stem: stem_rgb,
                cell: core_rgb,
                classifier: cls_rgb,
            },
            flow: StreamParams {
                stem: stem_flow,
                cell: core_flow,
                classifier: cls_flow,
            },
            gates,
            fusion_weight: cfg.fusion_weight,
        })
    }

    pub fn stream(&self, m: Modality) -> &StreamParams<T> {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }

    pub fn cell(&self, m: Modality) -> CellRef<'_, T> {
        CellRef {
            gates: self.gates.for_stream(m),
            core: &self.stream(m).cell,
        }
    }

    pub fn variant(&self) -> Variant {
        self.rgb.cell.variant()
    }

    pub fn num_classes(&self) -> usize {
        self.rgb.classifier.outputs
    }

    pub fn hidden_channels(&self) -> usize {
        self.rgb.cell.hidden_channels()
    }

    pub fn has_norm(&self) -> bool {
        self.rgb.cell.norms.is_some()
    }

    /// Channels expected in one stacked clip of the given modality.
    pub fn input_channels(&self, m: Modality) -> usize {
        self.stream(m).stem.conv1.in_channels
    }

    pub fn forward_stream(&self, m: Modality, clips: &[Tensor<T>], mode: NormMode) -> Result<StreamTrace<T>> {
        let stream = self.stream(m);
        let cell = self.cell(m);
        let first = clips.first().ok_or(Error::EmptyTape)?;
        let (_, rows, cols) = first.chw()?;
        let (mr, mc) = (rows / 2, cols / 2);
        let mut state = CellState::zeros(self.hidden_channels(), mr, mc);
        let mut trace = StreamTrace {
            stems: Vec::with_capacity(clips.len()),
            tape: Vec::with_capacity(clips.len()),
            features: Vec::with_capacity(clips.len()),
            scores: Vec::with_capacity(clips.len()),
            map_rows: mr,
            map_cols: mc,
        };
        for clip in clips {
            if clip.shape() != first.shape() {
                return shape_err("forward_stream", clip.shape(), first.shape());
            }
            let (x, cache) = stream.stem.forward(clip)?;
            let (next, node) = cell_forward(cell, &state, &x, mode, true)?;
            let feat = global_avg_pool(&next.h)?;
            trace.scores.push(stream.classifier.apply(&feat)?);
            trace.features.push(feat);
            trace.stems.push(cache);
            trace.tape.push(node.expect("recorded"));
            state = next;
        }
        Ok(trace)
    }

    /// Runs both streams over one episode's aligned clips.
    pub fn forward_episode(
        &self,
        rgb: &[Tensor<T>],
        flow: &[Tensor<T>],
        mode: NormMode,
        exec: Exec,
    ) -> Result<EpisodeTrace<T>> {
        if rgb.len() != flow.len() {
            return Err(Error::Invalid(format!(
                "modality misalignment: {} appearance clips vs {} flow clips",
                rgb.len(),
                flow.len()
            )));
        }
        let (r, f) = exec.join(
            || self.forward_stream(Modality::Rgb, rgb, mode),
            || self.forward_stream(Modality::Flow, flow, mode),
        );
        Ok(EpisodeTrace { rgb: r?, flow: f? })
    }

    /// Backpropagates per-step score gradients of one stream into `grads`.
    pub fn backward_stream(
        &self,
        m: Modality,
        trace: &StreamTrace<T>,
        grad_scores: &[Vec<T>],
        grads: &mut TwoStreamModel<T>,
        opts: BackwardOptions,
    ) -> Result<Option<Vec<Tensor<T>>>> {
        if grad_scores.len() != trace.scores.len() {
            return Err(Error::Invalid(format!(
                "{} score gradients for {} steps",
                grad_scores.len(),
                trace.scores.len()
            )));
        }
        let stream = self.stream(m);
        let (grad_stream, grad_gates) = match m {
            Modality::Rgb => (&mut grads.rgb, grads.gates.for_stream_mut(m)),
            Modality::Flow => (&mut grads.flow, grads.gates.for_stream_mut(m)),
        };
        let mut grad_h = Vec::with_capacity(grad_scores.len());
        for (g, feat) in grad_scores.iter().zip(&trace.features) {
            let gf = stream.classifier.backward_into(g, feat, &mut grad_stream.classifier)?;
            grad_h.push(global_avg_pool_backward(&gf, trace.map_rows, trace.map_cols));
        }
        let need_x = opts.stems || opts.inputs;
        let grad_x = cell_backward_into(
            self.cell(m),
            &trace.tape,
            &grad_h,
            grad_gates,
            &mut grad_stream.cell,
            need_x,
        )?;
        if !need_x {
            return Ok(None);
        }
        let mut inputs = Vec::with_capacity(grad_x.len());
        for (gx, cache) in grad_x.iter().zip(&trace.stems) {
            let gs = opts.stems.then_some(&mut grad_stream.stem);
            let gi = stream.stem.backward_into(gx, cache, gs, opts.inputs)?;
            if let Some(gi) = gi {
                inputs.push(gi);
            }
        }
        Ok(opts.inputs.then_some(inputs))
    }

    pub fn backward_episode(
        &self,
        trace: &EpisodeTrace<T>,
        grad_rgb: &[Vec<T>],
        grad_flow: &[Vec<T>],
        grads: &mut TwoStreamModel<T>,
        opts: BackwardOptions,
    ) -> Result<()> {
        self.backward_stream(Modality::Rgb, &trace.rgb, grad_rgb, grads, opts)?;
        self.backward_stream(Modality::Flow, &trace.flow, grad_flow, grads, opts)?;
        Ok(())
    }

    /// Adds the per-sample moments observed by every norm during `trace` into
    /// the running-stat slots of `grads`. Returns the number of observations
    /// added per slot.
    pub fn accumulate_moments(trace: &EpisodeTrace<T>, grads: &mut TwoStreamModel<T>) -> usize {
        let mut count = 0;
        for (st, core) in [(&trace.rgb, &mut grads.rgb.cell), (&trace.flow, &mut grads.flow.cell)] {
            let Some(norms) = core.norms.as_mut() else {
                return 0;
            };
            count = st.tape.len();
            for node in &st.tape {
                let Some(caches) = &node.norms else { continue };
                for (slot, cache) in norms.slots.iter_mut().zip(caches) {
                    for (a, &b) in slot.running_mean.iter_mut().zip(&cache.mean) {
                        *a += b;
                    }
                    for (a, &b) in slot.running_var.iter_mut().zip(&cache.var) {
                        *a += b;
                    }
                }
            }
        }
        count
    }

    /// Folds accumulated moments (`grads` running slots divided by `count`)
    /// into the model's running statistics.
    pub fn absorb_moments(&mut self, grads: &TwoStreamModel<T>, count: usize) {
        if count == 0 {
            return;
        }
        let inv = T::one() / T::of(count as f64);
        for (core, gcore) in [(&mut self.rgb.cell, &grads.rgb.cell), (&mut self.flow.cell, &grads.flow.cell)] {
            let (Some(n), Some(g)) = (core.norms.as_mut(), gcore.norms.as_ref()) else {
                continue;
            };
            for (slot, gslot) in n.slots.iter_mut().zip(&g.slots) {
                let mean: Vec<T> = gslot.running_mean.iter().map(|&v| v * inv).collect();
                let var: Vec<T> = gslot.running_var.iter().map(|&v| v * inv).collect();
                slot.absorb(&mean, &var);
            }
        }
    }

    /// A model with the same layout and every slot zero, in any precision.
    pub fn zeros_as<U: Real>(&self) -> TwoStreamModel<U> {
        fn kernel<T: Real, U: Real>(k: &ConvKernel<T>) -> ConvKernel<U> {
            ConvKernel::zeros(k.out_channels, k.in_channels, k.rows, k.cols).expect("valid source kernel")
        }
        fn gates<T: Real, U: Real>(g: &GateKernels<T>) -> GateKernels<U> {
            GateKernels {
                xi: kernel(&g.xi),
                hi: kernel(&g.hi),
                xf: kernel(&g.xf),
                hf: kernel(&g.hf),
            }
        }
        fn stream<T: Real, U: Real>(s: &StreamParams<T>) -> StreamParams<U> {
            let c = &s.cell;
            let hc = match &c.hc {
                HiddenTransition::Conv(k) => HiddenTransition::Conv(kernel(k)),
                HiddenTransition::Lattice(b) => HiddenTransition::Lattice(
                    LatticeFilterBank::zeros(b.in_channels, b.rows, b.cols, b.out_channels, b.kernel_rows, b.kernel_cols)
                        .expect("valid source bank"),
                ),
            };
            let norms = c.norms.as_ref().map(|n| CellNorms {
                slots: std::array::from_fn(|i| {
                    let mut z = ChannelNorm::new(n.slots[i].channels());
                    z.scale.iter_mut().for_each(|v| *v = U::zero());
                    z.running_var.iter_mut().for_each(|v| *v = U::zero());
                    z
                }),
            });
            StreamParams {
                stem: Stem {
                    conv1: kernel(&s.stem.conv1),
                    conv2: kernel(&s.stem.conv2),
                },
                cell: CellCore {
                    xc: kernel(&c.xc),
                    hc,
                    xo: kernel(&c.xo),
                    ho: kernel(&c.ho),
                    norms,
                },
                classifier: Affine::zeros(s.classifier.outputs, s.classifier.inputs),
            }
        }
        TwoStreamModel {
            rgb: stream(&self.rgb),
            flow: stream(&self.flow),
            gates: match &self.gates {
                GateSharing::Shared(g) => GateSharing::Shared(gates(g)),
                GateSharing::Separate { rgb, flow } => GateSharing::Separate {
                    rgb: gates(rgb),
                    flow: gates(flow),
                },
            },
            fusion_weight: self.fusion_weight,
        }
    }

    /// Converts every slot to another precision.
    pub fn cast<U: Real>(&self) -> TwoStreamModel<U> {
        let mut out: TwoStreamModel<U> = self.zeros_as();
        for (d, s) in out.views_mut().into_iter().zip(self.views()) {
            for (a, &b) in d.data.iter_mut().zip(s.data) {
                *a = U::of(b.as_f64());
            }
        }
        out
    }
}

/// Plain SGD step `W := W - lr * g` over trainable slots.
pub fn sgd_step<T: Real>(model: &mut TwoStreamModel<T>, grads: &TwoStreamModel<T>, lr: T) {
    let gv = grads.views();
    for (p, g) in model.views_mut().into_iter().zip(gv) {
        if !p.kind.trainable() {
            continue;
        }
        for (w, &d) in p.data.iter_mut().zip(g.data) {
            *w -= lr * d;
        }
    }
}

/// Sums two per-modality gradient containers and applies one SGD step: shared
/// gate kernels move by `-lr (g_rgb + g_flow)`, private kernels by their own
/// stream's gradient.
pub fn shared_gate_update<T: Real>(
    model: &mut TwoStreamModel<T>,
    grads_rgb: &TwoStreamModel<T>,
    grads_flow: &TwoStreamModel<T>,
    lr: T,
) -> Result<()> {
    let names = |m: &TwoStreamModel<T>| m.views().iter().map(|v| (v.name.clone(), v.shape.clone())).collect::<Vec<_>>();
    let expected = names(model);
    for g in [grads_rgb, grads_flow] {
        if names(g) != expected {
            return Err(Error::Invalid("gradient container does not match the model layout".into()));
        }
    }
    let mut total = grads_rgb.clone();
    crate::params::axpy(&mut total, T::one(), grads_flow);
    sgd_step(model, &total, lr);
    Ok(())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `w softmax(rgb) + (1 - w) softmax(flow)`.
pub fn fuse_scores(rgb: &[f64], flow: &[f64], w: f64) -> Result<Vec<f64>> {
    check_fusion_weight(w)?;
    if rgb.len() != flow.len() {
        return shape_err("fuse_scores", &[rgb.len()], &[flow.len()]);
    }
    let (p, q) = (softmax(rgb), softmax(flow));
    Ok(p.iter().zip(&q).map(|(a, b)| w * a + (1.0 - w) * b).collect())
}

/// Mean of per-step score vectors.
pub fn mean_scores<T: Real>(steps: &[Vec<T>]) -> Vec<f64> {
    let k = steps.first().map_or(0, Vec::len);
    let mut out = vec![0.0; k];
    for s in steps {
        for (o, &v) in out.iter_mut().zip(s) {
            *o += v.as_f64();
        }
    }
    let n = steps.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Random inputs for tests and benches.
pub fn random_clips<T: Real>(n: usize, channels: usize, rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Tensor<T>> {
    (0..n)
        .map(|_| Tensor::from_fn(&[channels, rows, cols], |_| T::of(rng.gen_range(-1.0..1.0))))
        .collect()
}
