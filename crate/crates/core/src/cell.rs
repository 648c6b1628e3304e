//! Lattice-LSTM and ConvLSTM cells with per-step tapes and exact BPTT.
//!
//! One step computes
//!
//! ```text
//! C~ = tanh(Wxc * X + Whc (L) H_prev)
//! i  = sigmoid(Wxi * X + Whi * H_prev)
//! f  = sigmoid(Wxf * X + Whf * H_prev)
//! C  = f o C_prev + i o C~
//! o  = sigmoid(Wxo * X + Who * H_prev)
//! H  = o o tanh(C)
//! ```
//!
//! where `*` is convolution and `(L)` is the lattice superposition for the
//! Lattice-LSTM (a plain convolution for the ConvLSTM baseline). With norms
//! enabled each convolution output is normalized before the sum.
//!
//! Parameters are split into [`GateKernels`] (input/forget gate kernels, which a
//! two-stream model may share) and [`CellCore`] (everything else).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::conv2d_backward_into;
use crate::ops::lattice::lattice_backward_into;
use crate::ops::norm::{channel_norm, channel_norm_backward, ChannelNorm, NormCache, NormMode};
use crate::ops::pointwise::sigmoid_scalar;
use crate::ops::{conv2d, lattice_apply};
use crate::params::{join, ParamView, ParamViewMut, Parameters};
use crate::tensor::{ConvKernel, LatticeFilterBank, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    L2stm,
    Convlstm,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::L2stm => "l2stm",
            Variant::Convlstm => "convlstm",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2stm" | "lattice" | "lattice-lstm" => Ok(Variant::L2stm),
            "convlstm" | "conv" => Ok(Variant::Convlstm),
            other => Err(Error::Invalid(format!("unknown variant '{other}'"))),
        }
    }
}

/// Hidden-to-candidate transition `Whc`.
#[derive(Clone, Debug, PartialEq)]
pub enum HiddenTransition<T> {
    Lattice(LatticeFilterBank<T>),
    Conv(ConvKernel<T>),
}

impl<T: Real> HiddenTransition<T> {
    pub fn apply(&self, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            HiddenTransition::Lattice(b) => lattice_apply(hidden, b),
            HiddenTransition::Conv(k) => conv2d(hidden, k),
        }
    }

    fn backward_into(
        &self,
        grad_out: &Tensor<T>,
        hidden: &Tensor<T>,
        grad: &mut HiddenTransition<T>,
    ) -> Result<Tensor<T>> {
        let gh = match (self, grad) {
            (HiddenTransition::Lattice(b), HiddenTransition::Lattice(gb)) => {
                lattice_backward_into(grad_out, hidden, b, gb, true)?
            }
            (HiddenTransition::Conv(k), HiddenTransition::Conv(gk)) => {
                conv2d_backward_into(grad_out, hidden, k, gk, true)?
            }
            _ => return Err(Error::Invalid("gradient container has the other Whc variant".into())),
        };
        Ok(gh.expect("hidden gradient requested"))
    }

    pub fn variant(&self) -> Variant {
        match self {
            HiddenTransition::Lattice(_) => Variant::L2stm,
            HiddenTransition::Conv(_) => Variant::Convlstm,
        }
    }
}

impl<T: Real> Parameters<T> for HiddenTransition<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        match self {
            HiddenTransition::Lattice(b) => b.collect(prefix, out),
            HiddenTransition::Conv(k) => k.collect(prefix, out),
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        match self {
            HiddenTransition::Lattice(b) => b.collect_mut(prefix, out),
            HiddenTransition::Conv(k) => k.collect_mut(prefix, out),
        }
    }
}

/// Input- and forget-gate kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct GateKernels<T> {
    pub xi: ConvKernel<T>,
    pub hi: ConvKernel<T>,
    pub xf: ConvKernel<T>,
    pub hf: ConvKernel<T>,
}

impl<T: Real> Parameters<T> for GateKernels<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.xi.collect(&join(prefix, "xi"), out);
        self.hi.collect(&join(prefix, "hi"), out);
        self.xf.collect(&join(prefix, "xf"), out);
        self.hf.collect(&join(prefix, "hf"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.xi.collect_mut(&join(prefix, "xi"), out);
        self.hi.collect_mut(&join(prefix, "hi"), out);
        self.xf.collect_mut(&join(prefix, "xf"), out);
        self.hf.collect_mut(&join(prefix, "hf"), out);
    }
}

/// Norms for the eight convolution outputs, in the order
/// `xc, hc, xi, hi, xf, hf, xo, ho`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellNorms<T> {
    pub slots: [ChannelNorm<T>; 8],
}

pub const NORM_SLOT_NAMES: [&str; 8] = [
    "norm_xc", "norm_hc", "norm_xi", "norm_hi", "norm_xf", "norm_hf", "norm_xo", "norm_ho",
];

impl<T: Real> Parameters<T> for CellNorms<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        for (n, name) in self.slots.iter().zip(NORM_SLOT_NAMES) {
            n.collect(&join(prefix, name), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        for (n, name) in self.slots.iter_mut().zip(NORM_SLOT_NAMES) {
            n.collect_mut(&join(prefix, name), out);
        }
    }
}

/// Everything in a cell except the input/forget gate kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct CellCore<T> {
    pub xc: ConvKernel<T>,
    pub hc: HiddenTransition<T>,
    pub xo: ConvKernel<T>,
    pub ho: ConvKernel<T>,
    pub norms: Option<CellNorms<T>>,
}

impl<T: Real> CellCore<T> {
    pub fn hidden_channels(&self) -> usize {
        self.xc.out_channels
    }

    pub fn input_channels(&self) -> usize {
        self.xc.in_channels
    }

    pub fn variant(&self) -> Variant {
        self.hc.variant()
    }
}

impl<T: Real> Parameters<T> for CellCore<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.xc.collect(&join(prefix, "xc"), out);
        self.hc.collect(&join(prefix, "hc"), out);
        self.xo.collect(&join(prefix, "xo"), out);
        self.ho.collect(&join(prefix, "ho"), out);
        if let Some(n) = &self.norms {
            n.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.xc.collect_mut(&join(prefix, "xc"), out);
        self.hc.collect_mut(&join(prefix, "hc"), out);
        self.xo.collect_mut(&join(prefix, "xo"), out);
        self.ho.collect_mut(&join(prefix, "ho"), out);
        if let Some(n) = &mut self.norms {
            n.collect_mut(prefix, out);
        }
    }
}

/// A standalone cell: gates and core owned together.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T> {
    pub gates: GateKernels<T>,
    pub core: CellCore<T>,
}

impl<T: Real> CellParams<T> {
    pub fn as_ref(&self) -> CellRef<'_, T> {
        CellRef {
            gates: &self.gates,
            core: &self.core,
        }
    }
}

impl<T: Real> Parameters<T> for CellParams<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        self.gates.collect(prefix, out);
        self.core.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        self.gates.collect_mut(prefix, out);
        self.core.collect_mut(prefix, out);
    }
}

/// Borrowed view of a cell whose gate kernels may live elsewhere.
#[derive(Clone, Copy, Debug)]
pub struct CellRef<'a, T> {
    pub gates: &'a GateKernels<T>,
    pub core: &'a CellCore<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> CellState<T> {
    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            h: Tensor::zeros(&[channels, rows, cols]),
            c: Tensor::zeros(&[channels, rows, cols]),
        }
    }
}

/// Saved activations of one unrolled step.
#[derive(Clone, Debug)]
pub struct TapeNode<T> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub c_prev: Tensor<T>,
    /// Pre-activations of `C~, i, f, o`.
    pub pre_c: Tensor<T>,
    pub pre_i: Tensor<T>,
    pub pre_f: Tensor<T>,
    pub pre_o: Tensor<T>,
    pub i: Tensor<T>,
    pub f: Tensor<T>,
    pub o: Tensor<T>,
    pub c_tilde: Tensor<T>,
    pub c: Tensor<T>,
    pub tanh_c: Tensor<T>,
    /// Norm caches in `NORM_SLOT_NAMES` order, when norms are enabled.
    pub norms: Option<Vec<NormCache<T>>>,
}

fn normed<T: Real>(
    raw: Tensor<T>,
    norm: Option<&ChannelNorm<T>>,
    mode: NormMode,
    caches: &mut Vec<NormCache<T>>,
) -> Result<Tensor<T>> {
    match norm {
        None => Ok(raw),
        Some(n) => {
            let (y, cache) = channel_norm(&raw, n, mode)?;
            caches.push(cache);
            Ok(y)
        }
    }
}

fn sum_into<T: Real>(mut a: Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.add_assign(b)?;
    Ok(a)
}

/// One forward step. Returns the new state and, when `record` is set, the tape node.
pub fn cell_forward<T: Real>(
    cell: CellRef<'_, T>,
    state: &CellState<T>,
    x: &Tensor<T>,
    mode: NormMode,
    record: bool,
) -> Result<(CellState<T>, Option<TapeNode<T>>)> {
    let (_, rows, cols) = x.chw()?;
    let (hc, hr, hw) = state.h.chw()?;
    if rows != hr || cols != hw || hc != cell.core.hidden_channels() {
        return crate::error::shape_err("cell_forward", x.shape(), state.h.shape());
    }
    state.h.same_shape(&state.c, "cell_forward")?;
    let core = cell.core;
    let gates = cell.gates;
    let n = |slot: usize| core.norms.as_ref().map(|ns| &ns.slots[slot]);
    let mut caches = Vec::new();
    let h = &state.h;

    let a = normed(conv2d(x, &core.xc)?, n(0), mode, &mut caches)?;
    let b = normed(core.hc.apply(h)?, n(1), mode, &mut caches)?;
    let pre_c = sum_into(a, &b)?;
    let a = normed(conv2d(x, &gates.xi)?, n(2), mode, &mut caches)?;
    let b = normed(conv2d(h, &gates.hi)?, n(3), mode, &mut caches)?;
    let pre_i = sum_into(a, &b)?;
    let a = normed(conv2d(x, &gates.xf)?, n(4), mode, &mut caches)?;
    let b = normed(conv2d(h, &gates.hf)?, n(5), mode, &mut caches)?;
    let pre_f = sum_into(a, &b)?;
    let a = normed(conv2d(x, &core.xo)?, n(6), mode, &mut caches)?;
    let b = normed(conv2d(h, &core.ho)?, n(7), mode, &mut caches)?;
    let pre_o = sum_into(a, &b)?;

    let c_tilde = pre_c.map(|v| v.tanh());
    let i = pre_i.map(sigmoid_scalar);
    let f = pre_f.map(sigmoid_scalar);
    let o = pre_o.map(sigmoid_scalar);
    let c = Tensor::from_fn(state.c.shape(), |k| {
        f.data()[k] * state.c.data()[k] + i.data()[k] * c_tilde.data()[k]
    });
    let tanh_c = c.map(|v| v.tanh());
    let h_new = o.zip_map(&tanh_c, "cell_forward", |a, b| a * b)?;
    c.ensure_finite("cell_forward")?;
    h_new.ensure_finite("cell_forward")?;

    let tape = record.then(|| TapeNode {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        pre_c,
        pre_i,
        pre_f,
        pre_o,
        i,
        f,
        o,
        c_tilde,
        c: c.clone(),
        tanh_c,
        norms: core.norms.as_ref().map(|_| caches),
    });
    Ok((CellState { h: h_new, c }, tape))
}

/// Runs `xs` through the cell from the zero state, recording every step.
pub fn unroll<T: Real>(
    cell: CellRef<'_, T>,
    xs: &[Tensor<T>],
    mode: NormMode,
) -> Result<(Vec<CellState<T>>, Vec<TapeNode<T>>)> {
    let first = xs.first().ok_or(Error::EmptyTape)?;
    let (_, r, c) = first.chw()?;
    let mut state = CellState::zeros(cell.core.hidden_channels(), r, c);
    let mut states = Vec::with_capacity(xs.len());
    let mut tape = Vec::with_capacity(xs.len());
    for x in xs {
        let (s, node) = cell_forward(cell, &state, x, mode, true)?;
        tape.push(node.expect("recorded"));
        states.push(s.clone());
        state = s;
    }
    Ok((states, tape))
}

/// Backpropagates one branch `norm(op(input))` and accumulates its parameter
/// gradients. Returns the gradient with respect to the op's raw output.
fn branch_grad<T: Real>(
    grad: &Tensor<T>,
    slot: usize,
    core: &CellCore<T>,
    tape: &TapeNode<T>,
    grad_core: &mut CellCore<T>,
) -> Result<Tensor<T>> {
    match (&core.norms, &tape.norms) {
        (Some(ns), Some(caches)) => {
            let (gin, gs, gb) = channel_norm_backward(grad, &caches[slot], &ns.slots[slot])?;
            let gn = grad_core
                .norms
                .as_mut()
                .ok_or_else(|| Error::Invalid("gradient container lacks norms".into()))?;
            for (a, b) in gn.slots[slot].scale.iter_mut().zip(gs) {
                *a += b;
            }
            for (a, b) in gn.slots[slot].shift.iter_mut().zip(gb) {
                *a += b;
            }
            Ok(gin)
        }
        _ => Ok(grad.clone()),
    }
}

fn accumulate<T: Real>(acc: &mut Option<Tensor<T>>, g: Option<Tensor<T>>) -> Result<()> {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_assign(&g)?,
            None => *acc = Some(g),
        }
    }
    Ok(())
}

/// Exact BPTT through a recorded unroll.
///
/// `grad_h[t]` seeds the loss gradient with respect to the hidden output of step
/// `t`. Parameter gradients are accumulated into `grad_gates` and `grad_core`.
/// Returns the gradient with respect to each step's input when `want_inputs`
/// is set, otherwise an empty vector.
pub fn cell_backward_into<T: Real>(
    cell: CellRef<'_, T>,
    tape: &[TapeNode<T>],
    grad_h: &[Tensor<T>],
    grad_gates: &mut GateKernels<T>,
    grad_core: &mut CellCore<T>,
    want_inputs: bool,
) -> Result<Vec<Tensor<T>>> {
    if tape.is_empty() {
        return Err(Error::EmptyTape);
    }
    if grad_h.len() != tape.len() {
        return Err(Error::Invalid(format!(
            "{} hidden-gradient seeds for a tape of {} steps",
            grad_h.len(),
            tape.len()
        )));
    }
    let core = cell.core;
    let gates = cell.gates;
    let shape = tape[0].c.shape().to_vec();
    let mut dh_next = Tensor::<T>::zeros(&shape);
    let mut dc_next = Tensor::<T>::zeros(&shape);
    let mut grad_x = vec![None; if want_inputs { tape.len() } else { 0 }];
    let one = T::one();

    for t in (0..tape.len()).rev() {
        let node = &tape[t];
        let mut dh = grad_h[t].clone();
        dh.add_assign(&dh_next)?;
        let len = dh.len();
        let (d, o, tc) = (dh.data(), node.o.data(), node.tanh_c.data());
        let (f, i, ct, cp) = (node.f.data(), node.i.data(), node.c_tilde.data(), node.c_prev.data());

        let mut dc = vec![T::zero(); len];
        let mut da_o = vec![T::zero(); len];
        let mut da_f = vec![T::zero(); len];
        let mut da_i = vec![T::zero(); len];
        let mut da_c = vec![T::zero(); len];
        let mut dc_prev = vec![T::zero(); len];
        for k in 0..len {
            let dck = dc_next.data()[k] + d[k] * o[k] * (one - tc[k] * tc[k]);
            dc[k] = dck;
            da_o[k] = d[k] * tc[k] * o[k] * (one - o[k]);
            da_f[k] = dck * cp[k] * f[k] * (one - f[k]);
            da_i[k] = dck * ct[k] * i[k] * (one - i[k]);
            da_c[k] = dck * i[k] * (one - ct[k] * ct[k]);
            dc_prev[k] = dck * f[k];
        }
        let da_c = Tensor::new(shape.clone(), da_c)?;
        let da_i = Tensor::new(shape.clone(), da_i)?;
        let da_f = Tensor::new(shape.clone(), da_f)?;
        let da_o = Tensor::new(shape.clone(), da_o)?;

        let mut dx: Option<Tensor<T>> = None;
        let mut dh_prev: Option<Tensor<T>> = None;

        // candidate memory
        let g = branch_grad(&da_c, 0, core, node, grad_core)?;
        accumulate(&mut dx, conv2d_backward_into(&g, &node.x, &core.xc, &mut grad_core.xc, want_inputs)?)?;
        let g = branch_grad(&da_c, 1, core, node, grad_core)?;
        let gh = core.hc.backward_into(&g, &node.h_prev, &mut grad_core.hc)?;
        accumulate(&mut dh_prev, Some(gh))?;

        // input and forget gates
        let GateKernels { xi: gxi, hi: ghi, xf: gxf, hf: ghf } = grad_gates;
        for (da, sx, sh, kx, kh, gkx, gkh) in [
            (&da_i, 2, 3, &gates.xi, &gates.hi, gxi, ghi),
            (&da_f, 4, 5, &gates.xf, &gates.hf, gxf, ghf),
        ] {
            let g = branch_grad(da, sx, core, node, grad_core)?;
            accumulate(&mut dx, conv2d_backward_into(&g, &node.x, kx, gkx, want_inputs)?)?;
            let g = branch_grad(da, sh, core, node, grad_core)?;
            accumulate(&mut dh_prev, conv2d_backward_into(&g, &node.h_prev, kh, gkh, true)?)?;
        }

        // output gate
        let g = branch_grad(&da_o, 6, core, node, grad_core)?;
        accumulate(&mut dx, conv2d_backward_into(&g, &node.x, &core.xo, &mut grad_core.xo, want_inputs)?)?;
        let g = branch_grad(&da_o, 7, core, node, grad_core)?;
        accumulate(&mut dh_prev, conv2d_backward_into(&g, &node.h_prev, &core.ho, &mut grad_core.ho, true)?)?;

        dh_next = dh_prev.expect("hidden branches always contribute");
        dc_next = Tensor::new(shape.clone(), dc_prev)?;
        if want_inputs {
            grad_x[t] = dx;
        }
    }
    Ok(grad_x.into_iter().map(|g| g.expect("input branches contribute")).collect())
}

/// Convenience wrapper returning fresh gradient containers.
pub fn cell_backward<T: Real>(
    params: &CellParams<T>,
    tape: &[TapeNode<T>],
    grad_h: &[Tensor<T>],
) -> Result<(CellParams<T>, Vec<Tensor<T>>)> {
    let mut grads = crate::params::zeros_like(params);
    let gx = cell_backward_into(
        params.as_ref(),
        tape,
        grad_h,
        &mut grads.gates,
        &mut grads.core,
        true,
    )?;
    Ok((grads, gx))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellConfig {
    pub variant: Variant,
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub norm: bool,
}

pub(crate) fn fill_uniform<T: Real>(w: &mut [T], fan_in: usize, rng: &mut impl Rng) {
    let a = (3.0 / fan_in as f64).sqrt();
    for v in w {
        *v = T::of(rng.gen_range(-a..a));
    }
}

pub(crate) fn init_kernel<T: Real>(out: usize, inp: usize, rng: &mut impl Rng) -> ConvKernel<T> {
    let mut k = ConvKernel::zeros(out, inp, 3, 3).expect("3x3 is odd");
    let fan = k.fan_in();
    fill_uniform(&mut k.weight, fan, rng);
    k
}

fn check_config(cfg: &CellConfig) -> Result<()> {
    if cfg.input_channels == 0 || cfg.hidden_channels == 0 || cfg.rows == 0 || cfg.cols == 0 {
        return Err(Error::Invalid(format!("cell extents must be positive: {cfg:?}")));
    }
    Ok(())
}

pub fn init_gates<T: Real>(cfg: &CellConfig, rng: &mut impl Rng) -> Result<GateKernels<T>> {
    check_config(cfg)?;
    let (x, h) = (cfg.input_channels, cfg.hidden_channels);
    let xi = init_kernel(h, x, rng);
    let hi = init_kernel(h, h, rng);
    let mut xf = init_kernel(h, x, rng);
    let hf = init_kernel(h, h, rng);
    xf.bias.iter_mut().for_each(|b| *b = T::one());
    Ok(GateKernels { xi, hi, xf, hf })
}

pub fn init_core<T: Real>(cfg: &CellConfig, rng: &mut impl Rng) -> Result<CellCore<T>> {
    check_config(cfg)?;
    let (x, h) = (cfg.input_channels, cfg.hidden_channels);
    let xc = init_kernel(h, x, rng);
    let hc = match cfg.variant {
        Variant::L2stm => {
            let mut bank = LatticeFilterBank::zeros(h, cfg.rows, cfg.cols, h, 3, 3)?;
            let fan = bank.fan_in();
            // every location draws its own filters
            fill_uniform(&mut bank.weight, fan, rng);
            HiddenTransition::Lattice(bank)
        }
        Variant::Convlstm => HiddenTransition::Conv(init_kernel(h, h, rng)),
    };
    let xo = init_kernel(h, x, rng);
    let ho = init_kernel(h, h, rng);
    let norms = cfg.norm.then(|| {
        let mut slots: [ChannelNorm<T>; 8] = std::array::from_fn(|_| ChannelNorm::new(h));
        // forget-gate bias survives normalization through the shift
        slots[4].shift.iter_mut().for_each(|s| *s = T::one());
        CellNorms { slots }
    });
    Ok(CellCore { xc, hc, xo, ho, norms })
}

/// Deterministic initialization: identical seeds give bitwise-identical parameters.
pub fn init_params<T: Real>(cfg: &CellConfig, seed: u64) -> Result<CellParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gates = init_gates(cfg, &mut rng)?;
    let core = init_core(cfg, &mut rng)?;
    Ok(CellParams { gates, core })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::zeros_like;

    fn cfg(variant: Variant, x: usize, h: usize, r: usize, c: usize) -> CellConfig {
        CellConfig {
            variant,
            input_channels: x,
            hidden_channels: h,
            rows: r,
            cols: c,
            norm: false,
        }
    }

    fn random_inputs(n: usize, shape: &[usize], rng: &mut impl Rng) -> Vec<Tensor<f64>> {
        (0..n).map(|_| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn zero_input_zero_state_is_a_fixed_point() {
        let mut p = init_params::<f64>(&cfg(Variant::L2stm, 2, 3, 4, 4), 1).unwrap();
        for v in p.views_mut() {
            if v.kind == crate::params::ParamKind::Bias {
                v.data.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let s = CellState::zeros(3, 4, 4);
        let (next, _) = cell_forward(p.as_ref(), &s, &Tensor::zeros(&[2, 4, 4]), NormMode::Running, false).unwrap();
        assert!(next.h.data().iter().all(|&v| v == 0.0));
        assert!(next.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_memory_per_step() {
        let mut p = init_params::<f64>(&cfg(Variant::L2stm, 1, 2, 3, 3), 2).unwrap();
        for k in [&mut p.gates.xf, &mut p.gates.hf, &mut p.gates.xi, &mut p.gates.hi] {
            k.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        p.gates.xf.bias = vec![20.0; 2];
        p.gates.hf.bias = vec![0.0; 2];
        p.gates.xi.bias = vec![-20.0; 2];
        p.gates.hi.bias = vec![0.0; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = CellState::zeros(2, 3, 3);
        s.c = Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        for x in random_inputs(10, &[1, 3, 3], &mut rng) {
            let (next, _) = cell_forward(p.as_ref(), &s, &x, NormMode::Running, false).unwrap();
            for (a, b) in next.c.data().iter().zip(s.c.data()) {
                assert!((a - b).abs() < 1e-8);
            }
            s = next;
        }
    }

    /// Scalar evaluation of one step on a single-channel 2x2 map.
    fn scalar_step(p: &CellParams<f64>, x: &[f64; 4], h: &[f64; 4], c: &[f64; 4]) -> ([f64; 4], [f64; 4]) {
        let conv = |k: &ConvKernel<f64>, src: &[f64; 4], i: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for m in 0..3 {
                for n in 0..3 {
                    let (si, sj) = (i as i64 + m as i64 - 1, j as i64 + n as i64 - 1);
                    if (0..2).contains(&si) && (0..2).contains(&sj) {
                        s += k.weight[m * 3 + n] * src[(si * 2 + sj) as usize];
                    }
                }
            }
            s + k.bias[0]
        };
        let lat = |i: usize, j: usize| -> f64 {
            match &p.core.hc {
                HiddenTransition::Lattice(b) => {
                    let mut s = 0.0;
                    for m in 0..3 {
                        for n in 0..3 {
                            let (si, sj) = (i as i64 + m as i64 - 1, j as i64 + n as i64 - 1);
                            if (0..2).contains(&si) && (0..2).contains(&sj) {
                                s += b.weight[b.index(0, i, j, 0, m, n)] * h[(si * 2 + sj) as usize];
                            }
                        }
                    }
                    s + b.bias[0]
                }
                HiddenTransition::Conv(k) => conv(k, h, i, j),
            }
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut hn = [0.0; 4];
        let mut cn = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                let q = i * 2 + j;
                let ct = (conv(&p.core.xc, x, i, j) + lat(i, j)).tanh();
                let ig = sig(conv(&p.gates.xi, x, i, j) + conv(&p.gates.hi, h, i, j));
                let fg = sig(conv(&p.gates.xf, x, i, j) + conv(&p.gates.hf, h, i, j));
                let og = sig(conv(&p.core.xo, x, i, j) + conv(&p.core.ho, h, i, j));
                cn[q] = fg * c[q] + ig * ct;
                hn[q] = og * cn[q].tanh();
            }
        }
        (hn, cn)
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_params::<f64>(&cfg(Variant::L2stm, 1, 1, 2, 2), 9).unwrap();
        let xs = random_inputs(3, &[1, 2, 2], &mut rng);
        let mut s = CellState::zeros(1, 2, 2);
        let (mut h, mut c) = ([0.0; 4], [0.0; 4]);
        for x in &xs {
            let xa: [f64; 4] = x.data().try_into().unwrap();
            (h, c) = scalar_step(&p, &xa, &h, &c);
            s = cell_forward(p.as_ref(), &s, x, NormMode::Running, false).unwrap().0;
            for q in 0..4 {
                assert!((s.h.data()[q] - h[q]).abs() < 1e-12);
                assert!((s.c.data()[q] - c[q]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_stay_in_open_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params::<f64>(&cfg(Variant::L2stm, 2, 3, 4, 4), 5).unwrap();
        let (_, tape) = unroll(p.as_ref(), &random_inputs(8, &[2, 4, 4], &mut rng), NormMode::Running).unwrap();
        for node in &tape {
            for g in [&node.i, &node.f, &node.o] {
                assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            assert!(node.c_tilde.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn replaying_a_tape_node_reproduces_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = init_params::<f64>(&cfg(Variant::L2stm, 2, 2, 3, 3), 6).unwrap();
        let (_, tape) = unroll(p.as_ref(), &random_inputs(3, &[2, 3, 3], &mut rng), NormMode::Running).unwrap();
        let node = &tape[2];
        let state = CellState {
            h: node.h_prev.clone(),
            c: node.c_prev.clone(),
        };
        let (s, again) = cell_forward(p.as_ref(), &state, &node.x, NormMode::Running, true).unwrap();
        let again = again.unwrap();
        assert_eq!(s.c, node.c);
        assert_eq!(again.i, node.i);
        assert_eq!(again.pre_c, node.pre_c);
    }

    #[test]
    fn empty_tape_is_an_error() {
        let p = init_params::<f64>(&cfg(Variant::Convlstm, 1, 1, 2, 2), 0).unwrap();
        assert!(matches!(cell_backward(&p, &[], &[]), Err(Error::EmptyTape)));
    }

    #[test]
    fn zero_seeds_give_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_params::<f64>(&cfg(Variant::L2stm, 1, 2, 3, 3), 7).unwrap();
        let (_, tape) = unroll(p.as_ref(), &random_inputs(3, &[1, 3, 3], &mut rng), NormMode::Running).unwrap();
        let seeds = vec![Tensor::zeros(&[2, 3, 3]); 3];
        let (g, gx) = cell_backward(&p, &tape, &seeds).unwrap();
        assert!(g.views().iter().all(|v| v.data.iter().all(|&x| x == 0.0)));
        assert!(gx.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    fn seeded_loss(p: &CellParams<f64>, xs: &[Tensor<f64>], seeds: &[Tensor<f64>], mode: NormMode) -> f64 {
        let (states, _) = unroll(p.as_ref(), xs, mode).unwrap();
        states
            .iter()
            .zip(seeds)
            .map(|(s, g)| s.h.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    fn check_fd(variant: Variant, norm: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = cfg(variant, 1, 1, 4, 4);
        c.norm = norm;
        let mut p = init_params::<f64>(&c, 8).unwrap();
        for v in p.views_mut() {
            v.data.iter_mut().for_each(|x| match v.kind {
                crate::params::ParamKind::RunningVar => *x = rng.gen_range(0.5..1.5),
                _ => *x = rng.gen_range(-0.8..0.8),
            });
        }
        let xs = random_inputs(3, &[1, 4, 4], &mut rng);
        let seeds = random_inputs(3, &[1, 4, 4], &mut rng);
        let (_, tape) = unroll(p.as_ref(), &xs, NormMode::Running).unwrap();
        let (g, gx) = cell_backward(&p, &tape, &seeds).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let n_slots = p.views().len();
        for s in 0..n_slots {
            let (kind, len, name) = {
                let v = &p.views()[s];
                (v.kind, v.data.len(), v.name.clone())
            };
            if !kind.trainable() {
                continue;
            }
            for e in 0..len {
                let mut pp = p.clone();
                pp.views_mut()[s].data[e] += h;
                let mut pm = p.clone();
                pm.views_mut()[s].data[e] -= h;
                let fd = (seeded_loss(&pp, &xs, &seeds, NormMode::Running) - seeded_loss(&pm, &xs, &seeds, NormMode::Running)) / (2.0 * h);
                let an = g.views()[s].data[e];
                assert!(rel(fd, an) < 1e-5, "{variant} {name}[{e}]: fd {fd} vs analytic {an}");
            }
        }
        for t in 0..3 {
            for e in 0..16 {
                let mut xp = xs.clone();
                xp[t].data_mut()[e] += h;
                let mut xm = xs.clone();
                xm[t].data_mut()[e] -= h;
                let fd = (seeded_loss(&p, &xp, &seeds, NormMode::Running) - seeded_loss(&p, &xm, &seeds, NormMode::Running)) / (2.0 * h);
                assert!(rel(fd, gx[t].data()[e]) < 1e-5);
            }
        }
    }

    #[test]
    fn bptt_matches_finite_differences_l2stm() {
        check_fd(Variant::L2stm, false);
    }

    #[test]
    fn bptt_matches_finite_differences_convlstm() {
        check_fd(Variant::Convlstm, false);
    }

    #[test]
    fn bptt_matches_finite_differences_with_frozen_norm() {
        check_fd(Variant::L2stm, true);
    }

    #[test]
    fn tied_l2stm_gradients_reduce_to_convlstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = init_params::<f64>(&cfg(Variant::Convlstm, 2, 2, 4, 4), 10).unwrap();
        let mut lat = conv.clone();
        if let HiddenTransition::Conv(k) = &conv.core.hc {
            lat.core.hc = HiddenTransition::Lattice(LatticeFilterBank::tied(k, 4, 4));
        }
        let xs = random_inputs(4, &[2, 4, 4], &mut rng);
        let seeds = random_inputs(4, &[2, 4, 4], &mut rng);
        let (_, tc) = unroll(conv.as_ref(), &xs, NormMode::Running).unwrap();
        let (_, tl) = unroll(lat.as_ref(), &xs, NormMode::Running).unwrap();
        let (gc, _) = cell_backward(&conv, &tc, &seeds).unwrap();
        let (gl, _) = cell_backward(&lat, &tl, &seeds).unwrap();
        for (a, b) in gc.gates.views().iter().zip(gl.gates.views()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (HiddenTransition::Conv(kc), HiddenTransition::Lattice(bl)) = (&gc.core.hc, &gl.core.hc) else {
            unreachable!()
        };
        for o in 0..2 {
            for l in 0..2 {
                for t in 0..9 {
                    let (m, n) = (t / 3, t % 3);
                    let s: f64 = (0..16).map(|q| bl.weight[bl.index(l, q / 4, q % 4, o, m, n)]).sum();
                    assert!((s - kc.weight[kc.index(o, l, m, n)]).abs() < 1e-12);
                }
            }
        }
        let _ = zeros_like(&gc);
    }

    #[test]
    fn init_is_deterministic_and_locations_differ() {
        let c = cfg(Variant::L2stm, 3, 4, 5, 5);
        let a = init_params::<f64>(&c, 42).unwrap();
        let b = init_params::<f64>(&c, 42).unwrap();
        assert!(crate::params::bitwise_eq(&a, &b));
        let HiddenTransition::Lattice(bank) = &a.core.hc else { unreachable!() };
        let filters: Vec<_> = (0..25)
            .map(|q| bank.location_kernel(q / 5, q % 5).unwrap().weight)
            .collect();
        for i in 0..filters.len() {
            for j in i + 1..filters.len() {
                assert_ne!(filters[i], filters[j]);
            }
        }
        assert!(a.gates.xf.bias.iter().all(|&b| b == 1.0));
    }

    #[test]
    fn fan_in_scaled_variance() {
        let c = cfg(Variant::L2stm, 8, 8, 6, 6);
        let p = init_params::<f64>(&c, 3).unwrap();
        let HiddenTransition::Lattice(bank) = &p.core.hc else { unreachable!() };
        for w in [&bank.weight, &p.core.xc.weight, &p.gates.hi.weight] {
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 1.0 / 72.0;
            assert!((var - target).abs() < 0.2 * target, "variance {var} vs {target}");
        }
    }
}
