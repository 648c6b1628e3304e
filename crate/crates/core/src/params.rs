//! Named, flat views over every parameter of a model.
//!
//! Gradient containers have the same type as the parameters they belong to, so
//! zipping the views of a model with the views of its gradient lines up slot by
//! slot. The optimizer, checkpoint writer and gradient checker are all written
//! against these views.

use crate::ops::{Affine, ChannelNorm};
use crate::tensor::{ConvKernel, LatticeFilterBank, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to weights only; biases and norm affine terms are exempt.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

pub struct ParamView<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub struct ParamViewMut<'a, T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Parameters<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>);

    fn views(&self) -> Vec<ParamView<'_, T>> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn views_mut(&mut self) -> Vec<ParamViewMut<'_, T>> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    fn trainable_len(&self) -> usize {
        self.views()
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.data.len())
            .sum()
    }
}

/// A copy of `p` with every slot set to zero.
pub fn zeros_like<T: Real, P: Parameters<T> + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for v in z.views_mut() {
        v.data.iter_mut().for_each(|x| *x = T::zero());
    }
    z
}

/// `dst += alpha * src` over every slot (trainable or not).
pub fn axpy<T: Real, P: Parameters<T>>(dst: &mut P, alpha: T, src: &P) {
    let srcs = src.views();
    for (d, s) in dst.views_mut().into_iter().zip(srcs) {
        debug_assert_eq!(d.name, s.name);
        for (a, &b) in d.data.iter_mut().zip(s.data) {
            *a += alpha * b;
        }
    }
}

/// Euclidean norm over trainable slots.
pub fn global_norm<T: Real, P: Parameters<T>>(p: &P) -> T {
    p.views()
        .iter()
        .filter(|v| v.kind.trainable())
        .flat_map(|v| v.data.iter())
        .map(|&x| x * x)
        .sum::<T>()
        .sqrt()
}

pub fn scale_trainable<T: Real, P: Parameters<T>>(p: &mut P, factor: T) {
    for v in p.views_mut() {
        if v.kind.trainable() {
            v.data.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Byte-level identity of every slot, used to assert "unchanged" invariants.
pub fn bitwise_eq<T: Real, P: Parameters<T>>(a: &P, b: &P) -> bool {
    let (va, vb) = (a.views(), b.views());
    va.len() == vb.len()
        && va.iter().zip(&vb).all(|(x, y)| {
            x.name == y.name
                && x.data.len() == y.data.len()
                && x.data.iter().zip(y.data).all(|(p, q)| p.as_f64().to_bits() == q.as_f64().to_bits())
        })
}

impl<T: Real> Parameters<T> for ConvKernel<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        out.push(ParamView {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape: self.shape().to_vec(),
            data: &self.weight,
        });
        out.push(ParamView {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![self.out_channels],
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let shape = self.shape().to_vec();
        let oc = self.out_channels;
        out.push(ParamViewMut {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape,
            data: &mut self.weight,
        });
        out.push(ParamViewMut {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![oc],
            data: &mut self.bias,
        });
    }
}

impl<T: Real> Parameters<T> for LatticeFilterBank<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        out.push(ParamView {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape: self.shape().to_vec(),
            data: &self.weight,
        });
        out.push(ParamView {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![self.out_channels],
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let shape = self.shape().to_vec();
        let oc = self.out_channels;
        out.push(ParamViewMut {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape,
            data: &mut self.weight,
        });
        out.push(ParamViewMut {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![oc],
            data: &mut self.bias,
        });
    }
}

impl<T: Real> Parameters<T> for ChannelNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        let c = vec![self.channels()];
        for (name, kind, data) in [
            ("scale", ParamKind::NormScale, &self.scale),
            ("shift", ParamKind::NormShift, &self.shift),
            ("running_mean", ParamKind::RunningMean, &self.running_mean),
            ("running_var", ParamKind::RunningVar, &self.running_var),
        ] {
            out.push(ParamView {
                name: join(prefix, name),
                kind,
                shape: c.clone(),
                data,
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let c = vec![self.channels()];
        for (name, kind, data) in [
            ("scale", ParamKind::NormScale, &mut self.scale),
            ("shift", ParamKind::NormShift, &mut self.shift),
            ("running_mean", ParamKind::RunningMean, &mut self.running_mean),
            ("running_var", ParamKind::RunningVar, &mut self.running_var),
        ] {
            out.push(ParamViewMut {
                name: join(prefix, name),
                kind,
                shape: c.clone(),
                data,
            });
        }
    }
}

impl<T: Real> Parameters<T> for Affine<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a, T>>) {
        out.push(ParamView {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape: vec![self.outputs, self.inputs],
            data: &self.weight,
        });
        out.push(ParamView {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![self.outputs],
            data: &self.bias,
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a, T>>) {
        let (o, i) = (self.outputs, self.inputs);
        out.push(ParamViewMut {
            name: join(prefix, "weight"),
            kind: ParamKind::Weight,
            shape: vec![o, i],
            data: &mut self.weight,
        });
        out.push(ParamViewMut {
            name: join(prefix, "bias"),
            kind: ParamKind::Bias,
            shape: vec![o],
            data: &mut self.bias,
        });
    }
}
