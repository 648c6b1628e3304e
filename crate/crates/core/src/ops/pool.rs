//! Spatial pooling and the affine classifier head.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// 2x2 average pooling with stride 2. Extents must be even.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Invalid(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let p = x.plane(ch);
        for y in 0..oh {
            for xx in 0..ow {
                let s = p[2 * y * w + 2 * xx]
                    + p[2 * y * w + 2 * xx + 1]
                    + p[(2 * y + 1) * w + 2 * xx]
                    + p[(2 * y + 1) * w + 2 * xx + 1];
                out[(ch * oh + y) * ow + xx] = s * q;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Real>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.chw()?;
    let (h, w) = (oh * 2, ow * 2);
    let q = T::of(0.25);
    let mut gin = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let g = grad_out.plane(ch);
        for y in 0..h {
            for x in 0..w {
                gin[(ch * h + y) * w + x] = g[(y / 2) * ow + x / 2] * q;
            }
        }
    }
    Tensor::new(vec![c, h, w], gin)
}

/// Global average pool to one value per channel.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (c, h, w) = x.chw()?;
    let n = T::of((h * w) as f64);
    Ok((0..c).map(|ch| x.plane(ch).iter().copied().sum::<T>() / n).collect())
}

pub fn global_avg_pool_backward<T: Real>(grad: &[T], h: usize, w: usize) -> Tensor<T> {
    let n = T::of((h * w) as f64);
    let c = grad.len();
    Tensor::from_fn(&[c, h, w], |i| grad[i / (h * w)] / n)
}

/// Affine map `scores = W f + b` with `W` stored `(outputs, inputs)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub outputs: usize,
    pub inputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self {
            outputs,
            inputs,
            weight: vec![T::zero(); outputs * inputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn apply(&self, features: &[T]) -> Result<Vec<T>> {
        if features.len() != self.inputs {
            return shape_err("affine", &[features.len()], &[self.outputs, self.inputs]);
        }
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(features).map(|(&w, &f)| w * f).sum::<T>() + self.bias[o]
            })
            .collect())
    }

    /// Accumulates parameter gradients into `grad` and returns the feature gradient.
    pub fn backward_into(&self, grad_scores: &[T], features: &[T], grad: &mut Affine<T>) -> Result<Vec<T>> {
        if grad_scores.len() != self.outputs || features.len() != self.inputs {
            return shape_err(
                "affine_backward",
                &[grad_scores.len(), features.len()],
                &[self.outputs, self.inputs],
            );
        }
        let mut gf = vec![T::zero(); self.inputs];
        for o in 0..self.outputs {
            let g = grad_scores[o];
            grad.bias[o] += g;
            for i in 0..self.inputs {
                grad.weight[o * self.inputs + i] += g * features[i];
                gf[i] += g * self.weight[o * self.inputs + i];
            }
        }
        Ok(gf)
    }
}
