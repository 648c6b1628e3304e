//! Per-channel normalization applied after the spatial convolutions of a cell.
//!
//! Statistics are taken over the spatial extent of one sample. In `PerSample`
//! mode the current statistics normalize the input and are reported back in
//! the cache; the training loop folds them into the running moments with
//! [`ChannelNorm::absorb`] once per optimizer step, so forward passes never
//! write to shared parameters. `Running` mode uses the stored running moments
//! and is a fixed affine map, which is what gradient checks need. Since the
//! statistics never mix samples, training and evaluation both use `PerSample`.

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub const NORM_EPSILON: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current sample, per channel over space.
    PerSample,
    /// Stored running statistics; the norm is a fixed affine map.
    Running,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![T::one(); channels],
            shift: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// `running := m * running + (1 - m) * observed`.
    pub fn absorb(&mut self, mean: &[T], var: &[T]) {
        let m = T::of(RUNNING_MOMENTUM);
        for (r, &v) in self.running_mean.iter_mut().zip(mean) {
            *r = m * *r + (T::one() - m) * v;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = m * *r + (T::one() - m) * v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub mode: NormMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Observed per-channel moments (per-sample mode), or the running ones.
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn channel_norm<T: Real>(
    input: &Tensor<T>,
    params: &ChannelNorm<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (c, h, w) = input.chw()?;
    if c != params.channels() {
        return shape_err("channel_norm", input.shape(), &[params.channels()]);
    }
    let hw = h * w;
    let n = T::of(hw as f64);
    let eps = T::of(NORM_EPSILON);
    let (mean, var) = match mode {
        NormMode::Running => (params.running_mean.clone(), params.running_var.clone()),
        NormMode::PerSample => {
            let mut mean = Vec::with_capacity(c);
            let mut var = Vec::with_capacity(c);
            for ch in 0..c {
                let p = input.plane(ch);
                let mu = p.iter().copied().sum::<T>() / n;
                let v = p.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
                mean.push(mu);
                var.push(v);
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); c * hw];
    let mut out = vec![T::zero(); c * hw];
    for ch in 0..c {
        let p = input.plane(ch);
        for (idx, &x) in p.iter().enumerate() {
            let xh = (x - mean[ch]) * inv_std[ch];
            xhat[ch * hw + idx] = xh;
            out[ch * hw + idx] = params.scale[ch] * xh + params.shift[ch];
        }
    }
    let out = Tensor::new(vec![c, h, w], out)?;
    out.ensure_finite("channel_norm")?;
    Ok((
        out,
        NormCache {
            mode,
            xhat: Tensor::new(vec![c, h, w], xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Returns `(grad_input, grad_scale, grad_shift)`.
pub fn channel_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &NormCache<T>,
    params: &ChannelNorm<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_out.same_shape(&cache.xhat, "channel_norm_backward")?;
    let (c, h, w) = grad_out.chw()?;
    let hw = h * w;
    let n = T::of(hw as f64);
    let mut gin = vec![T::zero(); c * hw];
    let mut gscale = vec![T::zero(); c];
    let mut gshift = vec![T::zero(); c];
    for ch in 0..c {
        let g = grad_out.plane(ch);
        let xh = cache.xhat.plane(ch);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&gv, &xv) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * xv;
        }
        gshift[ch] = sum_g;
        gscale[ch] = sum_gx;
        let s = params.scale[ch] * cache.inv_std[ch];
        let dst = &mut gin[ch * hw..(ch + 1) * hw];
        match cache.mode {
            NormMode::Running => {
                for (d, &gv) in dst.iter_mut().zip(g) {
                    *d = s * gv;
                }
            }
            NormMode::PerSample => {
                for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(xh) {
                    *d = s * (gv - (sum_g + xv * sum_gx) / n);
                }
            }
        }
    }
    let gin = Tensor::new(vec![c, h, w], gin)?;
    gin.ensure_finite("channel_norm_backward")?;
    Ok((gin, gscale, gshift))
}
