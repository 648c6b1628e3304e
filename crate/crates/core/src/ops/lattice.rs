//! Lattice superposition: a locally connected filtering with a distinct filter
//! at every spatial location of the hidden map.
//!
//! `out[k, i, j] = bias[k] + sum_{l, m, n} W[l, i, j, k, m, n] * h[l, i + m - pr, j + n - pc]`
//! with zero padding. When every location holds the same filter this is
//! exactly `conv2d`; the accumulation order matches so the equality is
//! bit-for-bit.

use super::conv::tap_range;
use crate::error::{shape_err, Result};
use crate::tensor::{LatticeFilterBank, Real, Tensor};

fn check<T: Real>(hidden: &Tensor<T>, bank: &LatticeFilterBank<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = hidden.chw()?;
    if c != bank.in_channels || h != bank.rows || w != bank.cols {
        return shape_err("lattice_apply", hidden.shape(), &bank.shape());
    }
    Ok((c, h, w))
}

pub fn lattice_apply<T: Real>(hidden: &Tensor<T>, bank: &LatticeFilterBank<T>) -> Result<Tensor<T>> {
    let (cin, h, w) = check(hidden, bank)?;
    let (pr, pc) = ((bank.kernel_rows / 2) as isize, (bank.kernel_cols / 2) as isize);
    let hw = h * w;
    let src = hidden.data();
    let taps = bank.kernel_rows * bank.kernel_cols;
    let loc_stride = bank.out_channels * taps;
    let mut out = vec![T::zero(); bank.out_channels * hw];
    for k in 0..bank.out_channels {
        let plane = &mut out[k * hw..(k + 1) * hw];
        for l in 0..cin {
            let inp = &src[l * hw..(l + 1) * hw];
            // weights for (l, i, j, k, ., .) start at ((l*h + i)*w + j)*loc_stride + k*taps
            let base_l = l * hw * loc_stride + k * taps;
            for m in 0..bank.kernel_rows {
                let dy = m as isize - pr;
                let (y0, y1) = tap_range(h, dy);
                for n in 0..bank.kernel_cols {
                    let dx = n as isize - pc;
                    let (x0, x1) = tap_range(w, dx);
                    let tap = m * bank.kernel_cols + n;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            let wgt = bank.weight[base_l + (y * w + x) * loc_stride + tap];
                            plane[y * w + x] += wgt * inp[sy * w + sx];
                        }
                    }
                }
            }
        }
        let b = bank.bias[k];
        for v in plane.iter_mut() {
            *v += b;
        }
    }
    let out = Tensor::new(vec![bank.out_channels, h, w], out)?;
    out.ensure_finite("lattice_apply")?;
    Ok(out)
}

/// Gradients of `lattice_apply` with respect to the hidden map and the bank.
pub fn lattice_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved_hidden: &Tensor<T>,
    bank: &LatticeFilterBank<T>,
) -> Result<(Tensor<T>, LatticeFilterBank<T>)> {
    let mut grad_bank = LatticeFilterBank::zeros(
        bank.in_channels,
        bank.rows,
        bank.cols,
        bank.out_channels,
        bank.kernel_rows,
        bank.kernel_cols,
    )?;
    let gh = lattice_backward_into(grad_out, saved_hidden, bank, &mut grad_bank, true)?
        .expect("hidden gradient requested");
    Ok((gh, grad_bank))
}

pub fn lattice_backward_into<T: Real>(
    grad_out: &Tensor<T>,
    saved_hidden: &Tensor<T>,
    bank: &LatticeFilterBank<T>,
    grad_bank: &mut LatticeFilterBank<T>,
    want_hidden: bool,
) -> Result<Option<Tensor<T>>> {
    let (cin, h, w) = check(saved_hidden, bank)?;
    if grad_out.shape() != [bank.out_channels, h, w] {
        return shape_err("lattice_backward", grad_out.shape(), &[bank.out_channels, h, w]);
    }
    if grad_bank.shape() != bank.shape() {
        return shape_err("lattice_backward", &grad_bank.shape(), &bank.shape());
    }
    let (pr, pc) = ((bank.kernel_rows / 2) as isize, (bank.kernel_cols / 2) as isize);
    let hw = h * w;
    let g = grad_out.data();
    let src = saved_hidden.data();
    let taps = bank.kernel_rows * bank.kernel_cols;
    let loc_stride = bank.out_channels * taps;
    let mut gh = if want_hidden {
        vec![T::zero(); cin * hw]
    } else {
        Vec::new()
    };
    for k in 0..bank.out_channels {
        let gplane = &g[k * hw..(k + 1) * hw];
        grad_bank.bias[k] += gplane.iter().copied().sum::<T>();
        for l in 0..cin {
            let inp = &src[l * hw..(l + 1) * hw];
            let base_l = l * hw * loc_stride + k * taps;
            for m in 0..bank.kernel_rows {
                let dy = m as isize - pr;
                let (y0, y1) = tap_range(h, dy);
                for n in 0..bank.kernel_cols {
                    let dx = n as isize - pc;
                    let (x0, x1) = tap_range(w, dx);
                    let tap = m * bank.kernel_cols + n;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            let widx = base_l + (y * w + x) * loc_stride + tap;
                            let gv = gplane[y * w + x];
                            grad_bank.weight[widx] += gv * inp[sy * w + sx];
                            if want_hidden {
                                gh[l * hw + sy * w + sx] += bank.weight[widx] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    if want_hidden {
        let t = Tensor::new(vec![cin, h, w], gh)?;
        t.ensure_finite("lattice_backward")?;
        Ok(Some(t))
    } else {
        Ok(None)
    }
}
