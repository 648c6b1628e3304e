//! Same-padded, stride-1 2D convolution (cross-correlation) and its backward rule.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvKernel, Real, Tensor};

/// Valid output range along one axis for a kernel tap at offset `d`.
#[inline]
pub(crate) fn tap_range(extent: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (extent as isize - d).clamp(0, extent as isize) as usize;
    (lo, hi.max(lo))
}

fn check_input<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    if c != kernel.in_channels {
        return shape_err("conv2d", input.shape(), &kernel.shape());
    }
    if kernel.rows.is_multiple_of(2) || kernel.cols.is_multiple_of(2) {
        return Err(Error::Invalid("conv2d needs odd kernel extents".into()));
    }
    Ok((c, h, w))
}

/// `out[o, y, x] = bias[o] + sum_{i, r, c} weight[o, i, r, c] * input[i, y + r - pr, x + c - pc]`
/// with zeros outside the input. Terms accumulate in `(i, r, c)` order before the
/// bias is added; `lattice_apply` follows the same order so tied banks agree
/// bit-for-bit.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    let (cin, h, w) = check_input(input, kernel)?;
    let (pr, pc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
    let hw = h * w;
    let src = input.data();
    let mut out = vec![T::zero(); kernel.out_channels * hw];
    for o in 0..kernel.out_channels {
        let plane = &mut out[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let inp = &src[i * hw..(i + 1) * hw];
            for r in 0..kernel.rows {
                let dy = r as isize - pr;
                let (y0, y1) = tap_range(h, dy);
                for c in 0..kernel.cols {
                    let wgt = kernel.weight[kernel.index(o, i, r, c)];
                    if wgt == T::zero() {
                        continue;
                    }
                    let dx = c as isize - pc;
                    let (x0, x1) = tap_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * w + x0..y * w + x1];
                        let irow = &inp[sy * w + (x0 as isize + dx) as usize..];
                        for (dst, &v) in orow.iter_mut().zip(irow) {
                            *dst += wgt * v;
                        }
                    }
                }
            }
        }
        let b = kernel.bias[o];
        for v in plane.iter_mut() {
            *v += b;
        }
    }
    let out = Tensor::new(vec![kernel.out_channels, h, w], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Gradients of `conv2d` with respect to its input and its kernel.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    kernel: &ConvKernel<T>,
) -> Result<(Tensor<T>, ConvKernel<T>)> {
    let mut grad_kernel = ConvKernel::zeros(kernel.out_channels, kernel.in_channels, kernel.rows, kernel.cols)?;
    let grad_input = conv2d_backward_into(grad_out, saved_input, kernel, &mut grad_kernel, true)?
        .expect("input gradient requested");
    Ok((grad_input, grad_kernel))
}

/// Accumulates the kernel gradient into `grad_kernel` and optionally returns the
/// input gradient.
pub fn conv2d_backward_into<T: Real>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_kernel: &mut ConvKernel<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (cin, h, w) = check_input(saved_input, kernel)?;
    if grad_out.shape() != [kernel.out_channels, h, w] {
        return shape_err(
            "conv2d_backward",
            grad_out.shape(),
            &[kernel.out_channels, h, w],
        );
    }
    if grad_kernel.shape() != kernel.shape() {
        return shape_err("conv2d_backward", &grad_kernel.shape(), &kernel.shape());
    }
    let (pr, pc) = ((kernel.rows / 2) as isize, (kernel.cols / 2) as isize);
    let hw = h * w;
    let g = grad_out.data();
    let src = saved_input.data();
    let mut gin = if want_input {
        vec![T::zero(); cin * hw]
    } else {
        Vec::new()
    };
    for o in 0..kernel.out_channels {
        let gplane = &g[o * hw..(o + 1) * hw];
        grad_kernel.bias[o] += gplane.iter().copied().sum::<T>();
        for i in 0..cin {
            let inp = &src[i * hw..(i + 1) * hw];
            for r in 0..kernel.rows {
                let dy = r as isize - pr;
                let (y0, y1) = tap_range(h, dy);
                for c in 0..kernel.cols {
                    let dx = c as isize - pc;
                    let (x0, x1) = tap_range(w, dx);
                    let widx = kernel.index(o, i, r, c);
                    let wgt = kernel.weight[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let off = sy * w + (x0 as isize + dx) as usize;
                        let irow = &inp[off..off + (x1 - x0)];
                        for (&gv, &iv) in grow.iter().zip(irow) {
                            acc += gv * iv;
                        }
                        if want_input && wgt != T::zero() {
                            let dst = &mut gin[i * hw + off..i * hw + off + (x1 - x0)];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += wgt * gv;
                            }
                        }
                    }
                    grad_kernel.weight[widx] += acc;
                }
            }
        }
    }
    if want_input {
        let t = Tensor::new(vec![cin, h, w], gin)?;
        t.ensure_finite("conv2d_backward")?;
        Ok(Some(t))
    } else {
        Ok(None)
    }
}
