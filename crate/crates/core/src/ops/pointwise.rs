//! Elementwise activations and Hadamard algebra, each with its backward rule.
//! Backward rules for the activations take the saved forward *output*.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Sigmoid,
    Tanh,
    Relu,
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.map(sigmoid_scalar);
    y.ensure_finite("sigmoid")?;
    Ok(y)
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.map(|v| v.tanh());
    y.ensure_finite("tanh")?;
    Ok(y)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.map(|v| v.max(T::zero()));
    y.ensure_finite("relu")?;
    Ok(y)
}

pub fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let y = a.zip_map(b, "add", |x, y| x + y)?;
    y.ensure_finite("add")?;
    Ok(y)
}

pub fn activation_backward<T: Real>(
    op: Pointwise,
    grad_out: &Tensor<T>,
    saved_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    match op {
        Pointwise::Sigmoid => grad_out.zip_map(saved_out, "sigmoid_backward", |g, y| g * y * (T::one() - y)),
        Pointwise::Tanh => grad_out.zip_map(saved_out, "tanh_backward", |g, y| g * (T::one() - y * y)),
        Pointwise::Relu => grad_out.zip_map(saved_out, "relu_backward", |g, y| {
            if y > T::zero() {
                g
            } else {
                T::zero()
            }
        }),
    }
}

/// Gradients of `a ∘ b` with respect to `a` and `b`.
pub fn hadamard_backward<T: Real>(
    grad_out: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((
        grad_out.zip_map(b, "hadamard_backward", |g, y| g * y)?,
        grad_out.zip_map(a, "hadamard_backward", |g, x| g * x)?,
    ))
}
