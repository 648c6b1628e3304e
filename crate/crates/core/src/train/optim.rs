//! SGD with momentum and decoupled-from-bias weight decay.

use crate::error::{Error, Result};
use crate::params::{global_norm, scale_trainable, zeros_like, Parameters};
use crate::tensor::Real;

/// Momentum SGD: `v := mu v + g + lambda W` (the decay term only for weights),
/// then `W := W - lr v`. Slots whose name matches a frozen prefix are skipped
/// entirely, including their decay.
#[derive(Clone, Debug)]
pub struct Sgd<P> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: P,
}

impl<P: Clone> Sgd<P> {
    pub fn new<T: Real>(model: &P, momentum: f64, weight_decay: f64) -> Self
    where
        P: Parameters<T>,
    {
        Self {
            momentum,
            weight_decay,
            velocity: zeros_like(model),
        }
    }

    pub fn velocity(&self) -> &P {
        &self.velocity
    }

    pub fn step<T: Real>(&mut self, model: &mut P, grads: &P, lr: f64, frozen: &dyn Fn(&str) -> bool) -> Result<()>
    where
        P: Parameters<T>,
    {
        let (mu, lambda, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let gviews = grads.views();
        let vviews = self.velocity.views_mut();
        let mviews = model.views_mut();
        if gviews.len() != mviews.len() || vviews.len() != mviews.len() {
            return Err(Error::Invalid("gradient layout does not match the model".into()));
        }
        for ((w, g), v) in mviews.into_iter().zip(gviews).zip(vviews) {
            if w.name != g.name || w.data.len() != g.data.len() {
                return Err(Error::Invalid(format!("gradient slot '{}' does not match '{}'", g.name, w.name)));
            }
            if !w.kind.trainable() || frozen(&w.name) {
                continue;
            }
            let decay = if w.kind.decays() { lambda } else { T::zero() };
            for ((w, &g), v) in w.data.iter_mut().zip(g.data).zip(v.data.iter_mut()) {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real, P: Parameters<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads).as_f64();
    if max_norm > 0.0 && norm > max_norm {
        scale_trainable(grads, T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{Affine, ChannelNorm};
    use crate::params::ParamKind;

    fn affine(w: f64, b: f64) -> Affine<f64> {
        let mut a = Affine::zeros(1, 1);
        a.weight[0] = w;
        a.bias[0] = b;
        a
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let (mu, lambda, lr) = (0.9, 5e-4, 0.01);
        let mut m = affine(1.5, 0.25);
        let mut opt = Sgd::new(&m, mu, lambda);
        let (g1, g2) = (0.3, -0.7);
        let never = |_: &str| false;
        opt.step(&mut m, &affine(g1, g1), lr, &never).unwrap();
        opt.step(&mut m, &affine(g2, g2), lr, &never).unwrap();

        let mut w = 1.5;
        let mut v = 0.0;
        for g in [g1, g2] {
            v = mu * v + g + lambda * w;
            w -= lr * v;
        }
        assert_eq!(m.weight[0], w);
        let v1 = g1;
        let b1 = 0.25 - lr * v1;
        let v2 = mu * v1 + g2;
        assert_eq!(m.bias[0], b1 - lr * v2);
    }

    #[test]
    fn zero_lr_leaves_parameters_bitwise() {
        let mut m = affine(0.7, -0.1);
        let before = m.clone();
        let mut opt = Sgd::new(&m, 0.9, 5e-4);
        for _ in 0..5 {
            opt.step(&mut m, &affine(1.0, 1.0), 0.0, &|_: &str| false).unwrap();
        }
        assert_eq!(m, before);
    }

    #[test]
    fn decay_skips_biases_and_norm_terms() {
        let mut n = ChannelNorm::<f64>::new(2);
        n.scale = vec![1.3, 0.8];
        n.shift = vec![0.2, -0.4];
        let before = n.clone();
        let zero = {
            let mut z = ChannelNorm::<f64>::new(2);
            z.scale = vec![0.0; 2];
            z.running_var = vec![0.0; 2];
            z
        };
        let mut opt = Sgd::new(&n, 0.9, 0.5);
        opt.step(&mut n, &zero, 0.1, &|_: &str| false).unwrap();
        assert_eq!(n, before);

        let mut a = affine(2.0, 3.0);
        let mut opt = Sgd::new(&a, 0.0, 0.5);
        opt.step(&mut a, &affine(0.0, 0.0), 0.1, &|_: &str| false).unwrap();
        assert_eq!(a.bias[0], 3.0);
        assert!((a.weight[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
        assert!(ParamKind::NormScale.trainable() && !ParamKind::NormScale.decays());
    }

    #[test]
    fn frozen_slots_do_not_move() {
        let mut a = affine(2.0, 3.0);
        let mut opt = Sgd::new(&a, 0.9, 0.5);
        opt.step(&mut a, &affine(1.0, 1.0), 0.1, &|n: &str| n == "weight").unwrap();
        assert_eq!(a.weight[0], 2.0);
        assert!(a.bias[0] < 3.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = affine(3.0, 4.0);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = affine(0.3, 0.4);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, affine(0.3, 0.4));
    }
}
