//! Linear recurrence `H_t = W_H H_{t-1} + W_X X_t` without nonlinearities,
//! unrolled step by step and via its closed-form expansion
//!
//! ```text
//! H_{t+tau} = W_H^{tau+1} H_{t-1} + sum_{j=0..tau} W_H^{tau-j} W_X X_{t+j}
//! ```
//!
//! Used to check that weight-shared recurrence amounts to a fixed set of
//! temporal filters `W_H^k W_X`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearRnnUnroll {
    pub iterative: DVector<f64>,
    pub closed_form: DVector<f64>,
}

impl LinearRnnUnroll {
    /// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
    pub fn relative_gap(&self) -> f64 {
        let scale = self.iterative.norm().max(self.closed_form.norm());
        if scale == 0.0 {
            return 0.0;
        }
        (&self.iterative - &self.closed_form).norm() / scale
    }
}

fn check_dims(w_h: &DMatrix<f64>, w_x: &DMatrix<f64>, h_init: &DVector<f64>, xs: &[DVector<f64>]) -> Result<()> {
    let hidden = w_h.nrows();
    if w_h.ncols() != hidden {
        return Err(Error::Invalid(format!("W_H must be square, got {}x{}", w_h.nrows(), w_h.ncols())));
    }
    if w_x.nrows() != hidden {
        return Err(Error::Invalid(format!("W_X has {} rows, W_H has {hidden}", w_x.nrows())));
    }
    if h_init.len() != hidden {
        return Err(Error::Invalid(format!("initial state has {} entries, W_H has {hidden}", h_init.len())));
    }
    if xs.is_empty() {
        return Err(Error::Invalid("input sequence is empty".into()));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != w_x.ncols()) {
        return Err(Error::Invalid(format!("input of length {} for W_X with {} columns", x.len(), w_x.ncols())));
    }
    Ok(())
}

/// Evaluates the recurrence over `xs = [X_t, ..., X_{t+tau}]` from `H_{t-1} = h_init`.
pub fn linear_rnn_unroll(
    w_h: &DMatrix<f64>,
    w_x: &DMatrix<f64>,
    h_init: &DVector<f64>,
    xs: &[DVector<f64>],
) -> Result<LinearRnnUnroll> {
    check_dims(w_h, w_x, h_init, xs)?;
    let mut h = h_init.clone();
    for x in xs {
        h = w_h * &h + w_x * x;
    }
    let tau = xs.len() - 1;
    let mut closed = w_h.clone().pow((tau + 1) as u32) * h_init;
    for (j, x) in xs.iter().enumerate() {
        closed += w_h.clone().pow((tau - j) as u32) * (w_x * x);
    }
    Ok(LinearRnnUnroll {
        iterative: h,
        closed_form: closed,
    })
}

/// Relative gap between the two evaluations on random `dim x dim` systems
/// with entries uniform in `[-0.5, 0.5)`, one system per `tau` in `0..=tau_max`.
pub fn theory_check(dim: usize, tau_max: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..=tau_max)
        .map(|tau| {
            let w_h = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.5..0.5));
            let w_x = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-0.5..0.5));
            let h0 = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
            let xs: Vec<_> = (0..=tau).map(|_| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0))).collect();
            Ok((tau, linear_rnn_unroll(&w_h, &w_x, &h0, &xs)?.relative_gap()))
        })
        .collect()
}
