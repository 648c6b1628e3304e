//! Per-step softmax cross-entropy, averaged over the unrolled steps.

use crate::error::{Error, Result};
use crate::model::softmax;
use crate::tensor::Real;

/// Returns the mean cross-entropy over steps and its gradient with respect to
/// every step's scores.
pub fn step_cross_entropy<T: Real>(scores: &[Vec<T>], label: usize) -> Result<(f64, Vec<Vec<T>>)> {
    if scores.is_empty() {
        return Err(Error::Invalid("no step scores".into()));
    }
    let k = scores[0].len();
    if label >= k {
        return Err(Error::OutOfRange(format!("label {label} with {k} classes")));
    }
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        if s.len() != k {
            return Err(Error::Invalid(format!("step with {} scores, expected {k}", s.len())));
        }
        let logits: Vec<f64> = s.iter().map(|v| v.as_f64()).collect();
        let p = softmax(&logits);
        loss -= p[label].max(f64::MIN_POSITIVE).ln() / n;
        grads.push(
            p.iter()
                .enumerate()
                .map(|(c, &pc)| T::of((pc - f64::from(u8::from(c == label))) / n))
                .collect(),
        );
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_scores_cost_ln_k() {
        let (l, _) = step_cross_entropy(&vec![vec![0.3f64; 5]; 4], 2).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn growing_margin_drives_loss_to_zero() {
        let mut last = f64::INFINITY;
        for m in [1.0, 5.0, 10.0, 30.0] {
            let (l, _) = step_cross_entropy(&[vec![m, 0.0, 0.0f64]], 0).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(step_cross_entropy(&[vec![0.0f64; 3]], 3), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scores = vec![vec![0.2, -1.0, 0.7], vec![1.5, 0.1, -0.4f64]];
        let (_, g) = step_cross_entropy(&scores, 1).unwrap();
        let h = 1e-6;
        for t in 0..2 {
            for c in 0..3 {
                let mut p = scores.clone();
                p[t][c] += h;
                let mut m = scores.clone();
                m[t][c] -= h;
                let fd = (step_cross_entropy(&p, 1).unwrap().0 - step_cross_entropy(&m, 1).unwrap().0) / (2.0 * h);
                assert!((fd - g[t][c]).abs() < 1e-6);
            }
        }
    }
}
