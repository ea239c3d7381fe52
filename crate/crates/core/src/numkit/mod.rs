//! Dense numeric kernel: row-major matrices, affine layers with hand-written
//! backward passes, stable softmax helpers, Adam, and a finite-difference
//! gradient checker.
//!
//! Every operation is a deterministic sequential loop, so identical inputs
//! give bit-identical outputs.

mod adam;
mod gradcheck;
mod linear;
mod matrix;

pub use adam::{AdamConfig, AdamState, LayerAdam};
pub use gradcheck::{grad_check, GradCheck};
pub use linear::{LinearGrads, LinearLayer};
pub use matrix::{dot, norm, Matrix};

/// Default finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|v| (v - lse).exp()).collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let p = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn softmax_reference_values() {
        // direct exponential-sum evaluation
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.09003).abs() < 5e-6);
        assert!((p[1] - 0.24473).abs() < 5e-6);
        assert!((p[2] - 0.66524).abs() < 5e-6);
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(-1.0) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted);
            prop_assert_eq!(argmax(&p), argmax(&q));
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
