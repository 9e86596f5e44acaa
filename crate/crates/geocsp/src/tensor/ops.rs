//! Numerically stable scalar reductions shared by the loss functions.
//!
//! These are the plain (non-differentiated) forms; [`super::tape::Tape`]
//! records the same computations when gradients are needed. Both paths call
//! into the kernels here so the two can never drift apart.

use crate::error::{Error, Result};
use crate::tensor::dot;

/// Guard added to degenerate denominators. Fixed, not tunable, so exact
/// test oracles stay valid.
pub(crate) const EPS_GUARD: f64 = 1e-12;

/// Cosine similarity a.b / max(||a|| ||b||, 1e-12), in [-1, 1].
///
/// The product of norms is computed as sqrt((a.a)(b.b)), which makes the
/// similarity of a vector with itself exactly 1.0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine_similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (value, _, _, _) = cosine_kernel(a, b)?;
    Ok(value)
}

/// Shared forward kernel: returns (similarity, a.b, a.a, b.b).
pub(crate) fn cosine_kernel(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let dot_ab = dot(a, b);
    let dot_aa = dot(a, a);
    let dot_bb = dot(b, b);
    if dot_aa == 0.0 && dot_bb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine_similarity of two zero vectors".into(),
        ));
    }
    let den = (dot_aa * dot_bb).sqrt().max(EPS_GUARD);
    Ok((dot_ab / den, dot_ab, dot_aa, dot_bb))
}

/// The logistic function e^x / (1 + e^x).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log sigma(x) via the stable identity -softplus(-x). Never underflows to
/// -inf for finite x; log(1 - sigma(x)) is `log_sigmoid(-x)`.
pub fn log_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("log_sigmoid({x})")));
    }
    Ok(log_sigmoid_unchecked(x))
}

pub(crate) fn log_sigmoid_unchecked(x: f64) -> f64 {
    // -softplus(-x), with softplus(z) = ln(1 + e^z) split by sign of z.
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Log of the softmax probability at `index`: scores[index]/tau - logsumexp(scores/tau),
/// computed with the max-shift trick.
pub fn log_softmax_entry(scores: &[f64], index: usize, temperature: f64) -> Result<f64> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    if index >= scores.len() {
        return Err(Error::Shape(format!(
            "softmax index {index} out of range for {} scores",
            scores.len()
        )));
    }
    for s in scores {
        if !s.is_finite() {
            return Err(Error::NonFinite(format!("log_softmax_entry score {s}")));
        }
    }
    Ok(log_softmax_entry_unchecked(scores, index, temperature))
}

pub(crate) fn log_softmax_entry_unchecked(scores: &[f64], index: usize, tau: f64) -> f64 {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s / tau));
    let mut sum = 0.0;
    for &s in scores {
        sum += (s / tau - max).exp();
    }
    scores[index] / tau - (max + sum.ln())
}

/// Softmax probabilities of `scores` (temperature 1), summing to 1.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn cosine_identical_vectors_is_exactly_one() {
        let v = vec![0.3, -1.7, 2.4];
        assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_analytic_value() {
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(c, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn cosine_rejects_length_mismatch_and_double_zero() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn cosine_single_zero_vector_is_zero() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn log_sigmoid_at_zero_is_minus_ln2() {
        assert_abs_diff_eq!(
            log_sigmoid(0.0).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn log_sigmoid_large_negative_does_not_underflow() {
        let v = log_sigmoid(-100.0).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -100.0, epsilon = 1e-12);
    }

    #[test]
    fn log_sigmoid_large_positive_stays_negative() {
        let v = log_sigmoid(100.0).unwrap();
        assert!(v <= 0.0 && v >= -1e-40);
    }

    #[test]
    fn log_sigmoid_rejects_non_finite() {
        assert!(log_sigmoid(f64::INFINITY).is_err());
        assert!(log_sigmoid(f64::NAN).is_err());
    }

    #[test]
    fn log_softmax_two_equal_scores() {
        let v = log_softmax_entry(&[0.0, 0.0], 0, 1.0).unwrap();
        assert_abs_diff_eq!(v, -std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn log_softmax_dominant_score() {
        let v = log_softmax_entry(&[10.0, 0.0], 0, 1.0).unwrap();
        assert_abs_diff_eq!(v, -(1.0 + (-10.0f64).exp()).ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_softmax_equal_scores_any_temperature() {
        let v = log_softmax_entry(&[1.0, 1.0, 1.0, 1.0], 2, 0.5).unwrap();
        assert_abs_diff_eq!(v, -(4.0f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn log_softmax_rejects_bad_temperature() {
        assert!(matches!(
            log_softmax_entry(&[1.0, 2.0], 0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            log_softmax_entry(&[1.0, 2.0], 0, -1.0),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        // log sigma(x) + log sigma(-x) = log(sigma(x)(1 - sigma(x))), and
        // log sigma(x) <= min(0, x).
        #[test]
        fn log_sigmoid_identity(x in -500.0f64..500.0) {
            let pos = log_sigmoid(x).unwrap();
            let neg = log_sigmoid(-x).unwrap();
            // sigma(x)(1 - sigma(x)) evaluated as sigma(x)sigma(-x); the
            // subtraction form cancels catastrophically for |x| > ~8.
            let direct = (sigmoid(x) * sigmoid(-x)).ln();
            prop_assert!((pos + neg - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
            prop_assert!(pos <= 0.0 && pos <= x + 1e-15);
        }

        // exp of the log-softmax entries sums to 1 over all indices.
        #[test]
        fn log_softmax_normalizes(
            scores in proptest::collection::vec(-50.0f64..50.0, 1..200),
            tau in 0.05f64..10.0,
        ) {
            let total: f64 = (0..scores.len())
                .map(|i| log_softmax_entry(&scores, i, tau).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
