//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::tensor::matrix::Matrix;
use crate::tensor::tape::{Tape, TensorRef};

/// Default perturbation size for [`finite_difference_check`].
pub const FD_EPS: f64 = 1e-5;

/// Compare tape gradients of a scalar function against central differences.
///
/// `f` rebuilds the computation on a fresh tape from leaf nodes holding
/// `point`; it must be deterministic (seed any randomness internally). The
/// analytic gradient is taken from one backward sweep, then every coordinate
/// of every block is perturbed by +-eps and the worst relative disagreement
/// max|analytic - numeric| / max(|analytic|, |numeric|, 1e-8) is returned.
pub fn finite_difference_check<F>(f: F, point: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorRef]) -> Result<TensorRef>,
{
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let root = f(&mut tape, &refs)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Matrix> = refs.iter().map(|r| grads.wrt(*r).clone()).collect();

    let eval = |pt: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let refs: Vec<TensorRef> = pt.iter().map(|m| tape.leaf(m.clone())).collect();
        let root = f(&mut tape, &refs)?;
        Ok(tape.scalar(root))
    };

    let mut work: Vec<Matrix> = point.to_vec();
    let mut worst = 0.0f64;
    for (bi, block) in point.iter().enumerate() {
        for idx in 0..block.data().len() {
            let orig = block.data()[idx];
            work[bi].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[bi].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[bi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[bi].data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
