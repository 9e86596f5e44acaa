//! Bias-corrected Adam updates.

use crate::error::{Error, Result};
use crate::tensor::matrix::Matrix;

/// Per-parameter Adam accumulators. Moments share the parameter's shape and
/// the step counter increases by exactly one per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Fresh state for a `rows x cols` parameter with the standard
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8 constants.
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_param(param: &Matrix) -> Self {
        AdamState::new(param.rows(), param.cols())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update of `param` along `grad`.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, lr: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Shape(format!(
            "adam_step param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr}")));
    }
    state.t += 1;
    let b1 = state.beta1;
    let b2 = state.beta2;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    for ((p, g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    param.check_finite("adam_step output")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut p = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &g, &mut st, 0.001).unwrap();
        // m_hat = g, v_hat = g^2 at t = 1, so delta = -lr / (1 + eps).
        assert_abs_diff_eq!(p.scalar(), 0.5 - 0.001 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Matrix::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let before = p.clone();
        let g = Matrix::zeros(2, 2);
        let mut st = AdamState::for_param(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 0.01).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let before = p.clone();
        let g = Matrix::from_vec(1, 3, vec![0.3, -0.7, 11.0]).unwrap();
        let mut st = AdamState::for_param(&p);
        adam_step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Matrix::from_vec(1, 2, vec![0.1, -0.2]).unwrap();
            let mut st = AdamState::for_param(&p);
            for i in 0..20 {
                let g = Matrix::from_vec(1, 2, vec![(i as f64).sin(), 0.5]).unwrap();
                adam_step(&mut p, &g, &mut st, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut st = AdamState::for_param(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 0.01),
            Err(Error::Shape(_))
        ));
    }
}
