//! Dense f64 vector/matrix math with reverse-mode differentiation and Adam.
//!
//! Everything in this crate computes on these types. Vectors are plain
//! `Vec<f64>` / `&[f64]`; two-dimensional data lives in a row-major [`Matrix`].
//! All public operations keep values finite; NaN or infinity is an error
//! state, never a silent result.

mod adam;
mod gradcheck;
mod matrix;
mod ops;
mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_difference_check, FD_EPS};
pub use matrix::Matrix;
pub use ops::{cosine_similarity, log_sigmoid, log_softmax_entry, sigmoid, softmax};
pub use tape::{Gradients, Tape, TensorRef};

/// Dot product of two equal-length slices, accumulated left to right.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
