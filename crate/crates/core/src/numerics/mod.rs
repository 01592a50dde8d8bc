//! Dense fp64 tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod linalg;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{ParamId, ParamSet};
pub use tape::{logistic, softmax_in_place, BatchStats, ConvGeom, Gradients, Tape, Var};
pub use tensor::Tensor;

/// `sum_i (a_i - b_i)^2`.
pub fn sq_euclid(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Root Euclidean distance, used for verification and identification scores.
pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    sq_euclid(a, b).sqrt()
}

/// Softmax of a plain vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    softmax_in_place(&mut v, None);
    v
}
