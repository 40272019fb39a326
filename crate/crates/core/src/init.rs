use rand::Rng;

use crate::autodiff::Tensor;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)); `rows` is fan-out.
pub(crate) fn glorot_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// A vector weight mapping `len` inputs to one output.
pub(crate) fn glorot_vector<R: Rng>(rng: &mut R, len: usize) -> Tensor {
    let limit = (6.0 / (len + 1) as f64).sqrt();
    Tensor::vector((0..len).map(|_| rng.random_range(-limit..limit)).collect())
}
