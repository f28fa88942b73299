//! Dense linear algebra, activations and seeded randomness.

mod matrix;
mod rng;

pub use matrix::{
    matmul, sigmoid, sigmoid_inplace, sigmoid_scalar, softmax_rows, softmax_rows_inplace, Matrix,
};
pub(crate) use matrix::axpy_slice;
pub use rng::{bernoulli_matrix, Rng};

/// FNV-1a applied to whole 64-bit words (the IEEE bit patterns of the
/// values) rather than bytes, so hashing a large model stays cheap.
pub fn checksum<'a>(values: impl IntoIterator<Item = &'a f64>) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325_u64;
    for v in values {
        hash ^= v.to_bits();
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash ^ (hash >> 29)
}
