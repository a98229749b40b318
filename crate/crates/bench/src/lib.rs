//! Shared fixtures for the benchmarks.

use ltcf_core::Tensor;

/// Deterministic values in `[0, 1)` without pulling in a random generator.
pub fn pattern(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| {
        ((i as u64).wrapping_mul(2_654_435_761) % 1000) as f32 / 1000.0
    })
}

/// A dim low-light image of the given size.
pub fn dark_image(h: usize, w: usize) -> Tensor {
    pattern(&[h, w, 3]).map(|v| 0.05 + 0.2 * v)
}
