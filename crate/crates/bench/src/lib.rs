//! Shared helpers for the criterion benchmarks.

use rand::Rng;
use terraseg_core::rng;
use terraseg_core::tensor::Tensor;

/// Deterministic uniform tensor for benchmark inputs.
pub fn bench_tensor(shape: &[usize], key: u64) -> Tensor {
    let len: usize = shape.iter().product();
    let mut r = rng::stream(&[0xbe9c4, key]);
    let data: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("benchmark tensor shape")
}
