use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::tensor::Tensor;

/// Uniform in `[-1/√fan_in, 1/√fan_in]`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        let d = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
