use rand::Rng;

use crate::nn::tensor::{Shape, Tensor};

/// He-uniform weights: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
