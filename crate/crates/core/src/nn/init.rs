use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;

/// Gaussian init with std `sqrt(gain / fan_in)`.
pub fn scaled_normal<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> ArrayD<F> {
    let std = (gain / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let vals = (0..len)
        .map(|_| F::of(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

/// He init for layers followed by a ReLU.
pub fn kaiming<F: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    scaled_normal(rng, shape, fan_in, 2.0)
}
