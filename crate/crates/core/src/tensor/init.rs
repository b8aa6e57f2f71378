use rand::Rng;

use super::{Float, Tensor};

/// Half-width of the uniform Xavier interval: `sqrt(3 / fan_in)`, which gives
/// variance `1 / fan_in`.
pub fn xavier_bound(fan_in: usize) -> f64 {
    assert!(fan_in > 0, "xavier_init needs a positive fan-in");
    (3.0 / fan_in as f64).sqrt()
}

/// I.i.d. uniform draws on `[-sqrt(3/fan_in), sqrt(3/fan_in)]`.
pub fn xavier_init<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = xavier_bound(fan_in);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| F::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}
