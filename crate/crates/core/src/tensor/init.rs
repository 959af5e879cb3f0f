use rand::Rng;

use super::{Real, Shape, Tensor};

/// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: impl Into<Shape>, fan_in: usize) -> Tensor<T> {
    let shape = shape.into();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<T> {
    let shape = shape.into();
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn bounded_by_fan_in() {
        let mut rng = stream(1, "init");
        let t: Tensor<f64> = fan_in_uniform(&mut rng, [8, 4, 3, 3], 36);
        let b = (6.0f64 / 36.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
        assert!(t.max_abs() > 0.5 * b);
    }
}
