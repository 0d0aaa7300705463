//! Weight initialization.

use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Xavier/Glorot uniform initialization: values drawn from
/// U(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-a..a))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_bounds_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (fan_in, fan_out) = (64, 96);
        let w = xavier_uniform(&mut rng, fan_in, fan_out);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < a));
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // Uniform(−a, a) has variance a²/3 = 2 / (fan_in + fan_out).
        let expect = 2.0 / (fan_in + fan_out) as f64;
        assert!((var - expect).abs() / expect < 0.1, "var {var} vs {expect}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn xavier_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            xavier_uniform(&mut r1, 8, 8),
            xavier_uniform(&mut r2, 8, 8)
        );
    }
}
