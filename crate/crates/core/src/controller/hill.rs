use super::ControllerError;

/// Minimum sample count accepted by [`estimate_tail_index`].
pub const MIN_TAIL_SAMPLES: usize = 50;
/// Default fraction of the sample used as upper order statistics.
pub const DEFAULT_K_FRACTION: f64 = 0.1;

/// Hill estimator of the tail index over the top `ceil(k_fraction * n)`
/// order statistics:
///
/// `alpha = k / sum_{i=1..k} ln(x_(i) / x_(k+1))`, with `x_(1) >= x_(2) >= ...`.
///
/// Returns `f64::INFINITY` when the top samples are all equal.
pub fn estimate_tail_index(samples: &[u64], k_fraction: f64) -> Result<f64, ControllerError> {
    let n = samples.len();
    if n < MIN_TAIL_SAMPLES {
        return Err(ControllerError::InsufficientSamples {
            got: n,
            need: MIN_TAIL_SAMPLES,
        });
    }
    if !(k_fraction > 0.0 && k_fraction <= 0.25) {
        return Err(ControllerError::KFraction(k_fraction));
    }
    let k = ((k_fraction * n as f64).ceil() as usize).clamp(1, n - 1);

    let mut v: Vec<f64> = samples.iter().map(|&x| x as f64).collect();
    // Partition so v[..k] holds the k largest and v[k] is x_(k+1).
    v.select_nth_unstable_by(k, |a, b| b.total_cmp(a));
    let threshold = v[k];
    if threshold <= 0.0 {
        return Err(ControllerError::NonPositiveSample);
    }
    let sum: f64 = v[..k].iter().map(|&x| (x / threshold).ln()).sum();
    if sum <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(k as f64 / sum)
}

/// Tail indices in `[0, 2)` are heavy tailed (infinite variance).
pub fn is_heavy_tailed(alpha: f64) -> bool {
    (0.0..2.0).contains(&alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pareto(alpha, x_m) by inverse CDF, scaled to integer nanoseconds.
    fn pareto(n: usize, alpha: f64, scale: f64, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                (scale * (1.0 - u).powf(-1.0 / alpha)).round() as u64
            })
            .collect()
    }

    #[test]
    fn recovers_pareto_index() {
        for alpha in [0.8, 1.5] {
            let s = pareto(100_000, alpha, 1e6, 17);
            let a = estimate_tail_index(&s, DEFAULT_K_FRACTION).unwrap();
            assert!((a - alpha).abs() <= 0.3, "alpha {alpha} estimated {a}");
        }
    }

    #[test]
    fn exponential_is_light() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<u64> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random();
                (-(1.0 - u).ln() * 5_000.0).round() as u64 + 1
            })
            .collect();
        let a = estimate_tail_index(&s, DEFAULT_K_FRACTION).unwrap();
        assert!(a > 2.0, "{a}");
        assert!(!is_heavy_tailed(a));
    }

    #[test]
    fn too_few_samples() {
        let s = vec![1u64; 40];
        assert_eq!(
            estimate_tail_index(&s, 0.1),
            Err(ControllerError::InsufficientSamples { got: 40, need: 50 })
        );
    }

    #[test]
    fn degenerate_samples_give_sentinel() {
        let s = vec![7u64; 100];
        let a = estimate_tail_index(&s, 0.1).unwrap();
        assert!(a.is_infinite());
        assert!(!is_heavy_tailed(a));
    }

    #[test]
    fn k_fraction_bounds() {
        let s = pareto(100, 1.0, 10.0, 1);
        assert!(estimate_tail_index(&s, 0.0).is_err());
        assert!(estimate_tail_index(&s, 0.3).is_err());
        assert!(estimate_tail_index(&s, 0.25).is_ok());
    }

    #[test]
    fn heavy_tail_boundaries() {
        assert!(is_heavy_tailed(1.2));
        assert!(is_heavy_tailed(0.0));
        assert!(!is_heavy_tailed(2.0));
        assert!(!is_heavy_tailed(f64::INFINITY));
        assert!(!is_heavy_tailed(f64::NAN));
    }

    #[test]
    fn zero_threshold_is_an_error() {
        let mut s = vec![0u64; 95];
        s.extend([5, 6, 7, 8, 9]);
        assert_eq!(
            estimate_tail_index(&s, 0.1),
            Err(ControllerError::NonPositiveSample)
        );
    }
}
