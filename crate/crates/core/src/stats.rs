//! Sample statistics for replica ensembles.

use serde::Serialize;

/// Mean and variance of a sample with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub stderr_mean: f64,
    /// Standard error of `variance`, from the fourth central moment.
    pub stderr_variance: f64,
}

impl Moments {
    /// `None` for fewer than four samples.
    pub fn of(xs: &[f64]) -> Option<Self> {
        let n = xs.len();
        if n < 4 {
            return None;
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
        let variance = m2 * nf / (nf - 1.0);
        let var_of_var = (m4 - variance * variance * (nf - 3.0) / (nf - 1.0)) / nf;
        Some(Self {
            count: n,
            mean,
            variance,
            stderr_mean: (variance / nf).sqrt(),
            stderr_variance: var_of_var.max(0.0).sqrt(),
        })
    }
}

/// Sample covariance of paired draws and its standard error.
pub fn covariance(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n != ys.len() || n < 4 {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let prods: Vec<f64> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .collect();
    let m = Moments::of(&prods)?;
    Some((m.mean * nf / (nf - 1.0), m.stderr_mean))
}

/// `(estimate - target) / stderr`; infinite when the error is zero and the
/// estimate misses.
pub fn z_score(estimate: f64, target: f64, stderr: f64) -> f64 {
    let diff = estimate - target;
    if stderr > 0.0 {
        diff / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn moments_of_small_sample() {
        let m = Moments::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(Moments::of(&[1.0, 2.0]).is_none());
    }

    #[test]
    fn variance_error_matches_gaussian_theory() {
        // for Gaussian data, sd(s^2) ~ sigma^2 sqrt(2 / (n - 1))
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..20_000).map(|_| normal.sample(&mut rng)).collect();
        let m = Moments::of(&xs).unwrap();
        let theory = 4.0 * (2.0 / 19_999.0f64).sqrt();
        assert!((m.stderr_variance / theory - 1.0).abs() < 0.05);
        assert!((m.variance - 4.0).abs() < 4.0 * m.stderr_variance);
    }

    #[test]
    fn covariance_of_independent_and_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let xs: Vec<f64> = (0..5000).map(|_| normal.sample(&mut rng)).collect();
        let ys: Vec<f64> = (0..5000).map(|_| normal.sample(&mut rng)).collect();
        let (c, se) = covariance(&xs, &ys).unwrap();
        assert!(z_score(c, 0.0, se).abs() < 4.0);
        let (c, _) = covariance(&xs, &xs).unwrap();
        assert!((c - Moments::of(&xs).unwrap().variance).abs() < 1e-12);
    }

    #[test]
    fn z_score_edge_cases() {
        assert_eq!(z_score(1.0, 1.0, 0.0), 0.0);
        assert_eq!(z_score(2.0, 1.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(3.0, 1.0, 0.5), 4.0);
    }
}
