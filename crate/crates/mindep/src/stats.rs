//! Descriptive statistics and goodness-of-fit helpers used by the samplers,
//! estimators and the simulation harness.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Sample mean of equally long vectors.
pub fn mean(samples: &[Vec<f64>]) -> DVector<f64> {
    let k = samples.first().map_or(0, Vec::len);
    let mut m = DVector::zeros(k);
    for s in samples {
        for (a, b) in m.iter_mut().zip(s) {
            *a += b;
        }
    }
    m / samples.len().max(1) as f64
}

/// Covariance with denominator `N` (the plug-in moment estimate).
pub fn covariance(samples: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let w = vec![1.0; samples.len()];
    weighted_moments(samples, &w)
}

/// Mean and covariance under normalized weights `w` (any positive scale).
pub fn weighted_moments(samples: &[Vec<f64>], w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let k = samples.first().map_or(0, Vec::len);
    let total: f64 = w.iter().sum();
    let mut m = DVector::zeros(k);
    for (s, &wi) in samples.iter().zip(w) {
        for (a, b) in m.iter_mut().zip(s) {
            *a += wi * b;
        }
    }
    m /= total;
    let mut c = DMatrix::zeros(k, k);
    let mut dev = vec![0.0; k];
    for (s, &wi) in samples.iter().zip(w) {
        for j in 0..k {
            dev[j] = s[j] - m[j];
        }
        for a in 0..k {
            let da = wi * dev[a];
            for b in a..k {
                c[(a, b)] += da * dev[b];
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            let v = c[(a, b)] / total;
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    (m, c)
}

/// Kish effective sample size of importance weights.
pub fn kish_ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Normalized importance weights `∝ exp(logw)`, computed stably.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    for x in &mut w {
        *x /= s;
    }
    w
}

/// Number of batches for `draws` draws: `requested`, or ⌊√draws⌋.
pub fn batch_count(draws: usize, requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| (draws as f64).sqrt() as usize)
}

/// Batch-means estimate of the covariance of the mean of a stationary vector
/// series. `values[i]` is the i-th draw; the series is cut into `batches`
/// consecutive blocks of equal length (a trailing remainder is dropped).
pub fn batch_means_cov(values: &[Vec<f64>], batches: usize) -> DMatrix<f64> {
    let k = values.first().map_or(0, Vec::len);
    let b = batches.min(values.len()).max(2);
    let len = values.len() / b;
    if len == 0 {
        return DMatrix::from_element(k, k, f64::NAN);
    }
    let means: Vec<Vec<f64>> = (0..b)
        .map(|j| mean(&values[j * len..(j + 1) * len]).iter().cloned().collect())
        .collect();
    let (_, c) = covariance(&means);
    // c has denominator b; the variance of the grand mean is var(batch)/b with
    // the unbiased batch variance.
    c * (1.0 / (b as f64 - 1.0))
}

/// Variance of the mean of a stationary scalar series by Geyer's initial
/// positive sequence estimator.
pub fn initial_sequence_var(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let acov = |lag: usize| -> f64 {
        (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64
    };
    let mut sum = -acov(0);
    let mut lag = 0;
    while lag + 1 < n {
        let pair = acov(lag) + acov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum += 2.0 * pair;
        lag += 2;
    }
    sum.max(acov(0)) / n as f64
}

/// Pearson chi-square goodness of fit against `expected` probabilities.
/// Returns (statistic, p-value).
pub fn chi_square_gof(counts: &[u64], expected: &[f64]) -> (f64, f64) {
    let n: u64 = counts.iter().sum();
    let total: f64 = expected.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, &p)| {
            let e = n as f64 * p / total;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dof = (counts.len() - 1) as f64;
    let p = ChiSquared::new(dof).map_or(f64::NAN, |d| d.sf(stat));
    (stat, p)
}

/// Upper tail of a chi-square with `dof` degrees of freedom.
pub fn chi_square_sf(stat: f64, dof: f64) -> f64 {
    ChiSquared::new(dof).map_or(f64::NAN, |d| d.sf(stat))
}

/// Total variation distance between two probability vectors.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
/// Returns (D, asymptotic p-value).
pub fn ks_test(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    (d, kolmogorov_sf((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * x * x).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Pearson correlation of two equally long samples.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariance_of_known_sample() {
        let s = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 4.0]];
        let (m, c) = covariance(&s);
        assert_eq!(m.as_slice(), &[3.0, 4.0]);
        // deviations (−2,−2),(0,2),(2,0)
        assert!((c[(0, 0)] - 8.0 / 3.0).abs() < 1e-15);
        assert!((c[(1, 1)] - 8.0 / 3.0).abs() < 1e-15);
        assert!((c[(0, 1)] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weights_scale_free() {
        let s = vec![vec![1.0], vec![2.0], vec![4.0]];
        let (m1, c1) = weighted_moments(&s, &[1.0, 2.0, 1.0]);
        let (m2, c2) = weighted_moments(&s, &[0.25, 0.5, 0.25]);
        assert!((m1[0] - m2[0]).abs() < 1e-15 && (m1[0] - 2.25).abs() < 1e-15);
        assert!((c1[(0, 0)] - c2[(0, 0)]).abs() < 1e-15);
        assert_eq!(kish_ess(&[1.0; 8]), 8.0);
        assert!((kish_ess(&[1.0, 0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chi_square_perfect_fit() {
        let (stat, p) = chi_square_gof(&[25, 25, 25, 25], &[0.25; 4]);
        assert_eq!(stat, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
        // 3 dof, statistic 7.814728 is the 5% critical value
        assert!((chi_square_sf(7.814_727_903_251_178, 3.0) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn kolmogorov_tail_known_value() {
        // K(1.358) ≈ 0.95
        assert!((kolmogorov_sf(1.358_098_8) - 0.05).abs() < 1e-5);
    }

    #[test]
    fn batch_means_of_iid_series() {
        use rand::Rng;
        let mut rng = crate::seed::rng(3);
        let v: Vec<Vec<f64>> = (0..20_000).map(|_| vec![rng.random::<f64>()]).collect();
        let c = batch_means_cov(&v, 50);
        let expected = (1.0 / 12.0) / 20_000.0;
        assert!((c[(0, 0)] / expected - 1.0).abs() < 0.5, "{}", c[(0, 0)] / expected);
    }

    #[test]
    fn initial_sequence_matches_ar1() {
        use rand::Rng;
        let mut rng = crate::seed::rng(4);
        let (phi, n) = (0.8f64, 200_000);
        let mut x = vec![0.0; n];
        for t in 1..n {
            x[t] = phi * x[t - 1] + rng.random_range(-1.0..1.0);
        }
        // Unit-variance-scaled AR(1): asymptotic variance σ²/(1−φ)².
        let expected = (1.0 / 3.0) / (1.0 - phi).powi(2) / n as f64;
        let got = initial_sequence_var(&x);
        assert!((got / expected - 1.0).abs() < 0.15, "{}", got / expected);
        assert!(initial_sequence_var(&[1.0]).is_nan());
    }
}
