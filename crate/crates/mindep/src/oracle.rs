//! Closed forms for the Gaussian minimum information model and samplers for
//! simulated data.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::exchange::{ChainError, ChainState};
use crate::model::{Column, ColumnKind, Dataset, MarginalSpec, ModelError, ModelSpec, ParametricFamily, Value};
use crate::rank::{decompose, recompose, OrderPolicy};

/// Cumulative probability at which the Poisson inverse CDF stops searching.
pub const POISSON_TAIL_CAP: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("|ρ| = {0} must be below 1")]
    Correlation(f64),
    #[error("standard deviations must be positive, got {0} and {1}")]
    Scale(f64, f64),
    #[error("the sample covariance is singular")]
    Singular,
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("marginal {index} cannot be sampled: {message}")]
    Unsamplable { index: usize, message: String },
    #[error("need 1 ≤ n ≤ N, got n = {n}, N = {population}")]
    Size { n: usize, population: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Correlation of the bivariate Gaussian minimum information model.
pub fn gaussian_rho(theta: f64, sigma1: f64, sigma2: f64) -> f64 {
    let s = sigma1 * sigma2;
    2.0 * theta * s / (1.0 + (1.0 + 4.0 * theta * theta * s * s).sqrt())
}

/// Inverse of [`gaussian_rho`]: `θ = ρ / (σ₁σ₂(1 − ρ²))`.
pub fn gaussian_theta(rho: f64, sigma1: f64, sigma2: f64) -> Result<f64, OracleError> {
    if !(rho.abs() < 1.0) {
        return Err(OracleError::Correlation(rho));
    }
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(OracleError::Scale(sigma1, sigma2));
    }
    Ok(rho / (sigma1 * sigma2 * (1.0 - rho * rho)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBivariate {
    pub sigma1: f64,
    pub sigma2: f64,
    pub theta: f64,
}

impl GaussianBivariate {
    pub fn rho(&self) -> f64 {
        gaussian_rho(self.theta, self.sigma1, self.sigma2)
    }

    pub fn psi(&self) -> f64 {
        gaussian_psi(self.rho())
    }
}

/// `ψ = ½ log(1 − ρ²) + 1/(1 − ρ²) − 1`.
pub fn gaussian_psi(rho: f64) -> f64 {
    let q = 1.0 - rho * rho;
    0.5 * q.ln() + 1.0 / q - 1.0
}

/// Adjusting functions and potential at `(x₁, x₂)`.
pub fn gaussian_components(x1: f64, x2: f64, theta: f64, sigma1: f64, sigma2: f64) -> (f64, f64, f64) {
    let rho = gaussian_rho(theta, sigma1, sigma2);
    let c = 1.0 / (2.0 * (1.0 - rho * rho)) - 0.5;
    (
        c * ((x1 / sigma1).powi(2) - 1.0),
        c * ((x2 / sigma2).powi(2) - 1.0),
        gaussian_psi(rho),
    )
}

pub fn normal_density(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

pub fn bivariate_normal_density(x1: f64, x2: f64, sigma1: f64, sigma2: f64, rho: f64) -> f64 {
    let (z1, z2) = (x1 / sigma1, x2 / sigma2);
    let q = 1.0 - rho * rho;
    (-(z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / (2.0 * q)).exp()
        / (2.0 * std::f64::consts::PI * sigma1 * sigma2 * q.sqrt())
}

/// Negated off-diagonal entries of the inverse sample covariance (centred,
/// denominator `n`), in the order `(1,2), (1,3), …, (d−1,d)`.
pub fn gaussian_mle(data: &Dataset) -> Result<Vec<f64>, OracleError> {
    let (n, d) = (data.n_rows(), data.n_cols());
    let x = data.numeric_rows();
    let mut mean = vec![0.0; d];
    for t in 0..n {
        for i in 0..d {
            mean[i] += x[t * d + i] / n as f64;
        }
    }
    let mut s = DMatrix::<f64>::zeros(d, d);
    for t in 0..n {
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] += (x[t * d + i] - mean[i]) * (x[t * d + j] - mean[j]) / n as f64;
            }
        }
    }
    let p = s.cholesky().ok_or(OracleError::Singular)?.inverse();
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            out.push(-p[(i, j)]);
        }
    }
    Ok(out)
}

/// `σ_ij = φ^{|i−j|}`.
pub fn ar1_covariance(d: usize, phi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| phi.powi((i as i32 - j as i32).abs()))
}

/// Unit variances, all correlations `ρ`.
pub fn exchangeable_covariance(d: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho })
}

/// The `(θ_k) = (−σ^{ij})` vector of a covariance matrix.
pub fn precision_offdiagonals(cov: &DMatrix<f64>) -> Result<Vec<f64>, OracleError> {
    let d = cov.nrows();
    let p = cov
        .clone()
        .cholesky()
        .ok_or(OracleError::NotPositiveDefinite)?
        .inverse();
    let mut out = Vec::new();
    for i in 0..d {
        for j in i + 1..d {
            out.push(-p[(i, j)]);
        }
    }
    Ok(out)
}

/// `n` zero-mean normal rows with covariance `cov`.
pub fn sample_normal<R: Rng + ?Sized>(
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let d = cov.nrows();
    let l = cov
        .clone()
        .cholesky()
        .ok_or(OracleError::NotPositiveDefinite)?
        .l();
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
            (&l * z).iter().copied().collect()
        })
        .collect())
}

/// Smallest `k` with `P(X ≤ k) ≥ u`, searching no further than cumulative
/// probability [`POISSON_TAIL_CAP`].
pub fn poisson_inverse_cdf(rate: f64, u: f64) -> i64 {
    let u = u.min(POISSON_TAIL_CAP);
    let mut k = 0i64;
    let mut pk = (-rate).exp();
    let mut cum = pk;
    while cum < u {
        k += 1;
        pk *= rate / k as f64;
        cum += pk;
        if pk == 0.0 && k as f64 > rate {
            break;
        }
    }
    k
}

fn value_for(kind: &ColumnKind, x: f64, index: usize) -> Result<Value, OracleError> {
    Ok(match kind {
        ColumnKind::Continuous | ColumnKind::Circular => Value::Real(x),
        ColumnKind::Count => Value::Int(x.round() as i64),
        ColumnKind::Categorical { levels, .. } => {
            let k = x.round();
            if k < 0.0 || k as usize >= levels.len() {
                return Err(OracleError::Unsamplable {
                    index,
                    message: format!("value {x} is not a level index"),
                });
            }
            Value::Level(k as usize)
        }
    })
}

/// `n` i.i.d. draws from one marginal, typed for `kind`.
pub fn sample_marginal<R: Rng + ?Sized>(
    spec: &MarginalSpec,
    kind: &ColumnKind,
    index: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Value>, OracleError> {
    let bad = |message: String| OracleError::Unsamplable { index, message };
    let draws: Vec<f64> = match spec {
        MarginalSpec::Parametric(f) => match *f {
            ParametricFamily::Normal { mean, variance } => {
                let dist = Normal::new(mean, variance.sqrt()).map_err(|e| bad(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            ParametricFamily::Poisson { rate } => (0..n)
                .map(|_| poisson_inverse_cdf(rate, rng.random::<f64>()) as f64)
                .collect(),
            ParametricFamily::Bernoulli { p } => {
                (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < p))).collect()
            }
            ParametricFamily::Beta { alpha, beta } => {
                let dist = Beta::new(alpha, beta).map_err(|e| bad(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            ParametricFamily::UniformCircle => (0..n)
                .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
                .collect(),
        },
        MarginalSpec::FiniteTable {
            support,
            probabilities,
        } => {
            let is_categorical = matches!(kind, ColumnKind::Categorical { .. });
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut k = probabilities.len() - 1;
                    for (j, p) in probabilities.iter().enumerate() {
                        cum += p;
                        if u < cum {
                            k = j;
                            break;
                        }
                    }
                    if is_categorical {
                        k as f64
                    } else {
                        support[k]
                    }
                })
                .collect()
        }
        MarginalSpec::Empirical => {
            return Err(bad("an empirical marginal has no generative model".into()))
        }
    };
    draws.iter().map(|&x| value_for(kind, x, index)).collect()
}

/// Approximate draw of `n` rows from the model: `N` i.i.d. rows from the
/// product of the marginals, `length` exchange steps at `spec.theta`
/// (default `150·N`), then `n` rows subsampled without replacement.
pub fn sample_population<R: Rng + ?Sized>(
    spec: &ModelSpec,
    n: usize,
    population: usize,
    length: Option<u64>,
    rng: &mut R,
) -> Result<Dataset, OracleError> {
    if n == 0 || n > population {
        return Err(OracleError::Size { n, population });
    }
    let columns = spec
        .kinds
        .iter()
        .zip(&spec.marginals)
        .enumerate()
        .map(|(i, (kind, m))| {
            Ok(Column::new(
                format!("x{}", i + 1),
                kind.clone(),
                sample_marginal(m, kind, i, population, rng)?,
            ))
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    let data = Dataset::new(columns)?;
    let dec = decompose(&data, OrderPolicy::Observational, rng);
    let mut state = ChainState::new(&dec, &spec.h, &spec.theta)?;
    let steps = length.unwrap_or(150 * population as u64);
    for _ in 0..steps {
        state.step(rng)?;
    }
    let pop = recompose(&dec.with_perms(state.perms().to_vec()).expect("chain keeps permutations valid"));
    let mut rows = index::sample(rng, population, n).into_vec();
    rows.sort_unstable();
    Ok(pop.select_rows(&rows))
}
