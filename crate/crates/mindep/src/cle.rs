//! Conditional maximum likelihood for the dependence parameter.
//!
//! Given the order statistics `M`, the rank permutations follow the
//! exponential family `f(π|M;θ) ∝ exp(θᵀh_*(π))` on the relative arrangements
//! of the columns. Small problems are solved by enumerating every
//! arrangement; larger ones by Fisher scoring with Monte Carlo moments from
//! the exchange algorithm, reusing each chain through importance weights
//! until their effective sample size collapses.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::exchange::{run_chains, ChainConfig, ChainError};
use crate::linalg;
use crate::lp::{self, Interiority};
use crate::model::{CanonicalStatistic, Dataset, EvalError};
use crate::ple::{fit_ple, PleError, PleOptions};
use crate::rank::{self, decompose, OrderPolicy, RankDecomposition};
use crate::seed;
use crate::stats;

/// Largest number of relative arrangements the exact backend enumerates.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 10_000;

/// Newton tolerance of the exact backend.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CleError {
    #[error("the estimate does not exist: the observed statistic lies on the boundary of its convex support{}", fmt_direction(.direction))]
    NonExistence { direction: Option<Vec<f64>> },
    #[error("the statistics are linearly dependent over the arrangements, so θ is not identified")]
    Degenerate,
    #[error("scoring diverged after {restarts} restarts (|θ_{component}| = {value})")]
    Divergence {
        restarts: usize,
        component: usize,
        value: f64,
    },
    #[error("{needed} arrangements exceed the enumeration budget {budget}")]
    Budget { needed: String, budget: usize },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Ple(#[from] PleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Lp(String),
}

fn fmt_direction(d: &Option<Vec<f64>>) -> String {
    match d {
        Some(v) => format!(
            "; separating direction {:?}",
            v.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Exact when the arrangements fit in the enumeration budget.
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    FromPle,
    Zero,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactEnumeration,
    MonteCarloScoring,
    Map,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleOptions {
    pub backend: Backend,
    pub init: Init,
    /// Convergence threshold on `‖Ǧ⁻¹(h_*(π) − μ̌)‖∞`.
    pub tol: f64,
    /// Maximum number of scoring updates.
    pub max_iter: usize,
    /// Chain settings; `None` uses [`ChainConfig::for_size`].
    pub chain: Option<ChainConfig>,
    pub seed: u64,
    pub order: OrderPolicy,
    pub enumeration_budget: usize,
    pub max_restarts: usize,
    /// Largest factor by which the chain length may grow when updates stall.
    pub max_length_factor: u64,
    /// Chains run per draw.
    pub chains: usize,
    /// Batches for the Monte Carlo standard errors; `None` uses ⌊√N⌋ for
    /// N retained draws.
    pub batches: Option<usize>,
    /// The chain is lengthened until the Monte Carlo error of each component
    /// is at most this fraction of its standard error.
    pub mc_precision: f64,
    /// Estimate the conditional log-likelihood by path sampling when it
    /// cannot be enumerated.
    pub estimate_loglik: bool,
}

impl Default for CleOptions {
    fn default() -> Self {
        CleOptions {
            backend: Backend::Auto,
            init: Init::FromPle,
            tol: 1e-2,
            max_iter: 100,
            chain: None,
            seed: 0,
            order: OrderPolicy::Observational,
            enumeration_budget: DEFAULT_ENUMERATION_BUDGET,
            max_restarts: 3,
            max_length_factor: 64,
            chains: 1,
            batches: None,
            mc_precision: 0.1,
            estimate_loglik: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogLik {
    pub value: f64,
    /// Monte Carlo standard error; absent for exact values.
    pub se: Option<f64>,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub method: Method,
    pub labels: Vec<String>,
    pub n: usize,
    pub theta_hat: Vec<f64>,
    /// Inverse conditional Fisher information.
    pub covariance: Vec<Vec<f64>>,
    pub std_errors: Vec<f64>,
    /// Monte Carlo error of `theta_hat` itself.
    pub mc_std_errors: Option<Vec<f64>>,
    pub loglik: Option<LogLik>,
    pub h_observed: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub redraws: usize,
    pub tol: f64,
    pub seed: u64,
    pub chain: Option<ChainConfig>,
    pub floored_eigenvalues: usize,
}

impl FitReport {
    pub fn k(&self) -> usize {
        self.theta_hat.len()
    }
}

// ---------------------------------------------------------------------------
// Exact enumeration

fn factorial_checked(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

/// Number of relative arrangements `(n!)^{d−1}`, if it fits in `usize`.
pub fn arrangement_count(n: usize, d: usize) -> Option<usize> {
    let f = factorial_checked(n)?;
    (1..d).try_fold(1usize, |acc, _| acc.checked_mul(f))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    while next_permutation(&mut p) {
        out.push(p.clone());
    }
    out
}

/// Lexicographic rank of a permutation of `0..n`.
pub fn permutation_rank(p: &[usize]) -> usize {
    let n = p.len();
    let mut rank = 0;
    let mut fact = factorial_checked(n.saturating_sub(1)).unwrap_or(1);
    let mut used = vec![false; n];
    for (k, &v) in p.iter().enumerate() {
        let smaller = (0..v).filter(|&x| !used[x]).count();
        rank += smaller * fact;
        used[v] = true;
        if n - k - 1 > 0 {
            fact /= n - k - 1;
        }
    }
    rank
}

/// Every relative arrangement of a decomposition with its `h_*`.
///
/// Arrangements fix the first column and let columns `2..d` range over all
/// permutations; arrangement `a` has column `i` permuted by the
/// lexicographically `digit_i(a)`-th permutation, with column 2 the least
/// significant digit.
#[derive(Debug, Clone)]
pub struct ExactFamily {
    k: usize,
    n: usize,
    d: usize,
    stats: Vec<Vec<f64>>,
    observed: Vec<f64>,
}

/// Moments of `h_*` under `f(·|M;θ)`.
#[derive(Debug, Clone)]
pub struct ExactMoments {
    pub log_normalizer: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ExactFamily {
    pub fn new(
        dec: &RankDecomposition,
        h: &CanonicalStatistic,
        budget: usize,
    ) -> Result<Self, CleError> {
        let (n, d, k) = (dec.n(), dec.d(), h.dim());
        let count = arrangement_count(n, d);
        match count {
            Some(c) if c <= budget => {}
            _ => {
                return Err(CleError::Budget {
                    needed: count.map_or_else(|| format!("({n}!)^{}", d - 1), |c| c.to_string()),
                    budget,
                })
            }
        }
        let perms = all_permutations(n);
        let sorted = dec.sorted_numeric();
        let total = count.unwrap_or(0);
        let mut stats = Vec::with_capacity(total);
        let mut digits = vec![0usize; d.saturating_sub(1)];
        let mut row = vec![0.0; d];
        let mut out = vec![0.0; k];
        for _ in 0..total {
            let mut hs = vec![0.0; k];
            for t in 0..n {
                row[0] = sorted[0][t];
                for i in 1..d {
                    row[i] = sorted[i][perms[digits[i - 1]][t]];
                }
                h.eval_into(&row, &mut out)?;
                for (a, b) in hs.iter_mut().zip(&out) {
                    *a += b;
                }
            }
            stats.push(hs);
            for dg in digits.iter_mut() {
                *dg += 1;
                if *dg < perms.len() {
                    break;
                }
                *dg = 0;
            }
        }
        let observed = rank::h_star(dec, h)?;
        Ok(ExactFamily {
            k,
            n,
            d,
            stats,
            observed,
        })
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn stats(&self) -> &[Vec<f64>] {
        &self.stats
    }

    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    /// Index of the arrangement reached by the permutations `perms`.
    pub fn arrangement_index(&self, perms: &[Vec<usize>]) -> usize {
        let n = self.n;
        let mut inv0 = vec![0; n];
        for (t, &r) in perms[0].iter().enumerate() {
            inv0[r] = t;
        }
        let fact = factorial_checked(n).unwrap_or(1);
        let mut index = 0;
        let mut place = 1;
        for p in perms.iter().take(self.d).skip(1) {
            let rel: Vec<usize> = (0..n).map(|r| p[inv0[r]]).collect();
            index += permutation_rank(&rel) * place;
            place *= fact;
        }
        index
    }

    fn energies(&self, theta: &[f64]) -> Vec<f64> {
        self.stats
            .iter()
            .map(|s| s.iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn log_normalizer(&self, theta: &[f64]) -> f64 {
        logsumexp(&self.energies(theta))
    }

    /// `f(π̃|M;θ)` for every arrangement.
    pub fn probabilities(&self, theta: &[f64]) -> Vec<f64> {
        let e = self.energies(theta);
        let z = logsumexp(&e);
        e.iter().map(|x| (x - z).exp()).collect()
    }

    pub fn moments(&self, theta: &[f64]) -> ExactMoments {
        let e = self.energies(theta);
        let z = logsumexp(&e);
        let w: Vec<f64> = e.iter().map(|x| (x - z).exp()).collect();
        let (mean, cov) = stats::weighted_moments(&self.stats, &w);
        ExactMoments {
            log_normalizer: z,
            mean,
            cov,
        }
    }

    /// `log f(π|M;θ)` of the observed arrangement.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        dot(theta, &self.observed) - self.log_normalizer(theta)
    }

    /// Whether `target` is interior to the convex hull of the `h_*`.
    pub fn interiority(&self, target: &[f64]) -> Result<Interiority, CleError> {
        let diffs: Vec<Vec<f64>> = self
            .stats
            .iter()
            .map(|s| target.iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();
        lp::interiority(&diffs, self.k).map_err(CleError::Lp)
    }

    /// Unit `v` with `vᵀh_*(π) ≤ vᵀtarget` for every arrangement, strictly
    /// for some, when `target` is on the boundary of the convex support.
    pub fn separation(&self, target: &[f64]) -> Result<Option<Vec<f64>>, CleError> {
        let diffs: Vec<Vec<f64>> = self
            .stats
            .iter()
            .map(|s| target.iter().zip(s).map(|(a, b)| a - b).collect())
            .collect();
        lp::separating_direction(&diffs, self.k).map_err(CleError::Lp)
    }

    /// Damped Newton for `μ(θ) = target`. Returns (θ, iterations, converged).
    pub fn solve(&self, target: &[f64], start: &[f64], max_iter: usize) -> (Vec<f64>, usize, bool) {
        let tgt = DVector::from_column_slice(target);
        let mut theta = DVector::from_column_slice(start);
        let obj = |t: &DVector<f64>| t.dot(&tgt) - self.log_normalizer(t.as_slice());
        let mut cur = obj(&theta);
        for it in 1..=max_iter {
            let m = self.moments(theta.as_slice());
            let Some((inv, _)) = linalg::floored_inverse(&m.cov) else {
                return (linalg::to_vec(&theta), it, false);
            };
            let step = inv * (&tgt - &m.mean);
            if step.amax() <= EXACT_TOL * theta.amax().max(1.0) {
                return (linalg::to_vec(&(theta + step)), it, true);
            }
            let mut scale = 1.0;
            loop {
                let cand = &theta + &step * scale;
                let val = obj(&cand);
                if val >= cur - 1e-12 * cur.abs().max(1.0) || scale < 1e-10 {
                    theta = cand;
                    cur = val;
                    break;
                }
                scale *= 0.5;
            }
        }
        (linalg::to_vec(&theta), max_iter, false)
    }
}

fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exact `log f(π|M;θ)` by enumerating the relative arrangements.
pub fn conditional_loglik_exact(
    theta: &[f64],
    dec: &RankDecomposition,
    h: &CanonicalStatistic,
    budget: usize,
) -> Result<f64, CleError> {
    Ok(ExactFamily::new(dec, h, budget)?.loglik(theta))
}

// ---------------------------------------------------------------------------
// Monte Carlo moments

#[derive(Debug, Clone)]
pub struct McMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Batch-means standard error of each component of `mean`.
    pub mc_se: Vec<f64>,
    pub samples: usize,
    /// Every retained sample was identical: the covariance carries no
    /// information and must not be inverted.
    pub degenerate: bool,
}

pub fn conditional_moments_mc(
    theta: &[f64],
    dec: &RankDecomposition,
    h: &CanonicalStatistic,
    cfg: &ChainConfig,
) -> Result<McMoments, CleError> {
    let out = run_chains(dec, theta, h, cfg, 1)?;
    Ok(moments_of(&out.samples, None))
}

fn moments_of(samples: &[Vec<f64>], batches: Option<usize>) -> McMoments {
    let (mean, cov) = stats::covariance(samples);
    let bm = stats::batch_means_cov(samples, stats::batch_count(samples.len(), batches));
    // Incremental updates leave rounding noise, so identical means equal up
    // to a relative 1e-9.
    let degenerate = (0..mean.len()).all(|j| {
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[j]), hi.max(s[j])));
        hi - lo <= 1e-9 * mean[j].abs().max(1.0)
    });
    McMoments {
        mc_se: (0..mean.len()).map(|j| bm[(j, j)].max(0.0).sqrt()).collect(),
        mean,
        cov,
        samples: samples.len(),
        degenerate,
    }
}

// ---------------------------------------------------------------------------
// Fitting

struct Problem<'a> {
    dec: RankDecomposition,
    h: &'a CanonicalStatistic,
    observed: Vec<f64>,
    exact: Option<ExactFamily>,
}

impl<'a> Problem<'a> {
    fn new(data: &Dataset, h: &'a CanonicalStatistic, opts: &CleOptions) -> Result<Self, CleError> {
        let n = data.n_rows();
        if n < 2 {
            return Err(CleError::TooFewRows(n));
        }
        if h.arity() != data.n_cols() {
            return Err(CleError::Invalid(format!(
                "h takes {} variables, data has {}",
                h.arity(),
                data.n_cols()
            )));
        }
        let mut rng = seed::rng(seed::derive(opts.seed, 0x7261_6e6b));
        let dec = decompose(data, opts.order, &mut rng);
        let observed = rank::h_star(&dec, h)?;
        let feasible = arrangement_count(n, data.n_cols())
            .is_some_and(|c| c <= opts.enumeration_budget);
        let exact = match (opts.backend, feasible) {
            (Backend::Exact, false) => {
                return Err(CleError::Budget {
                    needed: arrangement_count(n, data.n_cols())
                        .map_or_else(|| "overflow".into(), |c| c.to_string()),
                    budget: opts.enumeration_budget,
                })
            }
            (_, true) => Some(ExactFamily::new(&dec, h, opts.enumeration_budget)?),
            _ => None,
        };
        Ok(Problem {
            dec,
            h,
            observed,
            exact,
        })
    }
}

fn covariance_report(g: &DMatrix<f64>, scale: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>, usize), CleError> {
    let (inv, floored) = linalg::floored_inverse(&(g * scale)).ok_or(CleError::Degenerate)?;
    let se = (0..inv.nrows()).map(|j| inv[(j, j)].max(0.0).sqrt()).collect();
    Ok((linalg::to_rows(&inv), se, floored))
}

fn fit_exact(
    prob: &Problem,
    family: &ExactFamily,
    target: &[f64],
    prior_weight: f64,
    opts: &CleOptions,
    check_existence: bool,
    method: Method,
) -> Result<FitReport, CleError> {
    if check_existence {
        match family.interiority(target)? {
            Interiority::Interior => {}
            Interiority::Boundary => {
                return Err(CleError::NonExistence {
                    direction: family.separation(target)?,
                })
            }
            Interiority::Degenerate => return Err(CleError::Degenerate),
        }
    }
    let start = match &opts.init {
        Init::Custom(v) => v.clone(),
        _ => vec![0.0; prob.h.dim()],
    };
    let (theta, iterations, converged) = family.solve(target, &start, opts.max_iter.max(200));
    let m = family.moments(&theta);
    let (covariance, std_errors, floored) = covariance_report(&m.cov, 1.0 + prior_weight)?;
    Ok(FitReport {
        method,
        labels: prob.h.labels().to_vec(),
        n: prob.dec.n(),
        loglik: Some(LogLik {
            value: family.loglik(&theta),
            se: None,
            exact: true,
        }),
        theta_hat: theta,
        covariance,
        std_errors,
        mc_std_errors: None,
        h_observed: prob.observed.clone(),
        iterations,
        converged,
        restarts: 0,
        redraws: 0,
        tol: EXACT_TOL,
        seed: opts.seed,
        chain: None,
        floored_eigenvalues: floored,
    })
}

/// Greedy random-restart search for an arrangement with `vᵀh_* > vᵀh_obs`.
fn beats_in_direction(
    dec: &RankDecomposition,
    h: &CanonicalStatistic,
    v: &[f64],
    observed: &[f64],
    seed_: u64,
) -> Result<bool, CleError> {
    let base = dot(v, observed);
    let scale = observed.iter().map(|x| x.abs()).sum::<f64>().max(1.0)
        * v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let margin = 1e-9 * scale;
    let (n, d) = (dec.n(), dec.d());
    let mut rng = seed::rng(seed_);
    for restart in 0..8 {
        let mut perms = dec.perms().to_vec();
        if restart > 0 {
            for p in perms.iter_mut().skip(1) {
                p.shuffle(&mut rng);
            }
        }
        let mut cur = dot(v, &rank::h_star(&dec.with_perms(perms.clone()).expect("valid"), h)?);
        if cur > base + margin {
            return Ok(true);
        }
        // First-improvement hill climbing over transpositions.
        let mut improved = true;
        let mut sweeps = 0;
        while improved && sweeps < 50 {
            improved = false;
            sweeps += 1;
            for i in 1..d.max(2).min(d) {
                for s in 0..n {
                    for t in s + 1..n {
                        perms[i].swap(s, t);
                        let cand = dec.with_perms(perms.clone()).expect("valid");
                        let val = dot(v, &rank::h_star(&cand, h)?);
                        if val > cur + margin {
                            cur = val;
                            improved = true;
                            if cur > base + margin {
                                return Ok(true);
                            }
                        } else {
                            perms[i].swap(s, t);
                        }
                    }
                }
            }
        }
    }
    Ok(false)
}

struct McOutcome {
    theta: Vec<f64>,
    g: DMatrix<f64>,
    mc_se: Vec<f64>,
    iterations: usize,
    converged: bool,
    restarts: usize,
    redraws: usize,
    chain: ChainConfig,
}

enum Scoring {
    Done(McOutcome),
    Diverged { component: usize, value: f64 },
}

#[allow(clippy::too_many_arguments)]
/// Step halvings allowed per Monte Carlo scoring update.
const MAX_HALVINGS: usize = 30;

fn score_mc(
    prob: &Problem,
    target: &[f64],
    start: Vec<f64>,
    base_cfg: ChainConfig,
    opts: &CleOptions,
    limit: &[f64],
    restarts: usize,
    iterations_used: usize,
) -> Result<Scoring, CleError> {
    let k = prob.h.dim();
    let tgt = DVector::from_column_slice(target);
    let mut theta = DVector::from_column_slice(&start);
    let mut cfg = base_cfg;
    let mut factor = 1u64;
    let mut iterations = iterations_used;
    let mut redraws = 0usize;
    let mut draw = 0u64;
    loop {
        draw += 1;
        let chain_seed = seed::derive2(opts.seed, restarts as u64 + 1, draw);
        let out = run_chains(
            &prob.dec,
            theta.as_slice(),
            prob.h,
            &cfg.with_seed(chain_seed),
            opts.chains,
        )?;
        redraws += 1;
        let samples = out.samples;
        let kept = samples.len() as f64;
        let theta_ref = theta.clone();
        loop {
            let delta = &theta - &theta_ref;
            let logw: Vec<f64> = samples.iter().map(|s| dot(delta.as_slice(), s)).collect();
            let w = stats::normalize_log_weights(&logw);
            let ess = stats::kish_ess(&w);
            if ess < kept / 10.0 {
                break;
            }
            let (mu, g) = stats::weighted_moments(&samples, &w);
            let Some((ginv, _)) = linalg::floored_inverse(&g) else {
                return Err(CleError::Degenerate);
            };
            let step = &ginv * (&tgt - &mu);
            let size = step.amax();
            debug!("draw {draw}: L={} ess={ess:.0}/{kept} step={size:.3e}", cfg.length);
            let done = size <= opts.tol || iterations >= opts.max_iter;
            if done {
                if ess < kept / 2.0 && size <= opts.tol {
                    // Confirm on a chain drawn at the candidate.
                    break;
                }
                // Delta-method Monte Carlo error of the root of μ̌(θ) = target.
                let z: Vec<Vec<f64>> = samples
                    .iter()
                    .zip(&w)
                    .map(|(s, wj)| s.iter().zip(mu.iter()).map(|(a, m)| kept * wj * (a - m)).collect())
                    .collect();
                // Short chains make batch means optimistic; the initial
                // sequence estimator is applied to each projected series.
                let mc_se: Vec<f64> = (0..k)
                    .map(|j| {
                        let u: Vec<f64> = z
                            .iter()
                            .map(|zt| (0..k).map(|a| ginv[(j, a)] * zt[a]).sum())
                            .collect();
                        stats::initial_sequence_var(&u).max(0.0).sqrt()
                    })
                    .collect();
                let noisy = (0..k).any(|j| mc_se[j] > opts.mc_precision * ginv[(j, j)].max(0.0).sqrt());
                let converged = size <= opts.tol;
                if converged && noisy && factor < opts.max_length_factor {
                    factor *= 2;
                    cfg = base_cfg.scaled(factor);
                    info!("Monte Carlo error too large, lengthening the chain to L={}", cfg.length);
                    break;
                }
                return Ok(Scoring::Done(McOutcome {
                    theta: linalg::to_vec(&if converged { &theta + &step } else { theta }),
                    g,
                    mc_se,
                    iterations,
                    converged,
                    restarts,
                    redraws,
                    chain: cfg,
                }));
            }
            // Cap the step, then halve it until the current draws still cover
            // the new point, and redraw there. Directions in which the draws
            // do not vary are invisible to the weights, hence the cap.
            let mut step = step;
            let cap = theta.amax().max(2.0);
            let mut damped = size > cap;
            if damped {
                step *= cap / size;
            }
            for _ in 0..MAX_HALVINGS {
                let next = &theta + &step - &theta_ref;
                let logw: Vec<f64> = samples.iter().map(|s| dot(next.as_slice(), s)).collect();
                if stats::kish_ess(&stats::normalize_log_weights(&logw)) >= kept / 10.0 {
                    break;
                }
                step *= 0.5;
                damped = true;
            }
            theta += step;
            iterations += 1;
            for (j, &v) in theta.iter().enumerate() {
                if !v.is_finite() || v.abs() > limit[j] {
                    return Ok(Scoring::Diverged {
                        component: j,
                        value: v,
                    });
                }
            }
            if damped {
                break;
            }
        }
    }
}

fn initial_theta(
    data: &Dataset,
    h: &CanonicalStatistic,
    opts: &CleOptions,
    prob: &Problem,
    check_existence: bool,
) -> Result<(Vec<f64>, Vec<f64>), CleError> {
    let k = h.dim();
    let needs_ple = matches!(opts.init, Init::FromPle) || check_existence;
    let ple = if needs_ple {
        Some(fit_ple(data, h, &PleOptions::default())?)
    } else {
        None
    };
    let mut start = match &opts.init {
        Init::Custom(v) => {
            if v.len() != k {
                return Err(CleError::Invalid(format!(
                    "initial θ has {} components, h has {k}",
                    v.len()
                )));
            }
            v.clone()
        }
        Init::Zero => vec![0.0; k],
        Init::FromPle => vec![0.0; k],
    };
    let mut ple_theta = vec![0.0; k];
    if let Some(p) = &ple {
        if p.exists {
            ple_theta = p.theta_hat.clone();
            if matches!(opts.init, Init::FromPle) {
                start = p.theta_hat.clone();
            }
        } else if check_existence {
            if p.degenerate {
                return Err(CleError::Degenerate);
            }
            let dir = p.separation.clone();
            let beaten = match &dir {
                Some(v) => beats_in_direction(&prob.dec, h, v, &prob.observed, opts.seed)?,
                None => false,
            };
            if !beaten {
                return Err(CleError::NonExistence { direction: dir });
            }
        }
    }
    Ok((start, ple_theta))
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
fn gauss_legendre(m: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(m);
    for i in 1..=m {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=m {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

/// Path-sampling estimate of `log f(π|M;θ)`:
/// `Ψ(θ) − Ψ(0) = ∫₀¹ θᵀμ(sθ) ds` with `Ψ(0) = (d−1) log n!`.
fn loglik_path_sampling(
    prob: &Problem,
    theta: &[f64],
    cfg: &ChainConfig,
    opts: &CleOptions,
) -> Result<LogLik, CleError> {
    let (n, d) = (prob.dec.n(), prob.dec.d());
    let log_nfact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    let psi0 = (d as f64 - 1.0) * log_nfact;
    let mut integral = 0.0;
    let mut var = 0.0;
    for (node, (s, w)) in gauss_legendre(12).into_iter().enumerate() {
        let th: Vec<f64> = theta.iter().map(|x| x * s).collect();
        let c = cfg.with_seed(seed::derive2(opts.seed, 0x7061_7468, node as u64));
        let out = run_chains(&prob.dec, &th, prob.h, &c, opts.chains)?;
        let proj: Vec<Vec<f64>> = out.samples.iter().map(|x| vec![dot(theta, x)]).collect();
        let m = stats::mean(&proj)[0];
        let bm = stats::batch_means_cov(&proj, stats::batch_count(proj.len(), opts.batches))[(0, 0)];
        integral += w * m;
        var += w * w * bm;
    }
    let psi = psi0 + integral;
    Ok(LogLik {
        value: dot(theta, &prob.observed) - psi,
        se: Some(var.max(0.0).sqrt()),
        exact: false,
    })
}

fn fit_mc(
    data: &Dataset,
    h: &CanonicalStatistic,
    prob: &Problem,
    target: &[f64],
    prior_weight: f64,
    opts: &CleOptions,
    check_existence: bool,
    method: Method,
) -> Result<FitReport, CleError> {
    let k = h.dim();
    let (mut start, ple_theta) = initial_theta(data, h, opts, prob, check_existence)?;
    let limit: Vec<f64> = ple_theta.iter().map(|p| 50.0 * (1.0 + p.abs())).collect();
    let mut cfg = opts
        .chain
        .unwrap_or_else(|| ChainConfig::for_size(prob.dec.n(), prob.dec.d(), opts.seed));
    cfg.validate()?;
    let mut restarts = 0;
    let mut iterations = 0;
    let outcome = loop {
        match score_mc(prob, target, start.clone(), cfg, opts, &limit, restarts, iterations)? {
            Scoring::Done(o) => break o,
            Scoring::Diverged { component, value } => {
                if restarts >= opts.max_restarts {
                    return Err(CleError::Divergence {
                        restarts,
                        component,
                        value,
                    });
                }
                restarts += 1;
                iterations += 1;
                cfg = cfg.scaled(2);
                start = ple_theta.clone();
                info!("θ_{component} = {value:.3e} exceeded the restart threshold; restart {restarts}");
            }
        }
    };
    let (covariance, std_errors, floored) = covariance_report(&outcome.g, 1.0 + prior_weight)?;
    let loglik = if let Some(fam) = &prob.exact {
        Some(LogLik {
            value: fam.loglik(&outcome.theta),
            se: None,
            exact: true,
        })
    } else if opts.estimate_loglik {
        Some(loglik_path_sampling(prob, &outcome.theta, &outcome.chain, opts)?)
    } else {
        None
    };
    let mc = outcome
        .mc_se
        .iter()
        .map(|s| s / (1.0 + prior_weight))
        .collect::<Vec<_>>();
    debug_assert_eq!(mc.len(), k);
    Ok(FitReport {
        method,
        labels: h.labels().to_vec(),
        n: prob.dec.n(),
        theta_hat: outcome.theta,
        covariance,
        std_errors,
        mc_std_errors: Some(mc),
        loglik,
        h_observed: prob.observed.clone(),
        iterations: outcome.iterations,
        converged: outcome.converged,
        restarts: outcome.restarts,
        redraws: outcome.redraws,
        tol: opts.tol,
        seed: opts.seed,
        chain: Some(outcome.chain),
        floored_eigenvalues: floored,
    })
}

/// Conditional maximum likelihood estimate of θ.
pub fn fit_cle(
    data: &Dataset,
    h: &CanonicalStatistic,
    opts: &CleOptions,
) -> Result<FitReport, CleError> {
    let prob = Problem::new(data, h, opts)?;
    let target = prob.observed.clone();
    match (&prob.exact, opts.backend) {
        (Some(fam), Backend::Auto | Backend::Exact) => {
            fit_exact(&prob, fam, &target, 0.0, opts, true, Method::ExactEnumeration)
        }
        _ => fit_mc(data, h, &prob, &target, 0.0, opts, true, Method::MonteCarloScoring),
    }
}

/// Maximum a posteriori estimate under the conjugate prior
/// `p(θ|M) ∝ exp(λ₀μ₀ᵀθ − λ₀Ψ(θ))`: the moment equation is solved for the
/// target `(h_*(π) + λ₀μ₀)/(1 + λ₀)`.
pub fn map_estimate(
    data: &Dataset,
    h: &CanonicalStatistic,
    mu0: &[f64],
    lambda0: f64,
    opts: &CleOptions,
) -> Result<FitReport, CleError> {
    if !(lambda0 > 0.0) || !lambda0.is_finite() {
        return Err(CleError::Invalid(format!("λ₀ = {lambda0} must be positive")));
    }
    if mu0.len() != h.dim() {
        return Err(CleError::Invalid(format!(
            "μ₀ has {} components, h has {}",
            mu0.len(),
            h.dim()
        )));
    }
    let prob = Problem::new(data, h, opts)?;
    let target: Vec<f64> = prob
        .observed
        .iter()
        .zip(mu0)
        .map(|(o, m)| (o + lambda0 * m) / (1.0 + lambda0))
        .collect();
    let mut opts = opts.clone();
    if matches!(opts.init, Init::FromPle) {
        // The pseudo-likelihood estimate may not exist exactly when the prior
        // is needed; start from zero instead.
        let ple = fit_ple(data, h, &PleOptions::default())?;
        opts.init = if ple.exists {
            Init::Custom(ple.theta_hat)
        } else {
            Init::Zero
        };
    }
    match (&prob.exact, opts.backend) {
        (Some(fam), Backend::Auto | Backend::Exact) => {
            fit_exact(&prob, fam, &target, lambda0, &opts, false, Method::Map)
        }
        _ => fit_mc(data, h, &prob, &target, lambda0, &opts, false, Method::Map),
    }
}

/// Mean of `h_*` over `draws` uniformly random arrangements, an interior
/// point of the convex support suitable as a prior mean.
pub fn default_prior_mean(
    data: &Dataset,
    h: &CanonicalStatistic,
    draws: usize,
    seed_: u64,
) -> Result<Vec<f64>, CleError> {
    let mut rng = seed::rng(seed_);
    let dec = decompose(data, OrderPolicy::Observational, &mut rng);
    let mut acc = vec![0.0; h.dim()];
    let mut perms = dec.perms().to_vec();
    for _ in 0..draws.max(1) {
        for p in perms.iter_mut() {
            p.shuffle(&mut rng);
        }
        let hs = rank::h_star(&dec.with_perms(perms.clone()).expect("valid"), h)?;
        for (a, b) in acc.iter_mut().zip(&hs) {
            *a += b;
        }
    }
    Ok(acc.iter().map(|a| a / draws.max(1) as f64).collect())
}

// ---------------------------------------------------------------------------
// Tests and model selection

#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    /// `θ_j = 0` for the listed components.
    Indices(Vec<usize>),
    /// `Cθ = 0` for a matrix given by rows.
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Wald statistic `(Cθ̂)ᵀ(C Cov Cᵀ)⁻¹(Cθ̂)` against χ² with `rank(C)` degrees
/// of freedom.
pub fn wald_test(report: &FitReport, constraint: &Constraint) -> Result<WaldResult, CleError> {
    wald(&report.theta_hat, &report.covariance, constraint)
}

/// [`wald_test`] for any estimate with an asymptotic covariance.
pub fn wald(
    theta_hat: &[f64],
    covariance: &[Vec<f64>],
    constraint: &Constraint,
) -> Result<WaldResult, CleError> {
    let k = theta_hat.len();
    if covariance.len() != k || covariance.iter().any(|r| r.len() != k) {
        return Err(CleError::Invalid("covariance must be K × K".into()));
    }
    let c = match constraint {
        Constraint::Indices(idx) => {
            let mut m = DMatrix::zeros(idx.len(), k);
            for (r, &j) in idx.iter().enumerate() {
                if j >= k {
                    return Err(CleError::Invalid(format!("component {j} out of range")));
                }
                m[(r, j)] = 1.0;
            }
            m
        }
        Constraint::Matrix(rows) => {
            if rows.iter().any(|r| r.len() != k) {
                return Err(CleError::Invalid("constraint rows must have K columns".into()));
            }
            linalg::from_rows(rows)
        }
    };
    let theta = DVector::from_column_slice(theta_hat);
    let cov = linalg::from_rows(covariance);
    let ct = &c * theta;
    let v = &c * cov * c.transpose();
    let dof = linalg::psd_rank(&(&c * c.transpose()), 1e-12);
    if linalg::psd_rank(&v, 1e-12) < c.nrows() {
        return Err(CleError::Invalid(
            "restricted covariance is singular".into(),
        ));
    }
    let vinv = v
        .try_inverse()
        .ok_or_else(|| CleError::Invalid("restricted covariance is singular".into()))?;
    let statistic = (ct.transpose() * vinv * &ct)[(0, 0)];
    Ok(WaldResult {
        statistic,
        dof,
        p_value: stats::chi_square_sf(statistic, dof as f64),
    })
}

/// `−2 log f + 2K`, if a log-likelihood is available.
pub fn aic(report: &FitReport) -> Option<f64> {
    report
        .loglik
        .as_ref()
        .map(|l| -2.0 * l.value + 2.0 * report.k() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepwiseResult {
    /// Components kept, as indices into the full statistic.
    pub active: Vec<usize>,
    pub removed: Vec<usize>,
    pub final_fit: Option<FitReport>,
}

/// Backward elimination: repeatedly drops the component with the smallest
/// squared Wald statistic while it is below 2, the AIC break-even point.
pub fn backward_stepwise(
    data: &Dataset,
    h: &CanonicalStatistic,
    opts: &CleOptions,
) -> Result<StepwiseResult, CleError> {
    let mut active: Vec<usize> = (0..h.dim()).collect();
    let mut removed = Vec::new();
    loop {
        let sub = h.restrict(&active);
        let fit = fit_cle(data, &sub, opts)?;
        let (j, z2) = fit
            .theta_hat
            .iter()
            .zip(&fit.std_errors)
            .map(|(t, s)| (t / s).powi(2))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("K >= 1");
        if z2 >= 2.0 || active.len() == 1 {
            return Ok(StepwiseResult {
                active,
                removed,
                final_fit: Some(fit),
            });
        }
        removed.push(active.remove(j));
    }
}
