//! Pseudo-likelihood estimation.
//!
//! For every variable `i` and pair of rows `s < t`, the observed
//! configuration competes against the one with `x_i(s)` and `x_i(t)`
//! exchanged. The pseudo-likelihood is a logistic regression with all
//! responses equal to one and covariates
//! `u = h(x(s)) + h(x(t)) − h(x(s)ˢʷᵃᵖ) − h(x(t)ˢʷᵃᵖ)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg;
use crate::lp::{self, Interiority};
use crate::model::{CanonicalStatistic, Dataset, EvalError};

/// Number of `f64`s of pair statistics kept in memory before switching to
/// recomputation on every pass.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 24;

/// Above this many distinct pair statistics the existence LP is skipped and
/// existence is judged from the Newton iterates.
pub const LP_PAIR_LIMIT: usize = 60_000;

/// Rows per accumulation block. Blocks are reduced in index order so the
/// result does not depend on the thread count.
const BLOCK_ROWS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PleError {
    #[error("pseudo-likelihood needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("h takes {expected} variables, data has {found}")]
    Arity { expected: usize, found: usize },
    #[error("theta has {found} components, h has {expected}")]
    ThetaLength { expected: usize, found: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("pair-statistic Hessian is singular")]
    SingularHessian,
    #[error("{0}")]
    Lp(String),
}

/// One pair statistic `u` for variable `i` and rows `s < t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStatistic {
    pub i: usize,
    pub s: usize,
    pub t: usize,
    pub u: Vec<f64>,
}

/// `u` for exchanging `x_i(s)` and `x_i(t)`, computed from the two rows only.
pub fn pair_statistic(
    h: &CanonicalStatistic,
    row_s: &[f64],
    row_t: &[f64],
    i: usize,
) -> Result<Vec<f64>, EvalError> {
    let k = h.dim();
    let mut buf = PairBuf::new(row_s.len(), k);
    let mut u = vec![0.0; k];
    let hs = h.eval(row_s)?;
    let ht = h.eval(row_t)?;
    buf.fill(h, row_s, row_t, &hs, &ht, i, &mut u)?;
    Ok(u)
}

struct PairBuf {
    a: Vec<f64>,
    b: Vec<f64>,
    ha: Vec<f64>,
    hb: Vec<f64>,
}

impl PairBuf {
    fn new(d: usize, k: usize) -> Self {
        PairBuf {
            a: vec![0.0; d],
            b: vec![0.0; d],
            ha: vec![0.0; k],
            hb: vec![0.0; k],
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn fill(
        &mut self,
        h: &CanonicalStatistic,
        row_s: &[f64],
        row_t: &[f64],
        h_s: &[f64],
        h_t: &[f64],
        i: usize,
        u: &mut [f64],
    ) -> Result<(), EvalError> {
        self.a.copy_from_slice(row_s);
        self.b.copy_from_slice(row_t);
        std::mem::swap(&mut self.a[i], &mut self.b[i]);
        h.eval_into(&self.a, &mut self.ha)?;
        h.eval_into(&self.b, &mut self.hb)?;
        for j in 0..u.len() {
            u[j] = (h_s[j] + h_t[j]) - (self.ha[j] + self.hb[j]);
        }
        Ok(())
    }
}

/// All pair statistics of a dataset, materialized or recomputed on demand.
pub struct PairSet {
    h: CanonicalStatistic,
    n: usize,
    d: usize,
    k: usize,
    rows: Vec<f64>,
    hrows: Vec<f64>,
    /// Per block: concatenated `u` in (s, t, i) order.
    stored: Option<Vec<Vec<f64>>>,
}

impl PairSet {
    pub fn new(data: &Dataset, h: &CanonicalStatistic) -> Result<Self, PleError> {
        Self::with_budget(data, h, DEFAULT_MEMORY_BUDGET)
    }

    pub fn with_budget(
        data: &Dataset,
        h: &CanonicalStatistic,
        budget: usize,
    ) -> Result<Self, PleError> {
        let (n, d, k) = (data.n_rows(), data.n_cols(), h.dim());
        if n < 2 {
            return Err(PleError::TooFewRows(n));
        }
        if h.arity() != d {
            return Err(PleError::Arity {
                expected: h.arity(),
                found: d,
            });
        }
        let rows = data.numeric_rows();
        let mut hrows = vec![0.0; n * k];
        for t in 0..n {
            h.eval_into(&rows[t * d..(t + 1) * d], &mut hrows[t * k..(t + 1) * k])?;
        }
        let mut set = PairSet {
            h: h.clone(),
            n,
            d,
            k,
            rows,
            hrows,
            stored: None,
        };
        if set.pair_count() * k <= budget {
            let blocks: Result<Vec<Vec<f64>>, EvalError> = (0..set.block_count())
                .into_par_iter()
                .map(|b| {
                    let mut v = Vec::new();
                    set.visit_block(b, |_, _, _, u| v.extend_from_slice(u))?;
                    Ok(v)
                })
                .collect();
            set.stored = Some(blocks?);
        }
        Ok(set)
    }

    pub fn pair_count(&self) -> usize {
        self.d * self.n * (self.n - 1) / 2
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_materialized(&self) -> bool {
        self.stored.is_some()
    }

    fn block_count(&self) -> usize {
        self.n.div_ceil(BLOCK_ROWS)
    }

    /// Calls `f(i, s, t, u)` for every pair with `s` in block `b`.
    fn visit_block(
        &self,
        b: usize,
        mut f: impl FnMut(usize, usize, usize, &[f64]),
    ) -> Result<(), EvalError> {
        let (d, k) = (self.d, self.k);
        let lo = b * BLOCK_ROWS;
        let hi = (lo + BLOCK_ROWS).min(self.n);
        if let Some(stored) = &self.stored {
            let mut chunks = stored[b].chunks_exact(k);
            for s in lo..hi {
                for t in s + 1..self.n {
                    for i in 0..d {
                        f(i, s, t, chunks.next().expect("stored pair"));
                    }
                }
            }
            return Ok(());
        }
        let mut buf = PairBuf::new(d, k);
        let mut u = vec![0.0; k];
        for s in lo..hi {
            let row_s = &self.rows[s * d..(s + 1) * d];
            let h_s = &self.hrows[s * k..(s + 1) * k];
            for t in s + 1..self.n {
                let row_t = &self.rows[t * d..(t + 1) * d];
                let h_t = &self.hrows[t * k..(t + 1) * k];
                for i in 0..d {
                    buf.fill(&self.h, row_s, row_t, h_s, h_t, i, &mut u)?;
                    f(i, s, t, &u);
                }
            }
        }
        Ok(())
    }

    /// Maps each block in parallel and returns the per-block results in
    /// block order.
    fn map_blocks<T: Send>(
        &self,
        f: impl Fn(usize) -> Result<T, EvalError> + Sync + Send,
    ) -> Result<Vec<T>, EvalError> {
        (0..self.block_count()).into_par_iter().map(f).collect()
    }

    /// Every pair statistic, in (s, t, i) order.
    pub fn all(&self) -> Result<Vec<PairStatistic>, PleError> {
        let mut out = Vec::with_capacity(self.pair_count());
        for b in 0..self.block_count() {
            self.visit_block(b, |i, s, t, u| {
                out.push(PairStatistic {
                    i,
                    s,
                    t,
                    u: u.to_vec(),
                })
            })?;
        }
        Ok(out)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `1 / (1 + e^{−x})`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Value, gradient and Hessian of the log pseudo-likelihood.
#[derive(Debug, Clone)]
pub struct PseudoLik {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn accumulate(set: &PairSet, theta: &[f64], hessian: bool) -> Result<PseudoLik, PleError> {
    let k = set.k;
    let parts = set.map_blocks(|b| {
        let mut value = 0.0;
        let mut g = vec![0.0; k];
        let mut hm = vec![0.0; if hessian { k * k } else { 0 }];
        set.visit_block(b, |_, _, _, u| {
            let z = dot(theta, u);
            value -= softplus(-z);
            let w = sigmoid(-z);
            for j in 0..k {
                g[j] += u[j] * w;
            }
            if hessian {
                let c = sigmoid(z) * w;
                for a in 0..k {
                    let ca = c * u[a];
                    for bb in a..k {
                        hm[a * k + bb] -= ca * u[bb];
                    }
                }
            }
        })?;
        Ok((value, g, hm))
    })?;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(k);
    let mut h = DMatrix::zeros(k, k);
    for (v, g, hm) in parts {
        value += v;
        for j in 0..k {
            gradient[j] += g[j];
        }
        if hessian {
            for a in 0..k {
                for b in a..k {
                    h[(a, b)] += hm[a * k + b];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    Ok(PseudoLik {
        value,
        gradient,
        hessian: h,
    })
}

/// `Σ_{i, s<t} −log(1 + e^{−θᵀu})` with its gradient and Hessian.
pub fn pseudo_loglik(
    theta: &[f64],
    data: &Dataset,
    h: &CanonicalStatistic,
) -> Result<PseudoLik, PleError> {
    let set = PairSet::new(data, h)?;
    pseudo_loglik_pairs(theta, &set)
}

pub fn pseudo_loglik_pairs(theta: &[f64], set: &PairSet) -> Result<PseudoLik, PleError> {
    if theta.len() != set.k {
        return Err(PleError::ThetaLength {
            expected: set.k,
            found: theta.len(),
        });
    }
    accumulate(set, theta, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PleOptions {
    /// Convergence threshold on `‖∇‖∞ / #pairs`.
    pub tol: f64,
    pub max_iter: usize,
    /// `‖θ‖∞` beyond which the iterates are taken to diverge.
    pub divergence: f64,
    pub memory_budget: usize,
}

impl Default for PleOptions {
    fn default() -> Self {
        PleOptions {
            tol: 1e-8,
            max_iter: 100,
            divergence: 1e3,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PleFit {
    pub theta_hat: Vec<f64>,
    /// The maximizer exists (and is unique).
    pub exists: bool,
    /// The pair statistics do not span ℝᴷ, so θ is not identified.
    pub degenerate: bool,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub value: f64,
    /// Unit direction along which the pseudo-likelihood keeps increasing
    /// when the estimate does not exist.
    pub separation: Option<Vec<f64>>,
    /// Whether existence was certified by the linear program rather than
    /// judged from the iterates.
    pub certified: bool,
}

/// Maximizes the pseudo-likelihood by Newton's method with step halving.
pub fn fit_ple(data: &Dataset, h: &CanonicalStatistic, opts: &PleOptions) -> Result<PleFit, PleError> {
    let set = PairSet::with_budget(data, h, opts.memory_budget)?;
    fit_ple_pairs(&set, opts)
}

pub fn fit_ple_pairs(set: &PairSet, opts: &PleOptions) -> Result<PleFit, PleError> {
    let k = set.k;
    let scale = set.pair_count() as f64;
    let mut theta = DVector::zeros(k);
    let mut cur = accumulate(set, theta.as_slice(), true)?;
    let mut iterations = 0;
    let mut converged = cur.gradient.amax() / scale <= opts.tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let neg_h = -&cur.hessian;
        let Some((inv, _)) = linalg::floored_inverse(&neg_h) else {
            break;
        };
        let dir = inv * &cur.gradient;
        let slope = cur.gradient.dot(&dir);
        let mut step = 1.0;
        let mut next = None;
        for _ in 0..60 {
            let cand = &theta + &dir * step;
            let val = accumulate(set, cand.as_slice(), false)?.value;
            if val >= cur.value + 1e-4 * step * slope {
                next = Some(cand);
                break;
            }
            step *= 0.5;
        }
        let Some(cand) = next else { break };
        let moved = (&cand - &theta).amax();
        theta = cand;
        cur = accumulate(set, theta.as_slice(), true)?;
        converged = cur.gradient.amax() / scale <= opts.tol;
        if theta.amax() > opts.divergence || moved == 0.0 {
            break;
        }
    }
    let gradient_norm = cur.gradient.amax() / scale;

    let distinct_bound = set.pair_count();
    let (exists, degenerate, certified) = if distinct_bound <= LP_PAIR_LIMIT {
        let vectors: Vec<Vec<f64>> = set.all()?.into_iter().map(|p| p.u).collect();
        match lp::interiority(&vectors, k).map_err(PleError::Lp)? {
            Interiority::Interior => (true, false, true),
            Interiority::Boundary => (false, false, true),
            Interiority::Degenerate => (false, true, true),
        }
    } else {
        let rank = linalg::psd_rank(&-&cur.hessian, 1e-12);
        let ok = converged && theta.amax() <= opts.divergence && rank == k;
        (ok, rank < k, false)
    };

    let separation = if !exists && !degenerate {
        let norm = theta.norm();
        (norm > 0.0).then(|| theta.iter().map(|x| x / norm).collect())
    } else {
        None
    };
    Ok(PleFit {
        theta_hat: theta.iter().cloned().collect(),
        exists,
        degenerate,
        converged: converged && exists,
        iterations,
        gradient_norm,
        value: cur.value,
        separation,
        certified,
    })
}

/// Weighting of the pair Hessian in the sandwich's bread matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BreadWeight {
    /// `1 / (1 + e^{θᵀu})²`.
    #[default]
    Displayed,
    /// `e^{θᵀu} / (1 + e^{θᵀu})²`, the second derivative of the logistic
    /// log-likelihood.
    Logistic,
}

/// `(4/n) Ĵ⁻¹ Î Ĵ⁻¹` with
/// `Î = (1/n) Σ_s ḡ_s ḡ_sᵀ`, `ḡ_s = (1/n) Σ_{t≠s} Σ_i u/(1 + e^{θᵀu})` and
/// `Ĵ = 2/(n(n−1)) Σ_{s<t} Σ_i w(θᵀu) u uᵀ`.
pub fn sandwich_variance(
    theta: &[f64],
    data: &Dataset,
    h: &CanonicalStatistic,
    weight: BreadWeight,
) -> Result<DMatrix<f64>, PleError> {
    let set = PairSet::new(data, h)?;
    sandwich_variance_pairs(theta, &set, weight)
}

pub fn sandwich_variance_pairs(
    theta: &[f64],
    set: &PairSet,
    weight: BreadWeight,
) -> Result<DMatrix<f64>, PleError> {
    let (n, k) = (set.n, set.k);
    if theta.len() != k {
        return Err(PleError::ThetaLength {
            expected: k,
            found: theta.len(),
        });
    }
    // Per block: partial row scores for every row touched, and partial bread.
    let parts = set.map_blocks(|b| {
        let mut scores = vec![0.0; n * k];
        let mut bread = vec![0.0; k * k];
        set.visit_block(b, |_, s, t, u| {
            let z = dot(theta, u);
            let w = sigmoid(-z);
            for j in 0..k {
                scores[s * k + j] += u[j] * w;
                scores[t * k + j] += u[j] * w;
            }
            let c = match weight {
                BreadWeight::Displayed => w * w,
                BreadWeight::Logistic => w * sigmoid(z),
            };
            for a in 0..k {
                for bb in 0..k {
                    bread[a * k + bb] += c * u[a] * u[bb];
                }
            }
        })?;
        Ok((scores, bread))
    })?;
    let mut scores = vec![0.0; n * k];
    let mut bread = DMatrix::zeros(k, k);
    for (sc, br) in parts {
        for (a, b) in scores.iter_mut().zip(&sc) {
            *a += b;
        }
        for a in 0..k {
            for b in 0..k {
                bread[(a, b)] += br[a * k + b];
            }
        }
    }
    let nf = n as f64;
    bread *= 2.0 / (nf * (nf - 1.0));
    let mut meat = DMatrix::zeros(k, k);
    for s in 0..n {
        let g = DVector::from_iterator(k, scores[s * k..(s + 1) * k].iter().map(|x| x / nf));
        meat += &g * g.transpose();
    }
    meat /= nf;
    let bread_inv = bread
        .clone()
        .try_inverse()
        .filter(|_| linalg::psd_rank(&bread, 1e-12) == k)
        .ok_or(PleError::SingularHessian)?;
    Ok(linalg::symmetrize(
        &bread_inv * meat * &bread_inv * (4.0 / nf),
    ))
}
