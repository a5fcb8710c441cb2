//! The exchange algorithm: a Metropolis chain on `S_n^d` that proposes a
//! transposition of two ranks within one variable and accepts it with
//! probability `min(1, ρ)`. Only the two affected rows are re-evaluated.

use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{CanonicalStatistic, EvalError};
use crate::rank::RankDecomposition;
use crate::seed;

pub const DEFAULT_RESYNC: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("invalid chain configuration: {0}")]
    Config(String),
    #[error("theta has {found} components, h has {expected}")]
    ThetaLength { expected: usize, found: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite energy {value} at row {row}")]
    NonFinite { row: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    /// Total number of steps `L`.
    pub length: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub resync_period: u64,
    pub seed: u64,
}

impl ChainConfig {
    /// `L = 150 n`, burn-in `L/10` and thinning `max(1, n d / 10)` rounded up
    /// to an odd number. At θ = 0 every proposal is accepted and each move
    /// flips the parity of the permutation, so an even thinning interval would
    /// only ever visit half the state space.
    pub fn for_size(n: usize, d: usize, seed: u64) -> Self {
        let length = (150 * n as u64).max(10);
        Self::with_length(length, n, d, seed)
    }

    pub fn with_length(length: u64, n: usize, d: usize, seed: u64) -> Self {
        let thin = ((n * d) as u64 / 10).max(1) | 1;
        ChainConfig {
            length,
            burn_in: length / 10,
            thin,
            resync_period: DEFAULT_RESYNC,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ChainError> {
        if self.length <= self.burn_in {
            return Err(ChainError::Config(format!(
                "length {} must exceed burn_in {}",
                self.length, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(ChainError::Config("thin must be >= 1".into()));
        }
        if self.resync_period == 0 {
            return Err(ChainError::Config("resync_period must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of retained samples, `(L − burn_in) / thin`.
    pub fn kept(&self) -> u64 {
        (self.length - self.burn_in) / self.thin
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scaled(mut self, factor: u64) -> Self {
        self.length *= factor;
        self.burn_in *= factor;
        self
    }
}

/// Current permutations with cached rows, per-row statistics and energies
/// `H_t = θᵀh(row_t)`.
#[derive(Clone)]
pub struct ChainState {
    h: CanonicalStatistic,
    theta: Vec<f64>,
    n: usize,
    d: usize,
    k: usize,
    sorted: Vec<Vec<f64>>,
    perms: Vec<Vec<usize>>,
    rows: Vec<f64>,
    stats: Vec<f64>,
    energy: Vec<f64>,
    h_star: Vec<f64>,
    steps: u64,
    accepted: u64,
    since_resync: u64,
    resync_period: u64,
    proposal: Proposal,
}

#[derive(Clone, Default)]
struct Proposal {
    key: Option<(usize, usize, usize)>,
    row_s: Vec<f64>,
    row_t: Vec<f64>,
    h_s: Vec<f64>,
    h_t: Vec<f64>,
    e_s: f64,
    e_t: f64,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ChainState {
    /// Starts the chain at the decomposition's own permutations.
    pub fn new(
        dec: &RankDecomposition,
        h: &CanonicalStatistic,
        theta: &[f64],
    ) -> Result<Self, ChainError> {
        if theta.len() != h.dim() {
            return Err(ChainError::ThetaLength {
                expected: h.dim(),
                found: theta.len(),
            });
        }
        let (n, d, k) = (dec.n(), dec.d(), h.dim());
        let mut state = ChainState {
            h: h.clone(),
            theta: theta.to_vec(),
            n,
            d,
            k,
            sorted: dec.sorted_numeric(),
            perms: dec.perms().to_vec(),
            rows: vec![0.0; n * d],
            stats: vec![0.0; n * k],
            energy: vec![0.0; n],
            h_star: vec![0.0; k],
            steps: 0,
            accepted: 0,
            since_resync: 0,
            resync_period: DEFAULT_RESYNC,
            proposal: Proposal {
                row_s: vec![0.0; d],
                row_t: vec![0.0; d],
                h_s: vec![0.0; k],
                h_t: vec![0.0; k],
                ..Default::default()
            },
        };
        state.resync()?;
        Ok(state)
    }

    pub fn with_resync_period(mut self, r: u64) -> Self {
        self.resync_period = r.max(1);
        self
    }

    /// Recomputes every cache from the permutations.
    pub fn resync(&mut self) -> Result<(), ChainError> {
        let (d, k) = (self.d, self.k);
        self.h_star.iter_mut().for_each(|x| *x = 0.0);
        for t in 0..self.n {
            for i in 0..d {
                self.rows[t * d + i] = self.sorted[i][self.perms[i][t]];
            }
            self.h
                .eval_into(&self.rows[t * d..(t + 1) * d], &mut self.stats[t * k..(t + 1) * k])?;
            let e = dot(&self.theta, &self.stats[t * k..(t + 1) * k]);
            if !e.is_finite() {
                return Err(ChainError::NonFinite { row: t, value: e });
            }
            self.energy[t] = e;
            for j in 0..k {
                self.h_star[j] += self.stats[t * k + j];
            }
        }
        self.since_resync = 0;
        self.proposal.key = None;
        Ok(())
    }

    /// Changes θ, recomputing the energies (statistics are unchanged).
    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), ChainError> {
        if theta.len() != self.k {
            return Err(ChainError::ThetaLength {
                expected: self.k,
                found: theta.len(),
            });
        }
        self.theta.copy_from_slice(theta);
        for t in 0..self.n {
            let e = dot(&self.theta, &self.stats[t * self.k..(t + 1) * self.k]);
            if !e.is_finite() {
                return Err(ChainError::NonFinite { row: t, value: e });
            }
            self.energy[t] = e;
        }
        self.proposal.key = None;
        Ok(())
    }

    /// `ρ = exp(H_s(π∘τ) + H_t(π∘τ) − H_s(π) − H_t(π))` for swapping the
    /// ranks of rows `s` and `t` in variable `i` (0-based, `s ≠ t`).
    pub fn acceptance_ratio(&mut self, i: usize, s: usize, t: usize) -> Result<f64, ChainError> {
        let d = self.d;
        let p = &mut self.proposal;
        p.row_s.copy_from_slice(&self.rows[s * d..(s + 1) * d]);
        p.row_t.copy_from_slice(&self.rows[t * d..(t + 1) * d]);
        std::mem::swap(&mut p.row_s[i], &mut p.row_t[i]);
        self.h.eval_into(&p.row_s, &mut p.h_s)?;
        self.h.eval_into(&p.row_t, &mut p.h_t)?;
        p.e_s = dot(&self.theta, &p.h_s);
        p.e_t = dot(&self.theta, &p.h_t);
        let delta = (p.e_s + p.e_t) - (self.energy[s] + self.energy[t]);
        if !delta.is_finite() {
            return Err(ChainError::NonFinite {
                row: s,
                value: delta,
            });
        }
        p.key = Some((i, s, t));
        Ok(delta.exp())
    }

    /// One Metropolis step for a given proposal and uniform draw `u`.
    /// Returns whether the move was accepted.
    pub fn step_with(&mut self, i: usize, s: usize, t: usize, u: f64) -> Result<bool, ChainError> {
        let rho = self.acceptance_ratio(i, s, t)?;
        let accept = u <= rho.min(1.0);
        if accept {
            self.apply(i, s, t);
        }
        self.steps += 1;
        self.since_resync += 1;
        if self.since_resync >= self.resync_period {
            self.resync()?;
        }
        Ok(accept)
    }

    fn apply(&mut self, i: usize, s: usize, t: usize) {
        let (d, k) = (self.d, self.k);
        let p = &self.proposal;
        debug_assert_eq!(p.key, Some((i, s, t)));
        self.perms[i].swap(s, t);
        self.rows[s * d + i] = p.row_s[i];
        self.rows[t * d + i] = p.row_t[i];
        for j in 0..k {
            let old = self.stats[s * k + j] + self.stats[t * k + j];
            self.h_star[j] += (p.h_s[j] + p.h_t[j]) - old;
        }
        self.stats[s * k..(s + 1) * k].copy_from_slice(&p.h_s);
        self.stats[t * k..(t + 1) * k].copy_from_slice(&p.h_t);
        self.energy[s] = p.e_s;
        self.energy[t] = p.e_t;
        self.accepted += 1;
    }

    /// Draws a variable and an unordered pair of rows uniformly, then takes
    /// a Metropolis step.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool, ChainError> {
        if self.n < 2 {
            self.steps += 1;
            return Ok(false);
        }
        let i = rng.random_range(0..self.d);
        let a = rng.random_range(0..self.n);
        let mut b = rng.random_range(0..self.n - 1);
        if b >= a {
            b += 1;
        }
        let (s, t) = if a < b { (a, b) } else { (b, a) };
        let u: f64 = rng.random();
        self.step_with(i, s, t, u)
    }

    pub fn h_star(&self) -> &[f64] {
        &self.h_star
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn energies(&self) -> &[f64] {
        &self.energy
    }

    /// Current quantified row `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t * self.d..(t + 1) * self.d]
    }

    /// The current multiset of values in column `i`, in row order.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|t| self.rows[t * self.d + i]).collect()
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }
}

/// Retained samples of one or more chains.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChainOutput {
    pub k: usize,
    /// `h_*(π)` of each retained state.
    pub samples: Vec<Vec<f64>>,
    /// Step index (within its chain) of each retained state.
    pub steps: Vec<u64>,
    /// Permutations of each retained state, when requested.
    pub snapshots: Option<Vec<Vec<Vec<usize>>>>,
    pub total_steps: u64,
    pub accepted: u64,
}

impl ChainOutput {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.total_steps.max(1) as f64
    }

    /// Appends another chain's samples.
    pub fn merge(&mut self, other: ChainOutput) {
        self.k = other.k;
        self.samples.extend(other.samples);
        self.steps.extend(other.steps);
        match (&mut self.snapshots, other.snapshots) {
            (Some(a), Some(b)) => a.extend(b),
            (a @ None, Some(b)) if self.total_steps == 0 => *a = Some(b),
            _ => {}
        }
        self.total_steps += other.total_steps;
        self.accepted += other.accepted;
    }
}

/// Runs the chain from `state`, calling `keep` on every retained state.
pub fn drive<R: Rng + ?Sized>(
    state: &mut ChainState,
    cfg: &ChainConfig,
    rng: &mut R,
    mut keep: impl FnMut(&ChainState, u64),
) -> Result<(), ChainError> {
    cfg.validate()?;
    for _ in 0..cfg.burn_in {
        state.step(rng)?;
    }
    for j in 1..=(cfg.length - cfg.burn_in) {
        state.step(rng)?;
        if j % cfg.thin == 0 {
            keep(state, cfg.burn_in + j);
        }
    }
    Ok(())
}

fn run_one(
    dec: &RankDecomposition,
    theta: &[f64],
    h: &CanonicalStatistic,
    cfg: &ChainConfig,
    snapshots: bool,
) -> Result<ChainOutput, ChainError> {
    cfg.validate()?;
    let mut state = ChainState::new(dec, h, theta)?.with_resync_period(cfg.resync_period);
    let mut rng = seed::rng(cfg.seed);
    let kept = cfg.kept() as usize;
    let mut out = ChainOutput {
        k: h.dim(),
        samples: Vec::with_capacity(kept),
        steps: Vec::with_capacity(kept),
        snapshots: snapshots.then(Vec::new),
        ..Default::default()
    };
    drive(&mut state, cfg, &mut rng, |s, step| {
        out.samples.push(s.h_star().to_vec());
        out.steps.push(step);
        if let Some(snaps) = out.snapshots.as_mut() {
            snaps.push(s.perms().to_vec());
        }
    })?;
    out.total_steps = state.step_count();
    out.accepted = state.accepted();
    Ok(out)
}

/// Runs one chain from the observed permutations and returns the retained
/// `h_*` samples.
pub fn run_chain(
    dec: &RankDecomposition,
    theta: &[f64],
    h: &CanonicalStatistic,
    cfg: &ChainConfig,
) -> Result<ChainOutput, ChainError> {
    run_one(dec, theta, h, cfg, false)
}

/// Like [`run_chain`] but also records the permutations of every retained
/// state.
pub fn run_chain_with_snapshots(
    dec: &RankDecomposition,
    theta: &[f64],
    h: &CanonicalStatistic,
    cfg: &ChainConfig,
) -> Result<ChainOutput, ChainError> {
    run_one(dec, theta, h, cfg, true)
}

/// Runs `chains` independent chains in parallel; chain `c` uses seed
/// `seed ⊕ splitmix(c)`. Samples are concatenated in chain order, so the
/// result does not depend on the number of worker threads.
pub fn run_chains(
    dec: &RankDecomposition,
    theta: &[f64],
    h: &CanonicalStatistic,
    cfg: &ChainConfig,
    chains: usize,
) -> Result<ChainOutput, ChainError> {
    if chains <= 1 {
        return run_chain(dec, theta, h, cfg);
    }
    let outs: Vec<Result<ChainOutput, ChainError>> = (0..chains)
        .into_par_iter()
        .map(|c| run_chain(dec, theta, h, &cfg.with_seed(seed::derive(cfg.seed, c as u64))))
        .collect();
    let mut merged = ChainOutput::default();
    for o in outs {
        merged.merge(o?);
    }
    Ok(merged)
}

/// Writes one line per retained sample: the step index followed by the
/// components of `h_*`, separated by tabs.
pub fn write_trace<W: Write>(out: &mut W, chain: &ChainOutput) -> io::Result<()> {
    writeln!(
        out,
        "step\t{}",
        (1..=chain.k)
            .map(|j| format!("h{j}"))
            .collect::<Vec<_>>()
            .join("\t")
    )?;
    for (step, s) in chain.steps.iter().zip(&chain.samples) {
        write!(out, "{step}")?;
        for v in s {
            write!(out, "\t{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
