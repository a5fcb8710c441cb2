//! Simulation studies: repeated data generation at a known θ, estimation by
//! CLE, PLE and (for Gaussian data) the closed-form MLE, and summary metrics
//! with Monte Carlo standard errors.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cle::{fit_cle, Backend, CleOptions};
use crate::linalg;
use crate::model::{ColumnKind, Dataset, MarginalSpec, ModelSpec};
use crate::oracle::{self, ar1_covariance, exchangeable_covariance, precision_offdiagonals};
use crate::ple::{fit_ple, sandwich_variance, BreadWeight, PleOptions};
use crate::seed;
use crate::stats;
use crate::statlang::{self, StatlangError};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Names accepted by [`named_scenarios`].
pub const SCENARIO_NAMES: [&str; 5] = [
    "gaussian_table3",
    "gaussian_table4",
    "threedim_table5",
    "threedim_table6",
    "mixed_table7",
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Statlang(#[from] StatlangError),
    #[error("data generation failed in rep {rep}: {message}")]
    Generation { rep: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Cle,
    Ple,
    Mle,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Cle => "CLE",
            Estimator::Ple => "PLE",
            Estimator::Mle => "MLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Generator {
    /// Exact zero-mean multivariate normal rows.
    Gaussian { covariance: Vec<Vec<f64>> },
    /// A population of `population` i.i.d. rows permuted by `length`
    /// exchange steps (default `150·population`), subsampled to `n`.
    Population {
        marginals: Vec<MarginalSpec>,
        population: usize,
        #[serde(default)]
        length: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub n: usize,
    pub reps: usize,
    pub theta: Vec<f64>,
    /// Statistic components in the expression language.
    pub h: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub generator: Generator,
    pub estimators: Vec<Estimator>,
    /// CLE scoring tolerance.
    pub tol: f64,
    /// Initial CLE chain length; `None` uses `150·n`.
    #[serde(default)]
    pub chain_length: Option<u64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n < 2 {
            return bad(format!("n = {} is too small", self.n));
        }
        if self.estimators.is_empty() {
            return bad("no estimators".into());
        }
        if self.h.len() != self.theta.len() {
            return bad(format!("{} statistics for {} parameters", self.h.len(), self.theta.len()));
        }
        match &self.generator {
            Generator::Gaussian { covariance } => {
                if covariance.len() != self.kinds.len() {
                    return bad("covariance size differs from the number of variables".into());
                }
            }
            Generator::Population {
                marginals,
                population,
                ..
            } => {
                if marginals.len() != self.kinds.len() {
                    return bad("one marginal per variable is required".into());
                }
                if *population < self.n {
                    return bad(format!("population {population} smaller than n = {}", self.n));
                }
                if self.estimators.contains(&Estimator::Mle) {
                    return bad("the Gaussian MLE needs a Gaussian generator".into());
                }
            }
        }
        statlang::build(&self.h, &self.kinds)?;
        Ok(())
    }
}

fn pairwise_product_exprs(d: usize) -> Vec<String> {
    let mut out = Vec::new();
    for i in 1..=d {
        for j in i + 1..=d {
            out.push(format!("x{i}*x{j}"));
        }
    }
    out
}

fn gaussian_scenario(name: &str, cov: nalgebra::DMatrix<f64>, reps: usize) -> Scenario {
    let d = cov.nrows();
    Scenario {
        name: name.into(),
        n: 50,
        reps,
        theta: precision_offdiagonals(&cov).expect("positive definite"),
        h: pairwise_product_exprs(d),
        kinds: vec![ColumnKind::Continuous; d],
        generator: Generator::Gaussian {
            covariance: linalg::to_rows(&cov),
        },
        estimators: vec![Estimator::Cle, Estimator::Mle, Estimator::Ple],
        tol: 1e-2,
        chain_length: None,
    }
}

fn threedim_scenario(name: &str, a: f64, reps: usize) -> Scenario {
    Scenario {
        name: name.into(),
        n: 100,
        reps,
        theta: vec![a, 0.0, 0.0, -a],
        h: vec!["x1*x2".into(), "x1*x3".into(), "x2*x3".into(), "x1*x2*x3".into()],
        kinds: vec![ColumnKind::Continuous; 3],
        generator: Generator::Population {
            marginals: vec![MarginalSpec::normal(0.0, 1.0); 3],
            population: 1000,
            length: None,
        },
        estimators: vec![Estimator::Cle, Estimator::Ple],
        tol: 1e-2,
        chain_length: None,
    }
}

/// Mixed Beta(10,10) × Poisson(3) model with `h = x1/(1+x2)`.
pub fn mixed_scenario(theta: f64, reps: usize) -> Scenario {
    Scenario {
        name: "mixed_table7".into(),
        n: 50,
        reps,
        theta: vec![theta],
        h: vec!["x1/(1+x2)".into()],
        kinds: vec![ColumnKind::Continuous, ColumnKind::Count],
        generator: Generator::Population {
            marginals: vec![MarginalSpec::beta(10.0, 10.0), MarginalSpec::poisson(3.0)],
            population: 1000,
            length: None,
        },
        estimators: vec![Estimator::Cle, Estimator::Ple],
        tol: 1e-5,
        chain_length: None,
    }
}

/// Built-in scenarios with their default replication counts.
pub fn named_scenarios(name: &str) -> Result<Vec<Scenario>, ExperimentError> {
    Ok(match name {
        "gaussian_table3" => vec![gaussian_scenario(name, ar1_covariance(4, 0.5), 200)],
        "gaussian_table4" => vec![gaussian_scenario(name, exchangeable_covariance(4, 0.5), 200)],
        "threedim_table5" => vec![threedim_scenario(name, 1.0, 200)],
        "threedim_table6" => [0.0, 1.0, 2.0]
            .iter()
            .map(|&a| threedim_scenario(&format!("threedim_table6_a{a}"), a, 200))
            .collect(),
        "mixed_table7" => vec![mixed_scenario(0.0, 100)],
        _ => return Err(ExperimentError::UnknownScenario(name.into())),
    })
}

/// One estimator's outcome in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub theta: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Outcome {
    Ok(Estimate),
    /// The estimator failed or did not exist; the message is kept.
    Skipped(String),
    NotConverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub outcomes: Vec<Outcome>,
}

/// A metric with its Monte Carlo standard error; `None` when undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub se: Option<f64>,
}

impl Metric {
    const NA: Metric = Metric {
        value: None,
        se: None,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentMetrics {
    pub label: String,
    pub truth: f64,
    pub rmse: Metric,
    pub bias: Metric,
    pub sd: Metric,
    pub coverage: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub used: usize,
    pub skipped: usize,
    pub not_converged: usize,
    pub components: Vec<ComponentMetrics>,
    /// `sqrt(mean ‖θ̂ − θ‖²)`.
    pub norm_rms: Metric,
    pub median_seconds: Option<f64>,
}

impl EstimatorSummary {
    pub fn rmse(&self) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.rmse.value.unwrap_or(f64::NAN))
            .collect()
    }

    pub fn coverage(&self) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.coverage.value.unwrap_or(f64::NAN))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub seed: u64,
    pub reps: usize,
    pub n: usize,
    pub theta: Vec<f64>,
    pub estimators: Vec<EstimatorSummary>,
}

impl ScenarioResult {
    pub fn summary(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e)
    }

    /// Drops the wall-clock fields so that reruns compare equal.
    pub fn without_timing(mut self) -> Self {
        for s in &mut self.estimators {
            s.median_seconds = None;
        }
        self
    }

    /// Fixed-width text table, one row per estimator and metric.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {}  n={}  reps={}  seed={}",
            self.scenario, self.n, self.reps, self.seed
        );
        let fmt = |m: &Metric| match (m.value, m.se) {
            (Some(v), Some(s)) => format!("{v:.3} ({s:.3})"),
            (Some(v), None) => format!("{v:.3}"),
            _ => "NA".to_string(),
        };
        for s in &self.estimators {
            let _ = writeln!(
                out,
                "{}  used={} skipped={} not_converged={}  norm_rms={}{}",
                s.estimator.name(),
                s.used,
                s.skipped,
                s.not_converged,
                fmt(&s.norm_rms),
                s.median_seconds
                    .map(|t| format!("  median_time={t:.3}s"))
                    .unwrap_or_default()
            );
            for (name, pick) in [
                ("rmse", 0usize),
                ("bias", 1),
                ("sd", 2),
                ("coverage", 3),
            ] {
                let cells: Vec<String> = s
                    .components
                    .iter()
                    .map(|c| {
                        fmt(match pick {
                            0 => &c.rmse,
                            1 => &c.bias,
                            2 => &c.sd,
                            _ => &c.coverage,
                        })
                    })
                    .collect();
                let _ = writeln!(out, "  {name:<9} {}", cells.join("  "));
            }
        }
        out
    }
}

fn generate(s: &Scenario, spec: &ModelSpec, rep: usize, seed_: u64) -> Result<Dataset, ExperimentError> {
    let mut rng = seed::rng(seed::derive2(seed_, rep as u64, 0));
    let err = |message: String| ExperimentError::Generation { rep, message };
    match &s.generator {
        Generator::Gaussian { covariance } => {
            let cov = linalg::from_rows(covariance);
            let rows = oracle::sample_normal(&cov, s.n, &mut rng).map_err(|e| err(e.to_string()))?;
            Dataset::from_rows(&rows).map_err(|e| err(e.to_string()))
        }
        Generator::Population {
            population, length, ..
        } => oracle::sample_population(spec, s.n, *population, *length, &mut rng)
            .map_err(|e| err(e.to_string())),
    }
}

fn estimate(
    s: &Scenario,
    spec: &ModelSpec,
    data: &Dataset,
    e: Estimator,
    rep_seed: u64,
) -> Outcome {
    let start = Instant::now();
    let result = match e {
        Estimator::Cle => {
            let opts = CleOptions {
                backend: Backend::MonteCarlo,
                tol: s.tol,
                seed: rep_seed,
                chain: s
                    .chain_length
                    .map(|l| crate::exchange::ChainConfig::with_length(l, s.n, s.kinds.len(), rep_seed)),
                ..CleOptions::default()
            };
            match fit_cle(data, &spec.h, &opts) {
                Ok(r) if r.converged => Ok((r.theta_hat, Some(r.std_errors))),
                Ok(_) => return Outcome::NotConverged,
                Err(err) => Err(err.to_string()),
            }
        }
        Estimator::Ple => match fit_ple(data, &spec.h, &PleOptions::default()) {
            Ok(f) if f.exists && f.converged => {
                let se = sandwich_variance(&f.theta_hat, data, &spec.h, BreadWeight::default())
                    .ok()
                    .map(|v| (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect());
                Ok((f.theta_hat, se))
            }
            Ok(f) if !f.exists => Err("pseudo-likelihood estimate does not exist".into()),
            Ok(_) => return Outcome::NotConverged,
            Err(err) => Err(err.to_string()),
        },
        Estimator::Mle => oracle::gaussian_mle(data)
            .map(|t| (t, None))
            .map_err(|e| e.to_string()),
    };
    match result {
        Ok((theta, std_errors)) => Outcome::Ok(Estimate {
            theta,
            std_errors,
            seconds: start.elapsed().as_secs_f64(),
        }),
        Err(m) => Outcome::Skipped(m),
    }
}

/// Runs every replication; reps execute in parallel with seeds derived
/// from `(seed, rep)`, so the records do not depend on the thread count.
pub fn run_records(s: &Scenario, seed_: u64) -> Result<Vec<RepRecord>, ExperimentError> {
    s.validate()?;
    let h = statlang::build(&s.h, &s.kinds)?;
    let marginals = match &s.generator {
        Generator::Population { marginals, .. } => marginals.clone(),
        Generator::Gaussian { covariance } => covariance
            .iter()
            .enumerate()
            .map(|(i, r)| MarginalSpec::normal(0.0, r[i]))
            .collect(),
    };
    let spec = ModelSpec {
        h,
        kinds: s.kinds.clone(),
        marginals,
        theta: s.theta.clone(),
    };
    (0..s.reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate(s, &spec, rep, seed_)?;
            let outcomes = s
                .estimators
                .iter()
                .enumerate()
                .map(|(k, &e)| estimate(s, &spec, &data, e, seed::derive2(seed_, rep as u64, k as u64 + 1)))
                .collect();
            Ok(RepRecord { rep, outcomes })
        })
        .collect()
}

fn metric(value: f64, se: f64) -> Metric {
    Metric {
        value: Some(value),
        se: if se.is_finite() { Some(se) } else { None },
    }
}

/// Root mean square with a delta-method standard error.
fn rms(x: &[f64]) -> Metric {
    let r = x.len() as f64;
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let m = sq.iter().sum::<f64>() / r;
    let value = m.sqrt();
    if x.len() < 2 {
        return Metric {
            value: Some(value),
            se: None,
        };
    }
    let var = sq.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (r - 1.0);
    metric(value, (var / r).sqrt() / (2.0 * value))
}

pub fn summarize(s: &Scenario, seed_: u64, records: &[RepRecord]) -> ScenarioResult {
    let k = s.theta.len();
    let estimators = s
        .estimators
        .iter()
        .enumerate()
        .map(|(slot, &e)| {
            let mut used: Vec<&Estimate> = Vec::new();
            let (mut skipped, mut not_converged) = (0, 0);
            for r in records {
                match &r.outcomes[slot] {
                    Outcome::Ok(est) => used.push(est),
                    Outcome::Skipped(_) => skipped += 1,
                    Outcome::NotConverged => not_converged += 1,
                }
            }
            let m = used.len() as f64;
            let components = (0..k)
                .map(|j| {
                    let truth = s.theta[j];
                    let errs: Vec<f64> = used.iter().map(|u| u.theta[j] - truth).collect();
                    if errs.is_empty() {
                        return ComponentMetrics {
                            label: s.h[j].clone(),
                            truth,
                            rmse: Metric::NA,
                            bias: Metric::NA,
                            sd: Metric::NA,
                            coverage: Metric::NA,
                        };
                    }
                    let bias = errs.iter().sum::<f64>() / m;
                    let sd = if errs.len() > 1 {
                        (errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
                    } else {
                        f64::NAN
                    };
                    let bias_m = metric(bias, sd / m.sqrt());
                    let sd_m = if errs.len() > 1 {
                        metric(sd, sd / (2.0 * (m - 1.0)).sqrt())
                    } else {
                        Metric::NA
                    };
                    let coverage = if used.iter().all(|u| u.std_errors.is_some()) {
                        let hits = used
                            .iter()
                            .filter(|u| {
                                let se = u.std_errors.as_ref().expect("checked")[j];
                                (u.theta[j] - truth).abs() <= Z95 * se
                            })
                            .count() as f64;
                        let c = hits / m;
                        metric(c, (c * (1.0 - c) / m).sqrt())
                    } else {
                        Metric::NA
                    };
                    ComponentMetrics {
                        label: s.h[j].clone(),
                        truth,
                        rmse: rms(&errs),
                        bias: bias_m,
                        sd: sd_m,
                        coverage,
                    }
                })
                .collect();
            let norms: Vec<f64> = used
                .iter()
                .map(|u| {
                    u.theta
                        .iter()
                        .zip(&s.theta)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            let times: Vec<f64> = used.iter().map(|u| u.seconds).collect();
            EstimatorSummary {
                estimator: e,
                used: used.len(),
                skipped,
                not_converged,
                components,
                norm_rms: if norms.is_empty() { Metric::NA } else { rms(&norms) },
                median_seconds: if times.is_empty() {
                    None
                } else {
                    Some(stats::median(&times))
                },
            }
        })
        .collect();
    ScenarioResult {
        scenario: s.name.clone(),
        seed: seed_,
        reps: s.reps,
        n: s.n,
        theta: s.theta.clone(),
        estimators,
    }
}

/// Runs a scenario and summarises it.
pub fn run_scenario(s: &Scenario, seed_: u64) -> Result<ScenarioResult, ExperimentError> {
    let records = run_records(s, seed_)?;
    Ok(summarize(s, seed_, &records))
}
