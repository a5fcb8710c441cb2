//! The four commands. Each returns the report bytes and a text summary; the
//! caller decides where they go.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use mindep::cle::{
    self, arrangement_count, conditional_loglik_exact, Backend, Constraint, LogLik, WaldResult,
    DEFAULT_ENUMERATION_BUDGET,
};
use mindep::experiments::{self, ExperimentError, Scenario, ScenarioResult};
use mindep::finite::{self, expectation_range, FiniteError, IpfOptions, Table};
use mindep::ple::{sandwich_variance, BreadWeight, PleError};
use mindep::statlang;
use mindep::{
    decompose, fit_cle, fit_ple, oracle, seed, validate_model, CanonicalStatistic, ChainConfig,
    CleError, CleOptions, Column, ColumnKind, Dataset, MarginalSpec, ModelSpec, OrderPolicy,
    ParametricFamily, PleOptions,
};
use serde::Serialize;

use crate::config::{FitMethod, RunConfig, SCHEMA_VERSION};
use crate::{csvio, CliError, Outcome, EXIT_NON_CONVERGENCE, EXIT_OK, VERSION};

fn timestamp(stamp: bool) -> Option<u64> {
    stamp.then(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn build_h(sources: &[String], kinds: &[ColumnKind]) -> Result<CanonicalStatistic, CliError> {
    if sources.is_empty() {
        return Err(CliError::Config("no statistics given in `h`".into()));
    }
    statlang::build(sources, kinds).map_err(|e| CliError::Config(format!("h: {e}")))
}

fn cle_error(e: CleError) -> CliError {
    let msg = e.to_string();
    match e {
        CleError::NonExistence { .. } | CleError::Degenerate => CliError::NonExistence(msg),
        CleError::Divergence { .. } | CleError::Chain(_) | CleError::Lp(_) => {
            CliError::NonConvergence(msg)
        }
        CleError::Budget { .. } | CleError::TooFewRows(_) | CleError::Invalid(_) => {
            CliError::Config(msg)
        }
        CleError::Ple(p) => ple_error(p),
        CleError::Eval(_) => CliError::Data(msg),
    }
}

fn ple_error(e: PleError) -> CliError {
    let msg = e.to_string();
    match e {
        PleError::SingularHessian | PleError::Lp(_) => CliError::NonConvergence(msg),
        PleError::Eval(_) => CliError::Data(msg),
        _ => CliError::Config(msg),
    }
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Clone, Serialize)]
pub struct ComponentTest {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: &'static str,
    pub schema_version: u32,
    pub seed: u64,
    pub tol: f64,
    /// Chain length of the final Monte Carlo draw, if any.
    pub chain_length: Option<u64>,
    pub data: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PleDetails {
    pub certified: bool,
    pub gradient_norm: f64,
    pub pseudo_loglik: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutput {
    pub command: &'static str,
    pub method: FitMethod,
    /// The algorithm that produced the estimate.
    pub estimator: String,
    pub labels: Vec<String>,
    pub columns: Vec<String>,
    pub n: usize,
    pub theta_hat: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub tests: Vec<ComponentTest>,
    /// Joint test of `θ = 0`.
    pub joint_test: Option<WaldResult>,
    pub loglik: Option<LogLik>,
    pub aic: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub provenance: Provenance,
    pub cle: Option<cle::FitReport>,
    pub ple: Option<PleDetails>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

fn component_tests(
    labels: &[String],
    theta: &[f64],
    cov: &[Vec<f64>],
) -> (Vec<ComponentTest>, Option<WaldResult>) {
    let tests = labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let se = cov[j][j].max(0.0).sqrt();
            let p = cle::wald(theta, cov, &Constraint::Indices(vec![j]))
                .map_or(f64::NAN, |w| w.p_value);
            ComponentTest {
                label: label.clone(),
                estimate: theta[j],
                std_error: se,
                z: theta[j] / se,
                p_value: p,
            }
        })
        .collect();
    let joint = cle::wald(theta, cov, &Constraint::Indices((0..theta.len()).collect())).ok();
    (tests, joint)
}

fn read_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    cfg.require_columns()?;
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("no `data` file given".into()))?;
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    csvio::read_dataset(file, &cfg.columns)
}

pub fn fit(cfg: &RunConfig, stamp: bool) -> Result<Outcome, CliError> {
    let seed_ = cfg.require_seed()?;
    let data = read_data(cfg)?;
    let h = build_h(&cfg.h, &cfg.kinds())?;
    let (n, d) = (data.n_rows(), data.n_cols());
    let labels = h.labels().to_vec();
    let provenance = |chain_length| Provenance {
        version: VERSION,
        schema_version: SCHEMA_VERSION,
        seed: seed_,
        tol: cfg.fit.tol,
        chain_length,
        data: cfg
            .data
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|f| f.to_string_lossy().into_owned()),
    };
    let columns = cfg.columns.iter().map(|c| c.name.clone()).collect();
    let out = match cfg.method {
        FitMethod::Cle | FitMethod::Exact => {
            let opts = CleOptions {
                backend: if cfg.method == FitMethod::Exact {
                    Backend::Exact
                } else {
                    Backend::Auto
                },
                tol: cfg.fit.tol,
                max_iter: cfg.fit.max_iter,
                chain: cfg
                    .fit
                    .chain_length
                    .map(|l| ChainConfig::with_length(l, n, d, seed_)),
                seed: seed_,
                estimate_loglik: cfg.fit.loglik,
                ..Default::default()
            };
            let report = fit_cle(&data, &h, &opts).map_err(cle_error)?;
            let (tests, joint) = component_tests(&labels, &report.theta_hat, &report.covariance);
            FitOutput {
                command: "fit",
                method: cfg.method,
                estimator: format!("{:?}", report.method),
                labels,
                columns,
                n,
                theta_hat: report.theta_hat.clone(),
                std_errors: report.std_errors.clone(),
                covariance: report.covariance.clone(),
                tests,
                joint_test: joint,
                loglik: report.loglik.clone(),
                aic: cle::aic(&report),
                converged: report.converged,
                iterations: report.iterations,
                provenance: provenance(report.chain.as_ref().map(|c| c.length)),
                cle: Some(report),
                ple: None,
                timestamp: timestamp(stamp),
            }
        }
        FitMethod::Ple => {
            let fit = fit_ple(&data, &h, &PleOptions::default()).map_err(ple_error)?;
            if fit.degenerate {
                return Err(CliError::NonExistence(
                    "the pair statistics do not span the parameter space".into(),
                ));
            }
            if !fit.exists {
                return Err(CliError::NonExistence(format!(
                    "the pseudo-likelihood increases without bound along {:?}",
                    fit.separation.unwrap_or_default()
                )));
            }
            let cov = sandwich_variance(&fit.theta_hat, &data, &h, BreadWeight::default())
                .map_err(ple_error)?;
            let covariance: Vec<Vec<f64>> = cov
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect();
            let loglik = match arrangement_count(n, d) {
                Some(c) if c <= DEFAULT_ENUMERATION_BUDGET => {
                    let mut rng = seed::rng(seed_);
                    let dec = decompose(&data, OrderPolicy::Observational, &mut rng);
                    let value =
                        conditional_loglik_exact(&fit.theta_hat, &dec, &h, DEFAULT_ENUMERATION_BUDGET)
                            .map_err(cle_error)?;
                    Some(LogLik {
                        value,
                        se: None,
                        exact: true,
                    })
                }
                _ => None,
            };
            let aic = loglik
                .as_ref()
                .map(|l| -2.0 * l.value + 2.0 * labels.len() as f64);
            let (tests, joint) = component_tests(&labels, &fit.theta_hat, &covariance);
            FitOutput {
                command: "fit",
                method: cfg.method,
                estimator: "PseudoLikelihood".into(),
                labels,
                columns,
                n,
                std_errors: (0..covariance.len())
                    .map(|j| covariance[j][j].max(0.0).sqrt())
                    .collect(),
                theta_hat: fit.theta_hat.clone(),
                covariance,
                tests,
                joint_test: joint,
                loglik,
                aic,
                converged: fit.converged,
                iterations: fit.iterations,
                provenance: provenance(None),
                cle: None,
                ple: Some(PleDetails {
                    certified: fit.certified,
                    gradient_norm: fit.gradient_norm,
                    pseudo_loglik: fit.value,
                }),
                timestamp: timestamp(stamp),
            }
        }
    };
    let code = if out.converged {
        EXIT_OK
    } else {
        EXIT_NON_CONVERGENCE
    };
    Ok(Outcome {
        report: to_json(&out)?,
        summary: fit_summary(&out),
        code,
    })
}

fn fit_summary(out: &FitOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} fit ({}), n = {}, seed = {}, {}",
        serde_json::to_value(out.method)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        out.estimator,
        out.n,
        out.provenance.seed,
        if out.converged {
            "converged"
        } else {
            "NOT converged"
        }
    );
    let _ = writeln!(s, "{:<24} {:>12} {:>10} {:>8} {:>10}", "component", "estimate", "s.e.", "z", "p");
    for t in &out.tests {
        let _ = writeln!(
            s,
            "{:<24} {:>12.5} {:>10.5} {:>8.3} {:>10.4}",
            t.label, t.estimate, t.std_error, t.z, t.p_value
        );
    }
    if let Some(l) = &out.loglik {
        let _ = match l.se {
            Some(se) => writeln!(s, "conditional log-likelihood {:.4} (MC s.e. {se:.4})", l.value),
            None => writeln!(s, "conditional log-likelihood {:.4} (exact)", l.value),
        };
    }
    if let Some(a) = out.aic {
        let _ = writeln!(s, "AIC {a:.4}");
    }
    s
}

// ---------------------------------------------------------------------------
// sample

pub fn sample(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let seed_ = cfg.require_seed()?;
    cfg.require_columns()?;
    let sc = cfg
        .sample
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [sample] section".into()))?;
    let kinds = cfg.kinds();
    let spec = ModelSpec {
        h: build_h(&cfg.h, &kinds)?,
        kinds: kinds.clone(),
        marginals: sc.marginals.clone(),
        theta: sc.theta.clone(),
    };
    if let Some(v) = validate_model(&spec).first() {
        return Err(CliError::Config(v.to_string()));
    }
    if let Some(i) = sc
        .marginals
        .iter()
        .position(|m| matches!(m, MarginalSpec::Empirical))
    {
        return Err(CliError::Config(format!(
            "marginal {} is empirical; sampling needs a parametric or finite marginal",
            i + 1
        )));
    }
    let mut rng = seed::rng(seed_);
    let drawn = oracle::sample_population(&spec, sc.n, sc.population, sc.length, &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let columns = cfg
        .columns
        .iter()
        .zip(drawn.columns())
        .map(|(c, col)| Column::new(c.name.clone(), c.kind.clone(), col.values.clone()))
        .collect();
    let data = Dataset::new(columns).map_err(|e| CliError::Data(e.to_string()))?;
    let mut report = Vec::new();
    csvio::write_dataset(&mut report, &data)?;
    let length = sc.length.unwrap_or(150 * sc.population as u64);
    Ok(Outcome {
        report,
        summary: format!(
            "sampled {} rows from a population of {} after {} exchange steps (seed {seed_})\n",
            sc.n, sc.population, length
        ),
        code: EXIT_OK,
    })
}

// ---------------------------------------------------------------------------
// bounds

#[derive(Debug, Clone, Serialize)]
pub struct BoundsRow {
    pub setting: usize,
    pub marginals: Vec<MarginalSpec>,
    pub support_sizes: Vec<usize>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsOutput {
    pub command: &'static str,
    pub version: &'static str,
    pub h: String,
    pub truncation: usize,
    pub probe: f64,
    pub tol: f64,
    pub rows: Vec<BoundsRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

/// Support and probabilities of a finite or truncated marginal.
fn finite_marginal(m: &MarginalSpec, truncation: usize) -> Result<(Vec<f64>, Vec<f64>), String> {
    if let Some(v) = m.violations().first() {
        return Err(v.clone());
    }
    match m {
        MarginalSpec::Parametric(ParametricFamily::Poisson { rate }) => Ok((
            (0..=truncation).map(|k| k as f64).collect(),
            finite::poisson_on(*rate, truncation),
        )),
        MarginalSpec::Parametric(ParametricFamily::Bernoulli { p }) => {
            Ok((vec![0.0, 1.0], vec![1.0 - p, *p]))
        }
        MarginalSpec::FiniteTable {
            support,
            probabilities,
        } => Ok((support.clone(), probabilities.clone())),
        other => Err(format!("{other:?} is neither finite nor a count distribution")),
    }
}

pub fn bounds(cfg: &RunConfig, stamp: bool) -> Result<Outcome, CliError> {
    let bc = cfg
        .bounds
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [bounds] section".into()))?;
    let sources = if cfg.h.is_empty() {
        vec!["x1*x2".to_string()]
    } else {
        cfg.h.clone()
    };
    if sources.len() != 1 {
        return Err(CliError::Config("bounds take exactly one statistic".into()));
    }
    let kinds = if cfg.columns.is_empty() {
        vec![ColumnKind::Continuous; 2]
    } else {
        cfg.require_columns()?;
        cfg.kinds()
    };
    let h = build_h(&sources, &kinds)?;
    if h.arity() != 2 {
        return Err(CliError::Config("bounds need exactly two variables".into()));
    }
    let opts = IpfOptions {
        tol: bc.tol,
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(bc.settings.len());
    for (s, setting) in bc.settings.iter().enumerate() {
        if setting.marginals.len() != 2 {
            return Err(CliError::Config(format!(
                "setting {}: expected 2 marginals, got {}",
                s + 1,
                setting.marginals.len()
            )));
        }
        let (supports, probs): (Vec<_>, Vec<_>) = setting
            .marginals
            .iter()
            .enumerate()
            .map(|(i, m)| {
                finite_marginal(m, bc.truncation)
                    .map_err(|e| CliError::Config(format!("setting {}, marginal {}: {e}", s + 1, i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        let fin = |e: FiniteError| match e {
            FiniteError::NonConvergence { .. } | FiniteError::Backfit { .. } => {
                CliError::NonConvergence(format!("setting {}: {e}", s + 1))
            }
            other => CliError::Config(format!("setting {}: {other}", s + 1)),
        };
        let table = Table::from_statistic(&supports, &h)
            .map_err(fin)?
            .swap_remove(0);
        let (lower, upper) = expectation_range(&table, &probs, &supports, bc.probe, &opts).map_err(fin)?;
        rows.push(BoundsRow {
            setting: s + 1,
            marginals: setting.marginals.clone(),
            support_sizes: supports.iter().map(Vec::len).collect(),
            lower,
            upper,
        });
    }
    let out = BoundsOutput {
        command: "bounds",
        version: VERSION,
        h: sources[0].clone(),
        truncation: bc.truncation,
        probe: bc.probe,
        tol: bc.tol,
        rows,
        timestamp: timestamp(stamp),
    };
    let mut summary = format!(
        "correlation range of {} (truncation {{0..{}}}, probe ±{})\n{:>8} {:>9} {:>9}\n",
        out.h, out.truncation, out.probe, "setting", "lower", "upper"
    );
    for r in &out.rows {
        let _ = writeln!(summary, "{:>8} {:>9.4} {:>9.4}", r.setting, r.lower, r.upper);
    }
    Ok(Outcome {
        report: to_json(&out)?,
        summary,
        code: EXIT_OK,
    })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub results: Vec<ScenarioResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

fn experiment_error(e: ExperimentError) -> CliError {
    match e {
        ExperimentError::Generation { .. } => CliError::NonConvergence(e.to_string()),
        _ => CliError::Config(e.to_string()),
    }
}

pub fn simulate(
    cfg: &RunConfig,
    scenario: Option<&str>,
    reps: Option<usize>,
    stamp: bool,
) -> Result<Outcome, CliError> {
    let seed_ = cfg.require_seed()?;
    let sim = cfg.simulate.as_ref();
    let mut scenarios: Vec<Scenario> = match (scenario, sim.and_then(|s| s.scenario.as_deref()), sim.and_then(|s| s.custom.as_ref())) {
        (Some(name), _, _) | (None, Some(name), _) => {
            experiments::named_scenarios(name).map_err(experiment_error)?
        }
        (None, None, Some(custom)) => vec![custom.clone()],
        (None, None, None) => {
            return Err(CliError::Config(format!(
                "no scenario given; choose one of {:?} or a [simulate.custom] table",
                experiments::SCENARIO_NAMES
            )))
        }
    };
    if let Some(r) = reps.or(sim.and_then(|s| s.reps)) {
        for s in &mut scenarios {
            s.reps = r;
        }
    }
    let mut results = Vec::with_capacity(scenarios.len());
    for s in &scenarios {
        s.validate().map_err(experiment_error)?;
        let r = experiments::run_scenario(s, seed_).map_err(experiment_error)?;
        results.push(if stamp { r } else { r.without_timing() });
    }
    let summary = results.iter().map(ScenarioResult::to_table).collect::<Vec<_>>().join("\n");
    let out = SimulateOutput {
        command: "simulate",
        version: VERSION,
        seed: seed_,
        results,
        timestamp: timestamp(stamp),
    };
    Ok(Outcome {
        report: to_json(&out)?,
        summary,
        code: EXIT_OK,
    })
}
