//! Run configuration, read from a TOML document.
//!
//! ```toml
//! seed = 20240607
//! data = "penguins.csv"          # resolved relative to the config file
//! output = "report.json"          # optional, overridden by --output
//! method = "cle"                  # cle | ple | exact
//! h = ["x1*x2", "x2*x3"]          # x<i> is the i-th entry of `columns`
//!
//! [[columns]]
//! name = "bill_length_mm"
//! kind = "continuous"             # continuous | count | circular | categorical
//!
//! [[columns]]
//! name = "sex"
//! kind = "categorical"
//! levels = ["female", "male"]
//! quantified = true
//!
//! [fit]        # all optional
//! tol = 0.01
//! max_iter = 100
//! chain_length = 7500
//! loglik = true
//!
//! [sample]
//! theta = [100.0]
//! n = 500
//! population = 1000
//! marginals = [
//!   { type = "parametric", family = "beta", alpha = 10.0, beta = 10.0 },
//!   { type = "parametric", family = "poisson", rate = 3.0 },
//! ]
//!
//! [bounds]
//! truncation = 20
//! probe = 10.0
//! [[bounds.settings]]
//! marginals = [{ type = "parametric", family = "poisson", rate = 1.0 },
//!              { type = "parametric", family = "poisson", rate = 0.25 }]
//!
//! [simulate]
//! scenario = "gaussian_table3"    # or a [simulate.custom] scenario table
//! reps = 200
//! ```

use std::path::{Path, PathBuf};

use mindep::experiments::Scenario;
use mindep::{ColumnKind, MarginalSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Version of the configuration schema documented above.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    Cle,
    Ple,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawColumn")]
pub struct ColumnConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
}

/// The on-disk shape of a column, checked strictly before conversion.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumn {
    name: String,
    kind: String,
    #[serde(default)]
    levels: Option<Vec<String>>,
    #[serde(default)]
    quantified: Option<bool>,
}

impl TryFrom<RawColumn> for ColumnConfig {
    type Error = String;

    fn try_from(raw: RawColumn) -> Result<Self, String> {
        let categorical = raw.kind == "categorical";
        if !categorical && (raw.levels.is_some() || raw.quantified.is_some()) {
            return Err(format!(
                "column {}: `levels` and `quantified` apply to categorical columns only",
                raw.name
            ));
        }
        let kind = match raw.kind.as_str() {
            "continuous" => ColumnKind::Continuous,
            "count" => ColumnKind::Count,
            "circular" => ColumnKind::Circular,
            "categorical" => ColumnKind::Categorical {
                levels: raw
                    .levels
                    .ok_or_else(|| format!("column {}: categorical needs `levels`", raw.name))?,
                quantified: raw.quantified.unwrap_or(false),
            },
            other => return Err(format!("column {}: unknown kind {other:?}", raw.name)),
        };
        Ok(ColumnConfig {
            name: raw.name,
            kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_fit_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Initial chain length; `150·n` when absent.
    #[serde(default)]
    pub chain_length: Option<u64>,
    /// Estimate the conditional log-likelihood when it cannot be enumerated.
    #[serde(default = "yes")]
    pub loglik: bool,
}

fn default_fit_tol() -> f64 {
    1e-2
}

fn default_max_iter() -> usize {
    100
}

fn yes() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            tol: default_fit_tol(),
            max_iter: default_max_iter(),
            chain_length: None,
            loglik: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub theta: Vec<f64>,
    pub n: usize,
    /// Size `N` of the i.i.d. population that is permuted and subsampled.
    #[serde(default = "default_population")]
    pub population: usize,
    /// Exchange steps; `150·N` when absent.
    #[serde(default)]
    pub length: Option<u64>,
    pub marginals: Vec<MarginalSpec>,
}

fn default_population() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSetting {
    pub marginals: Vec<MarginalSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    /// Largest support point kept for count marginals.
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_probe")]
    pub probe: f64,
    #[serde(default = "default_bounds_tol")]
    pub tol: f64,
    pub settings: Vec<BoundsSetting>,
}

fn default_truncation() -> usize {
    20
}

fn default_probe() -> f64 {
    10.0
}

fn default_bounds_tol() -> f64 {
    1e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub custom: Option<Scenario>,
    #[serde(default)]
    pub reps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub method: FitMethod,
    #[serde(default)]
    pub columns: Vec<ColumnConfig>,
    #[serde(default)]
    pub h: Vec<String>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file; a relative `data` path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.columns.iter().map(|c| c.kind.clone()).collect()
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn require_columns(&self) -> Result<(), CliError> {
        if self.columns.is_empty() {
            return Err(CliError::Config("no [[columns]] declared".into()));
        }
        for (i, c) in self.columns.iter().enumerate() {
            if let Some(v) = c.kind.violations().first() {
                return Err(CliError::Config(format!("column {} ({}): {v}", i + 1, c.name)));
            }
            if self.columns[..i].iter().any(|o| o.name == c.name) {
                return Err(CliError::Config(format!("column {} declared twice", c.name)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mindep::ParametricFamily;

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| format!("{}\n", l.trim_start_matches("//!").trim_start()))
            .collect();
        let cfg = RunConfig::parse(&doc).unwrap();
        assert_eq!(cfg.seed, Some(20240607));
        assert_eq!(cfg.method, FitMethod::Cle);
        assert_eq!(cfg.columns.len(), 2);
        assert_eq!(
            cfg.columns[1].kind,
            ColumnKind::Categorical {
                levels: vec!["female".into(), "male".into()],
                quantified: true
            }
        );
        let sample = cfg.sample.unwrap();
        assert_eq!(
            sample.marginals[0],
            MarginalSpec::Parametric(ParametricFamily::Beta {
                alpha: 10.0,
                beta: 10.0
            })
        );
        assert_eq!(cfg.bounds.unwrap().settings.len(), 1);
        assert_eq!(cfg.simulate.unwrap().reps, Some(200));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nsede = 2\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[fit]\ntoll = 1.0\n").is_err());
        let col = "[[columns]]\nname = \"a\"\nkind = \"continuous\"\n";
        assert!(RunConfig::parse(col).is_ok());
        assert!(RunConfig::parse(&format!("{col}sede = 1\n")).is_err());
        assert!(RunConfig::parse(&format!("{col}levels = [\"x\"]\n")).is_err());
        assert!(RunConfig::parse(&col.replace("continuous", "real")).is_err());
        assert!(RunConfig::parse(&col.replace("continuous", "categorical")).is_err());
    }

    #[test]
    fn defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert!(cfg.require_seed().is_err());
        assert_eq!(cfg.fit, FitConfig::default());
        assert!(cfg.require_columns().is_err());
    }
}
