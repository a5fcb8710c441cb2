//! Domain types shared by every module: column kinds, heterogeneous datasets,
//! canonical statistics and model specifications.

use std::cmp::Ordering;
use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::statlang::Expr;

/// Tolerance on the total mass of a [`MarginalSpec::FiniteTable`].
pub const FINITE_TABLE_MASS_TOL: f64 = 1e-12;

/// The sample space of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Count,
    /// Levels in declaration order. `quantified` allows the level index to be
    /// used as a real number inside arithmetic statistics.
    Categorical {
        levels: Vec<String>,
        #[serde(default)]
        quantified: bool,
    },
    /// Angles in `[0, 2π)`.
    Circular,
}

impl ColumnKind {
    pub fn categorical<S: Into<String>>(levels: impl IntoIterator<Item = S>) -> Self {
        ColumnKind::Categorical {
            levels: levels.into_iter().map(Into::into).collect(),
            quantified: false,
        }
    }

    pub fn quantified_categorical<S: Into<String>>(levels: impl IntoIterator<Item = S>) -> Self {
        ColumnKind::Categorical {
            levels: levels.into_iter().map(Into::into).collect(),
            quantified: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ColumnKind::Continuous => "continuous",
            ColumnKind::Count => "count",
            ColumnKind::Categorical { .. } => "categorical",
            ColumnKind::Circular => "circular",
        }
    }

    /// Checks the invariants of the kind itself (not of any value).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let ColumnKind::Categorical { levels, .. } = self {
            let mut distinct = levels.clone();
            distinct.sort();
            distinct.dedup();
            if distinct.len() < 2 {
                out.push(format!(
                    "categorical needs at least 2 distinct levels, has {}",
                    distinct.len()
                ));
            }
            if distinct.len() != levels.len() {
                out.push("categorical levels are not distinct".to_string());
            }
        }
        out
    }

    /// Checks that `value` is a legal element of this sample space.
    pub fn check_value(&self, value: Value) -> Result<(), String> {
        match (self, value) {
            (ColumnKind::Continuous, Value::Real(v)) if v.is_finite() => Ok(()),
            (ColumnKind::Circular, Value::Real(v)) if (0.0..TAU).contains(&v) => Ok(()),
            (ColumnKind::Circular, Value::Real(v)) => {
                Err(format!("circular value {v} outside [0, 2π)"))
            }
            (ColumnKind::Count, Value::Int(v)) if v >= 0 => Ok(()),
            (ColumnKind::Count, Value::Int(v)) => Err(format!("negative count {v}")),
            (ColumnKind::Categorical { levels, .. }, Value::Level(l)) if l < levels.len() => Ok(()),
            (ColumnKind::Categorical { levels, .. }, Value::Level(l)) => Err(format!(
                "level index {l} out of range for {} levels",
                levels.len()
            )),
            (kind, value) => Err(format!("{} column cannot hold {value}", kind.name())),
        }
    }
}

/// A single observed value. Every variant has a canonical real quantification
/// (`Level` maps to its index in declaration order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Real(f64),
    Int(i64),
    Level(usize),
}

impl Value {
    #[inline]
    pub fn to_f64(self) -> f64 {
        match self {
            Value::Real(v) => v,
            Value::Int(v) => v as f64,
            Value::Level(l) => l as f64,
        }
    }

    /// The natural total order: numeric for reals and counts, declaration
    /// order for levels.
    pub fn natural_cmp(&self, other: &Value) -> Ordering {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Level(a), Value::Level(b)) => a.cmp(b),
            _ => self.to_f64().total_cmp(&other.to_f64()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Int(v) => write!(f, "{v}"),
            Value::Level(l) => write!(f, "level#{l}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("column {column} has {found} values, expected {expected}")]
    RaggedColumn {
        column: String,
        expected: usize,
        found: usize,
    },
    #[error("column {column}, row {row}: {message}")]
    InvalidValue {
        column: String,
        row: usize,
        message: String,
    },
    #[error("column {column}: {message}")]
    InvalidColumn { column: String, message: String },
    #[error("row has {found} entries, expected {expected}")]
    RowLength { expected: usize, found: usize },
    #[error("variable {index}: {message}")]
    TypeMismatch { index: usize, message: String },
    #[error("dataset has no columns")]
    Empty,
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One named, typed column of a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub values: Vec<Value>,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind, values: Vec<Value>) -> Self {
        Column {
            name: name.into(),
            kind,
            values,
        }
    }

    pub fn continuous(name: impl Into<String>, values: &[f64]) -> Self {
        Column::new(
            name,
            ColumnKind::Continuous,
            values.iter().map(|&v| Value::Real(v)).collect(),
        )
    }

    pub fn count(name: impl Into<String>, values: &[i64]) -> Self {
        Column::new(
            name,
            ColumnKind::Count,
            values.iter().map(|&v| Value::Int(v)).collect(),
        )
    }
}

/// `n` rows of `d` heterogeneous typed columns. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n: usize,
}

impl Dataset {
    /// Builds a dataset, checking that every column has the same length and
    /// every value belongs to its column's sample space.
    pub fn new(columns: Vec<Column>) -> Result<Self, ModelError> {
        let first = columns.first().ok_or(ModelError::Empty)?;
        let n = first.values.len();
        for col in &columns {
            if col.values.len() != n {
                return Err(ModelError::RaggedColumn {
                    column: col.name.clone(),
                    expected: n,
                    found: col.values.len(),
                });
            }
            if let Some(message) = col.kind.violations().into_iter().next() {
                return Err(ModelError::InvalidColumn {
                    column: col.name.clone(),
                    message,
                });
            }
            for (row, &v) in col.values.iter().enumerate() {
                col.kind
                    .check_value(v)
                    .map_err(|message| ModelError::InvalidValue {
                        column: col.name.clone(),
                        row,
                        message,
                    })?;
            }
        }
        Ok(Dataset { columns, n })
    }

    /// Continuous columns `x1..xd` from row-major data.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let d = rows.first().map_or(0, Vec::len);
        let columns = (0..d)
            .map(|i| {
                let vals: Vec<f64> = rows.iter().map(|r| r[i]).collect();
                Column::continuous(format!("x{}", i + 1), &vals)
            })
            .collect();
        if let Some((t, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(ModelError::InvalidValue {
                column: "row".into(),
                row: t,
                message: format!("has {} entries, expected {d}", r.len()),
            });
        }
        Dataset::new(columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.columns.iter().map(|c| c.kind.clone()).collect()
    }

    pub fn row(&self, t: usize) -> Vec<Value> {
        self.columns.iter().map(|c| c.values[t]).collect()
    }

    /// Row-major `n × d` matrix of quantified values.
    pub fn numeric_rows(&self) -> Vec<f64> {
        let d = self.n_cols();
        let mut out = vec![0.0; self.n * d];
        for (i, col) in self.columns.iter().enumerate() {
            for (t, v) in col.values.iter().enumerate() {
                out[t * d + i] = v.to_f64();
            }
        }
        out
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                kind: c.kind.clone(),
                values: rows.iter().map(|&t| c.values[t]).collect(),
            })
            .collect();
        Dataset {
            columns,
            n: rows.len(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{function}({argument}) is undefined")]
    Domain {
        function: &'static str,
        argument: f64,
    },
    #[error("component {component} of h is not finite ({value})")]
    NonFinite { component: usize, value: f64 },
    #[error("h expects {expected} variables, row has {found}")]
    Arity { expected: usize, found: usize },
}

type EvalFn = dyn Fn(&[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync;

/// The canonical statistic `h: 𝒳 → ℝᴷ`, evaluated on quantified rows.
#[derive(Clone)]
pub struct CanonicalStatistic {
    dim: usize,
    arity: usize,
    labels: Vec<String>,
    exprs: Option<Vec<Expr>>,
    eval: Arc<EvalFn>,
}

impl fmt::Debug for CanonicalStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CanonicalStatistic")
            .field("dim", &self.dim)
            .field("arity", &self.arity)
            .field("labels", &self.labels)
            .finish()
    }
}

impl CanonicalStatistic {
    /// Wraps an evaluation function writing `dim` components for rows of
    /// `arity` quantified values.
    pub fn from_fn<F>(dim: usize, arity: usize, labels: Vec<String>, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync + 'static,
    {
        assert!(dim >= 1, "canonical statistic needs K >= 1");
        let labels = if labels.len() == dim {
            labels
        } else {
            (1..=dim).map(|k| format!("h{k}")).collect()
        };
        CanonicalStatistic {
            dim,
            arity,
            labels,
            exprs: None,
            eval: Arc::new(f),
        }
    }

    pub(crate) fn with_exprs(mut self, exprs: Vec<Expr>) -> Self {
        self.exprs = Some(exprs);
        self
    }

    /// `h(x) = Π_{j∈indices} x_j`, a single product term.
    pub fn product(arity: usize, indices: &[usize]) -> Self {
        Self::products(arity, &[indices.to_vec()])
    }

    /// One product term per entry of `terms` (0-based variable indices).
    pub fn products(arity: usize, terms: &[Vec<usize>]) -> Self {
        let terms: Vec<Vec<usize>> = terms.to_vec();
        let labels = terms
            .iter()
            .map(|t| {
                t.iter()
                    .map(|j| format!("x{}", j + 1))
                    .collect::<Vec<_>>()
                    .join("*")
            })
            .collect();
        Self::from_fn(terms.len(), arity, labels, move |x, out| {
            for (o, term) in out.iter_mut().zip(&terms) {
                *o = term.iter().map(|&j| x[j]).product();
            }
            Ok(())
        })
    }

    /// All pairwise products `x_i x_j`, `i < j`, in lexicographic order.
    pub fn pairwise_products(arity: usize) -> Self {
        let terms: Vec<Vec<usize>> = (0..arity)
            .flat_map(|i| (i + 1..arity).map(move |j| vec![i, j]))
            .collect();
        Self::products(arity, &terms)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn exprs(&self) -> Option<&[Expr]> {
        self.exprs.as_deref()
    }

    /// Evaluates into `out` (length `dim`), rejecting non-finite results.
    #[inline]
    pub fn eval_into(&self, row: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        if row.len() != self.arity {
            return Err(EvalError::Arity {
                expected: self.arity,
                found: row.len(),
            });
        }
        (self.eval)(row, out)?;
        for (component, &value) in out.iter().enumerate() {
            if !value.is_finite() {
                return Err(EvalError::NonFinite { component, value });
            }
        }
        Ok(())
    }

    pub fn eval(&self, row: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(row, &mut out)?;
        Ok(out)
    }

    /// Keeps only the listed components.
    pub fn restrict(&self, components: &[usize]) -> CanonicalStatistic {
        let inner = self.clone();
        let comps = components.to_vec();
        let labels = comps.iter().map(|&c| self.labels[c].clone()).collect();
        let exprs = self
            .exprs
            .as_ref()
            .map(|e| comps.iter().map(|&c| e[c].clone()).collect::<Vec<_>>());
        let full_dim = self.dim;
        let mut restricted = CanonicalStatistic::from_fn(comps.len(), self.arity, labels, move |x, out| {
            let mut full = vec![0.0; full_dim];
            (inner.eval)(x, &mut full)?;
            for (o, &c) in out.iter_mut().zip(&comps) {
                *o = full[c];
            }
            Ok(())
        });
        restricted.exprs = exprs;
        restricted
    }
}

/// Parametric marginal families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParametricFamily {
    Normal { mean: f64, variance: f64 },
    Poisson { rate: f64 },
    Bernoulli { p: f64 },
    Beta { alpha: f64, beta: f64 },
    UniformCircle,
}

impl ParametricFamily {
    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                out.push(msg)
            }
        };
        match *self {
            ParametricFamily::Normal { mean, variance } => {
                need(mean.is_finite(), format!("normal mean {mean} is not finite"));
                need(
                    variance > 0.0 && variance.is_finite(),
                    format!("normal variance {variance} must be > 0"),
                );
            }
            ParametricFamily::Poisson { rate } => {
                need(rate > 0.0 && rate.is_finite(), format!("poisson rate {rate} must be > 0"))
            }
            ParametricFamily::Bernoulli { p } => {
                need(p > 0.0 && p < 1.0, format!("bernoulli p {p} must lie in (0, 1)"))
            }
            ParametricFamily::Beta { alpha, beta } => {
                need(alpha > 0.0 && alpha.is_finite(), format!("beta alpha {alpha} must be > 0"));
                need(beta > 0.0 && beta.is_finite(), format!("beta beta {beta} must be > 0"));
            }
            ParametricFamily::UniformCircle => {}
        }
        out
    }

    fn compatible_with(&self, kind: &ColumnKind) -> bool {
        match self {
            ParametricFamily::Normal { .. } | ParametricFamily::Beta { .. } => {
                matches!(kind, ColumnKind::Continuous)
            }
            ParametricFamily::Poisson { .. } => matches!(kind, ColumnKind::Count),
            ParametricFamily::Bernoulli { .. } => match kind {
                ColumnKind::Count => true,
                ColumnKind::Categorical { levels, .. } => levels.len() == 2,
                _ => false,
            },
            ParametricFamily::UniformCircle => matches!(kind, ColumnKind::Circular),
        }
    }
}

/// Marginal model `r_i` of one variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarginalSpec {
    Parametric(ParametricFamily),
    /// Probabilities over an explicit finite support of quantified values.
    FiniteTable { support: Vec<f64>, probabilities: Vec<f64> },
    /// Use the observed marginal values as they are.
    Empirical,
}

impl MarginalSpec {
    pub fn normal(mean: f64, variance: f64) -> Self {
        MarginalSpec::Parametric(ParametricFamily::Normal { mean, variance })
    }

    pub fn poisson(rate: f64) -> Self {
        MarginalSpec::Parametric(ParametricFamily::Poisson { rate })
    }

    pub fn beta(alpha: f64, beta: f64) -> Self {
        MarginalSpec::Parametric(ParametricFamily::Beta { alpha, beta })
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            MarginalSpec::Parametric(fam) => fam.violations(),
            MarginalSpec::FiniteTable {
                support,
                probabilities,
            } => {
                let mut out = Vec::new();
                if support.len() != probabilities.len() {
                    out.push(format!(
                        "FiniteTable has {} support points but {} probabilities",
                        support.len(),
                        probabilities.len()
                    ));
                }
                if let Some(p) = probabilities.iter().find(|p| !(**p >= 0.0)) {
                    out.push(format!("FiniteTable has negative probability {p}"));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > FINITE_TABLE_MASS_TOL {
                    out.push(format!("FiniteTable sums to {total}"));
                }
                out
            }
            MarginalSpec::Empirical => Vec::new(),
        }
    }
}

/// Everything a fit or sampling routine needs: the statistic, the variables'
/// sample spaces, their marginal models and the dependence parameter.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub h: CanonicalStatistic,
    pub kinds: Vec<ColumnKind>,
    pub marginals: Vec<MarginalSpec>,
    pub theta: Vec<f64>,
}

impl ModelSpec {
    pub fn d(&self) -> usize {
        self.kinds.len()
    }
}

/// One failed invariant, addressed by a dotted path into the spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Lists every invariant violation of `spec`; empty iff it is consistent.
pub fn validate_model(spec: &ModelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Violation { path, message });
    let d = spec.d();
    let k = spec.h.dim();
    if d == 0 {
        push("kinds".into(), "model has no variables".into());
    }
    if spec.marginals.len() != d {
        push(
            "marginals".into(),
            format!("marginals length {} ≠ d={d}", spec.marginals.len()),
        );
    }
    if spec.theta.len() != k {
        push(
            "theta".into(),
            format!("theta length {} ≠ K={k}", spec.theta.len()),
        );
    }
    if let Some(t) = spec.theta.iter().find(|t| !t.is_finite()) {
        push("theta".into(), format!("theta has non-finite entry {t}"));
    }
    if spec.h.arity() != d {
        push(
            "h".into(),
            format!("h takes {} variables ≠ d={d}", spec.h.arity()),
        );
    }
    for (i, kind) in spec.kinds.iter().enumerate() {
        for msg in kind.violations() {
            push(format!("kinds[{i}]"), msg);
        }
    }
    for (i, m) in spec.marginals.iter().enumerate() {
        for msg in m.violations() {
            push(format!("marginals[{i}]"), msg);
        }
        if let (MarginalSpec::Parametric(fam), Some(kind)) = (m, spec.kinds.get(i)) {
            if !fam.compatible_with(kind) {
                push(
                    format!("marginals[{i}]"),
                    format!("{fam:?} does not fit a {} column", kind.name()),
                );
            }
        }
    }
    out
}

/// Evaluates `h` on a typed row, checking it against the declared kinds.
pub fn eval_h(spec: &ModelSpec, row: &[Value]) -> Result<Vec<f64>, ModelError> {
    if row.len() != spec.d() {
        return Err(ModelError::RowLength {
            expected: spec.d(),
            found: row.len(),
        });
    }
    let mut x = Vec::with_capacity(row.len());
    for (index, (kind, &v)) in spec.kinds.iter().zip(row).enumerate() {
        kind.check_value(v)
            .map_err(|message| ModelError::TypeMismatch { index, message })?;
        x.push(v.to_f64());
    }
    Ok(spec.h.eval(&x)?)
}
