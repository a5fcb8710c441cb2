//! Minimum information models on finite product spaces.
//!
//! [`solve_adjusting`] finds the adjusting functions `a_i` and potential `ψ`
//! such that `p(x) = exp(H(x) − Σ a_i(x_i) − ψ) Π r_i(x_i)` has marginals
//! `r_i`, by cyclic iterative proportional fitting in log space (Sinkhorn–Knopp
//! when `d = 2`).

use std::io::{self, Write};

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::model::{CanonicalStatistic, EvalError};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;
/// Count marginals are truncated where the tail mass drops below this.
pub const TRUNCATION_TAIL: f64 = 1e-8;
/// Smallest truncated count support, `{0, …, 20}`.
pub const TRUNCATION_FLOOR: usize = 21;

#[derive(Debug, Error)]
pub enum FiniteError {
    #[error("IPF did not converge in {sweeps} sweeps (ℓ¹ marginal residual {residual:.3e})")]
    NonConvergence { sweeps: usize, residual: f64 },
    #[error("back-fitting did not converge in {sweeps} sweeps (residual {residual:.3e})")]
    Backfit { sweeps: usize, residual: f64 },
    #[error("marginal {coordinate}: {message}")]
    InvalidMarginal { coordinate: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("table has a non-finite entry at cell {0}")]
    NonFinite(usize),
    #[error("support mismatch: {0}")]
    SupportMismatch(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// A dense table over a product grid, row-major (last coordinate fastest).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Table {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, FiniteError> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || len != values.len() {
            return Err(FiniteError::Shape(format!(
                "shape {shape:?} needs {len} cells, got {}",
                values.len()
            )));
        }
        Ok(Table { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Table {
            shape,
            values: vec![0.0; len],
        }
    }

    /// Tabulates `f` at every grid point.
    pub fn from_fn(supports: &[Vec<f64>], mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let shape: Vec<usize> = supports.iter().map(Vec::len).collect();
        let mut t = Table::zeros(shape);
        let mut x = vec![0.0; supports.len()];
        let mut idx = vec![0; supports.len()];
        for v in t.values.iter_mut() {
            for (i, &k) in idx.iter().enumerate() {
                x[i] = supports[i][k];
            }
            *v = f(&x);
            advance(&mut idx, &t.shape);
        }
        t
    }

    /// One table per component of `h`.
    pub fn from_statistic(
        supports: &[Vec<f64>],
        h: &CanonicalStatistic,
    ) -> Result<Vec<Table>, FiniteError> {
        if h.arity() != supports.len() {
            return Err(FiniteError::Shape(format!(
                "h takes {} variables, {} supports given",
                h.arity(),
                supports.len()
            )));
        }
        let shape: Vec<usize> = supports.iter().map(Vec::len).collect();
        let mut tables: Vec<Table> = (0..h.dim()).map(|_| Table::zeros(shape.clone())).collect();
        let mut x = vec![0.0; supports.len()];
        let mut idx = vec![0; supports.len()];
        let mut out = vec![0.0; h.dim()];
        let len: usize = shape.iter().product();
        for cell in 0..len {
            for (i, &k) in idx.iter().enumerate() {
                x[i] = supports[i][k];
            }
            h.eval_into(&x, &mut out)?;
            for (t, v) in tables.iter_mut().zip(&out) {
                t.values[cell] = *v;
            }
            advance(&mut idx, &shape);
        }
        Ok(tables)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn d(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[flat_index(idx, &self.shape)]
    }

    /// `Σ_k θ_k T_k`.
    pub fn combine(theta: &[f64], tables: &[Table]) -> Result<Table, FiniteError> {
        let first = tables
            .first()
            .ok_or_else(|| FiniteError::Shape("no tables".into()))?;
        if theta.len() != tables.len() {
            return Err(FiniteError::Shape(format!(
                "{} coefficients for {} tables",
                theta.len(),
                tables.len()
            )));
        }
        let mut out = Table::zeros(first.shape.clone());
        for (c, t) in theta.iter().zip(tables) {
            if t.shape != first.shape {
                return Err(FiniteError::Shape("tables differ in shape".into()));
            }
            for (o, v) in out.values.iter_mut().zip(&t.values) {
                *o += c * v;
            }
        }
        Ok(out)
    }

    /// Keeps the listed indices of each coordinate.
    pub fn restrict(&self, kept: &[Vec<usize>]) -> Table {
        let shape: Vec<usize> = kept.iter().map(Vec::len).collect();
        let mut out = Table::zeros(shape.clone());
        let mut idx = vec![0; shape.len()];
        let mut orig = vec![0; shape.len()];
        for v in out.values.iter_mut() {
            for (i, &k) in idx.iter().enumerate() {
                orig[i] = kept[i][k];
            }
            *v = self.get(&orig);
            advance(&mut idx, &shape);
        }
        out
    }

    /// Coordinate sums.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let stride = strides(&self.shape)[i];
        let m = self.shape[i];
        let mut out = vec![0.0; m];
        for (cell, v) in self.values.iter().enumerate() {
            out[(cell / stride) % m] += v;
        }
        out
    }
}

fn advance(idx: &mut [usize], shape: &[usize]) {
    for i in (0..idx.len()).rev() {
        idx[i] += 1;
        if idx[i] < shape[i] {
            return;
        }
        idx[i] = 0;
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &m)| acc * m + i)
}

fn logsumexp(x: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = x.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpfOptions {
    /// Bound on the largest ℓ¹ marginal error.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Starting adjusting functions on the full support.
    pub init: Option<Vec<Vec<f64>>>,
}

impl Default for IpfOptions {
    fn default() -> Self {
        IpfOptions {
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            init: None,
        }
    }
}

/// The fitted model. Coordinates with zero-probability cells live on the
/// reduced support listed in `kept`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteModel {
    /// Retained cell indices of each coordinate, into the input support.
    pub kept: Vec<Vec<usize>>,
    /// Cells dropped because their marginal probability was zero.
    pub dropped: Vec<Vec<usize>>,
    /// `θᵀh` on the reduced grid.
    pub h: Table,
    pub marginals: Vec<Vec<f64>>,
    /// Adjusting functions, each centred so that `E_{r_i}[a_i] = 0`.
    pub a: Vec<Vec<f64>>,
    pub psi: f64,
    pub p: Table,
    pub sweeps: usize,
    /// Largest ℓ¹ marginal error at termination.
    pub residual: f64,
    pub tol: f64,
}

impl FiniteModel {
    pub fn d(&self) -> usize {
        self.a.len()
    }

    /// `Σ_i a_i(x_i) + ψ` on the reduced grid, the gauge-invariant part.
    pub fn additive_part(&self) -> Table {
        let shape = self.p.shape.clone();
        let mut out = Table::zeros(shape.clone());
        let mut idx = vec![0; shape.len()];
        for v in out.values.iter_mut() {
            *v = self.psi + idx.iter().enumerate().map(|(i, &k)| self.a[i][k]).sum::<f64>();
            advance(&mut idx, &shape);
        }
        out
    }

    /// `exp(H − Σ a_i − ψ) Π r_i` recomputed from the components.
    pub fn density(&self) -> Table {
        let shape = self.p.shape.clone();
        let mut out = Table::zeros(shape.clone());
        let mut idx = vec![0; shape.len()];
        for (cell, v) in out.values.iter_mut().enumerate() {
            let mut e = self.h.values[cell] - self.psi;
            let mut r = 1.0;
            for (i, &k) in idx.iter().enumerate() {
                e -= self.a[i][k];
                r *= self.marginals[i][k];
            }
            *v = e.exp() * r;
            advance(&mut idx, &shape);
        }
        out
    }

    /// `Σ_x p(x) Σ_i a_i(x_i)`, zero by construction.
    pub fn zero_mean_residual(&self) -> f64 {
        (0..self.d())
            .map(|i| {
                self.p
                    .marginal(i)
                    .iter()
                    .zip(&self.a[i])
                    .map(|(m, a)| m * a)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Largest ℓ¹ distance between a marginal of `p` and its target.
    pub fn marginal_residual(&self) -> f64 {
        marginal_error(&self.p, &self.marginals)
    }

    /// Plain-text dump: a header with `ψ` and the tolerances, then one line
    /// per cell with its indices, `p` and each `a_i(x_i)`.
    pub fn write_text<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# psi\t{:?}", self.psi)?;
        writeln!(w, "# tol\t{:?}", self.tol)?;
        writeln!(w, "# residual\t{:?}", self.residual)?;
        writeln!(w, "# sweeps\t{}", self.sweeps)?;
        let d = self.d();
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.push("p".into());
        header.extend((1..=d).map(|i| format!("a{i}")));
        writeln!(w, "{}", header.join("\t"))?;
        let shape = self.p.shape.clone();
        let mut idx = vec![0; d];
        for cell in 0..self.p.len() {
            let mut fields: Vec<String> =
                idx.iter().enumerate().map(|(i, &k)| self.kept[i][k].to_string()).collect();
            fields.push(format!("{:?}", self.p.values[cell]));
            fields.extend(idx.iter().enumerate().map(|(i, &k)| format!("{:?}", self.a[i][k])));
            writeln!(w, "{}", fields.join("\t"))?;
            advance(&mut idx, &shape);
        }
        Ok(())
    }
}

fn marginal_error(p: &Table, r: &[Vec<f64>]) -> f64 {
    (0..p.d())
        .map(|i| {
            p.marginal(i)
                .iter()
                .zip(&r[i])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn check_marginals(marginals: &[Vec<f64>], shape: &[usize]) -> Result<(), FiniteError> {
    if marginals.len() != shape.len() {
        return Err(FiniteError::Shape(format!(
            "{} marginals for a {}-dimensional table",
            marginals.len(),
            shape.len()
        )));
    }
    for (i, (r, &m)) in marginals.iter().zip(shape).enumerate() {
        let bad = |message: String| FiniteError::InvalidMarginal {
            coordinate: i,
            message,
        };
        if r.len() != m {
            return Err(bad(format!("{} cells for a support of {m}", r.len())));
        }
        if let Some(v) = r.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(bad(format!("negative or non-finite probability {v}")));
        }
        let total: f64 = r.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("probabilities sum to {total}")));
        }
    }
    Ok(())
}

/// Log of the coordinate-`i` marginal of `exp(lt)`.
fn log_marginal(lt: &[f64], m: usize, stride: usize, out: &mut [f64]) {
    let mut mx = vec![f64::NEG_INFINITY; m];
    for (cell, &v) in lt.iter().enumerate() {
        let k = (cell / stride) % m;
        if v > mx[k] {
            mx[k] = v;
        }
    }
    let mut s = vec![0.0; m];
    for (cell, &v) in lt.iter().enumerate() {
        let k = (cell / stride) % m;
        s[k] += (v - mx[k]).exp();
    }
    for k in 0..m {
        out[k] = mx[k] + s[k].ln();
    }
}

/// Solves the marginal constraints for `H` by cyclic IPF.
pub fn solve_adjusting(
    h: &Table,
    marginals: &[Vec<f64>],
    opts: &IpfOptions,
) -> Result<FiniteModel, FiniteError> {
    check_marginals(marginals, &h.shape)?;
    if let Some(cell) = h.values.iter().position(|v| !v.is_finite()) {
        return Err(FiniteError::NonFinite(cell));
    }
    let d = h.d();
    let kept: Vec<Vec<usize>> = marginals
        .iter()
        .map(|r| (0..r.len()).filter(|&k| r[k] > 0.0).collect())
        .collect();
    let dropped: Vec<Vec<usize>> = marginals
        .iter()
        .map(|r| (0..r.len()).filter(|&k| r[k] == 0.0).collect())
        .collect();
    let hr = h.restrict(&kept);
    let r: Vec<Vec<f64>> = kept
        .iter()
        .zip(marginals)
        .map(|(k, m)| k.iter().map(|&j| m[j]).collect())
        .collect();
    let logr: Vec<Vec<f64>> = r.iter().map(|v| v.iter().map(|x| x.ln()).collect()).collect();
    let shape = hr.shape.clone();
    let st = strides(&shape);
    let mut a: Vec<Vec<f64>> = match &opts.init {
        Some(init) => {
            if init.len() != d || init.iter().zip(marginals).any(|(a, r)| a.len() != r.len()) {
                return Err(FiniteError::Shape("initial adjusting functions".into()));
            }
            kept.iter()
                .zip(init)
                .map(|(k, a)| k.iter().map(|&j| a[j]).collect())
                .collect()
        }
        None => shape.iter().map(|&m| vec![0.0; m]).collect(),
    };

    let fill = |a: &[Vec<f64>], lt: &mut Vec<f64>| {
        let mut idx = vec![0; d];
        for (cell, v) in lt.iter_mut().enumerate() {
            let mut e = hr.values[cell];
            for (i, &k) in idx.iter().enumerate() {
                e += logr[i][k] - a[i][k];
            }
            *v = e;
            advance(&mut idx, &shape);
        }
    };
    let mut lt = vec![0.0; hr.len()];
    let mut lm: Vec<Vec<f64>> = shape.iter().map(|&m| vec![0.0; m]).collect();
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    fill(&a, &mut lt);
    while sweeps < opts.max_sweeps {
        for i in 0..d {
            log_marginal(&lt, shape[i], st[i], &mut lm[i]);
            let delta: Vec<f64> = lm[i].iter().zip(&logr[i]).map(|(m, r)| m - r).collect();
            for (ak, dk) in a[i].iter_mut().zip(&delta) {
                *ak += dk;
            }
            for (cell, v) in lt.iter_mut().enumerate() {
                *v -= delta[(cell / st[i]) % shape[i]];
            }
        }
        sweeps += 1;
        fill(&a, &mut lt);
        residual = 0.0;
        for i in 0..d {
            log_marginal(&lt, shape[i], st[i], &mut lm[i]);
            let e: f64 = lm[i].iter().zip(&r[i]).map(|(l, r)| (l.exp() - r).abs()).sum();
            residual = f64::max(residual, e);
        }
        if residual <= opts.tol {
            break;
        }
    }
    if !(residual <= opts.tol) {
        return Err(FiniteError::NonConvergence { sweeps, residual });
    }
    // Absorb the normalisation into ψ, then centre each a_i under the fitted
    // marginal of p so that Σ_x p Σ_i a_i = 0.
    let mut psi = logsumexp(lt.iter().copied());
    let pm: Vec<Vec<f64>> = lm.iter().map(|l| l.iter().map(|v| (v - psi).exp()).collect()).collect();
    for i in 0..d {
        let c: f64 = pm[i].iter().zip(&a[i]).map(|(m, a)| m * a).sum();
        for ak in a[i].iter_mut() {
            *ak -= c;
        }
        psi += c;
    }
    let mut model = FiniteModel {
        kept,
        dropped,
        h: hr,
        marginals: r,
        a,
        psi,
        p: Table::zeros(shape.clone()),
        sweeps,
        residual,
        tol: opts.tol,
    };
    model.p = model.density();
    Ok(model)
}

/// Potential, its gradient and the Fisher matrix at `θ`.
#[derive(Debug, Clone, Serialize)]
pub struct PotentialDerivatives {
    pub psi: f64,
    /// `E[h]`.
    pub grad: Vec<f64>,
    /// `Cov[(I − P)h]` with `P` the projection onto additive functions.
    pub fisher: Vec<Vec<f64>>,
    pub model: FiniteModel,
}

pub fn potential_derivatives(
    theta: &[f64],
    h_tables: &[Table],
    marginals: &[Vec<f64>],
    opts: &IpfOptions,
) -> Result<PotentialDerivatives, FiniteError> {
    let big_h = Table::combine(theta, h_tables)?;
    let model = solve_adjusting(&big_h, marginals, opts)?;
    let k = h_tables.len();
    let reduced: Vec<Table> = h_tables.iter().map(|t| t.restrict(&model.kept)).collect();
    let grad: Vec<f64> = reduced
        .iter()
        .map(|t| t.values.iter().zip(&model.p.values).map(|(h, p)| h * p).sum())
        .collect();
    let tol = (opts.tol * 1e-2).max(1e-14);
    let mut resid = Vec::with_capacity(k);
    for t in &reduced {
        let proj = backfit_projection(t, &model.p, tol, DEFAULT_MAX_SWEEPS)?;
        let b = proj.to_table(t.shape());
        resid.push(
            t.values
                .iter()
                .zip(&b.values)
                .map(|(f, b)| f - b)
                .collect::<Vec<f64>>(),
        );
    }
    let mut fisher = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..=a {
            let v: f64 = (0..model.p.len())
                .map(|c| model.p.values[c] * resid[a][c] * resid[b][c])
                .sum();
            fisher[a][b] = v;
            fisher[b][a] = v;
        }
    }
    Ok(PotentialDerivatives {
        psi: model.psi,
        grad,
        fisher,
        model,
    })
}

/// An additive function `Σ_i b_i(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Additive {
    pub components: Vec<Vec<f64>>,
    pub sweeps: usize,
    pub residual: f64,
}

impl Additive {
    pub fn to_table(&self, shape: &[usize]) -> Table {
        let mut out = Table::zeros(shape.to_vec());
        let mut idx = vec![0; shape.len()];
        for v in out.values.iter_mut() {
            *v = idx
                .iter()
                .enumerate()
                .map(|(i, &k)| self.components[i][k])
                .sum();
            advance(&mut idx, shape);
        }
        out
    }
}

/// `L²(p)` projection of `f` onto additive functions by back-fitting.
pub fn backfit_projection(
    f: &Table,
    p: &Table,
    tol: f64,
    max_sweeps: usize,
) -> Result<Additive, FiniteError> {
    if f.shape != p.shape {
        return Err(FiniteError::Shape("f and p differ in shape".into()));
    }
    let shape = f.shape.clone();
    let d = shape.len();
    let st = strides(&shape);
    let pm: Vec<Vec<f64>> = (0..d).map(|i| p.marginal(i)).collect();
    if pm.iter().flatten().any(|v| !(*v > 0.0)) {
        return Err(FiniteError::SupportMismatch(
            "p has an empty marginal cell".into(),
        ));
    }
    let mut b: Vec<Vec<f64>> = shape.iter().map(|&m| vec![0.0; m]).collect();
    let mut r = f.values.clone();
    let mut sweeps = 0;
    let mut residual = f64::INFINITY;
    let mut acc: Vec<Vec<f64>> = shape.iter().map(|&m| vec![0.0; m]).collect();
    while sweeps < max_sweeps {
        for i in 0..d {
            let m = shape[i];
            acc[i].iter_mut().for_each(|v| *v = 0.0);
            for (cell, rv) in r.iter().enumerate() {
                acc[i][(cell / st[i]) % m] += p.values[cell] * rv;
            }
            // Conditional mean of the partial residual, b_i included.
            let delta: Vec<f64> = (0..m).map(|k| acc[i][k] / pm[i][k]).collect();
            for (bk, dk) in b[i].iter_mut().zip(&delta) {
                *bk += dk;
            }
            for (cell, rv) in r.iter_mut().enumerate() {
                *rv -= delta[(cell / st[i]) % m];
            }
        }
        sweeps += 1;
        residual = 0.0;
        for i in 0..d {
            let m = shape[i];
            acc[i].iter_mut().for_each(|v| *v = 0.0);
            for (cell, rv) in r.iter().enumerate() {
                acc[i][(cell / st[i]) % m] += p.values[cell] * rv;
            }
            residual = acc[i].iter().fold(residual, |a, v| a.max(v.abs()));
        }
        if residual <= tol {
            return Ok(Additive {
                components: b,
                sweeps,
                residual,
            });
        }
    }
    Err(FiniteError::Backfit { sweeps, residual })
}

/// Pearson correlation of the first two coordinates under `p`.
pub fn correlation(p: &Table, supports: &[Vec<f64>]) -> f64 {
    let (mut m1, mut m2) = (0.0, 0.0);
    let shape = p.shape.clone();
    let mut idx = vec![0; shape.len()];
    for v in &p.values {
        m1 += v * supports[0][idx[0]];
        m2 += v * supports[1][idx[1]];
        advance(&mut idx, &shape);
    }
    let (mut v1, mut v2, mut c) = (0.0, 0.0, 0.0);
    let mut idx = vec![0; shape.len()];
    for v in &p.values {
        let a = supports[0][idx[0]] - m1;
        let b = supports[1][idx[1]] - m2;
        v1 += v * a * a;
        v2 += v * b * b;
        c += v * a * b;
        advance(&mut idx, &shape);
    }
    c / (v1 * v2).sqrt()
}

/// Correlation of `(x₁, x₂)` under the models with `H = ∓|probe|·h`,
/// approximating the range of attainable correlations for the given
/// marginals. Returns `(at −|probe|, at +|probe|)`.
pub fn expectation_range(
    h: &Table,
    marginals: &[Vec<f64>],
    supports: &[Vec<f64>],
    probe: f64,
    opts: &IpfOptions,
) -> Result<(f64, f64), FiniteError> {
    if h.d() != 2 || supports.len() != 2 {
        return Err(FiniteError::Shape(
            "the correlation range needs two coordinates".into(),
        ));
    }
    let mut out = [0.0; 2];
    for (slot, sign) in [-1.0, 1.0].into_iter().enumerate() {
        let big_h = Table::combine(&[sign * probe.abs()], std::slice::from_ref(h))?;
        let model = solve_adjusting(&big_h, marginals, opts)?;
        let sup: Vec<Vec<f64>> = model
            .kept
            .iter()
            .zip(supports)
            .map(|(k, s)| k.iter().map(|&j| s[j]).collect())
            .collect();
        out[slot] = correlation(&model.p, &sup);
    }
    Ok((out[0], out[1]))
}

/// Kullback–Leibler divergence `Σ a log(a/b)`.
pub fn kl_divergence(a: &Table, b: &Table) -> Result<f64, FiniteError> {
    if a.shape != b.shape {
        return Err(FiniteError::SupportMismatch(format!(
            "shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let mut s = 0.0;
    for (cell, (&x, &y)) in a.values.iter().zip(&b.values).enumerate() {
        if x > 0.0 {
            if !(y > 0.0) {
                return Err(FiniteError::SupportMismatch(format!(
                    "cell {cell} has mass in the first table only"
                )));
            }
            s += x * (x / y).ln();
        }
    }
    Ok(s)
}

/// `D(p,s) − D(p,q) − D(q,s)`, which vanishes when `p, q` share marginals and
/// `q, s` share `H` up to additive terms.
pub fn pythagorean_residual(p: &Table, q: &Table, s: &Table) -> Result<f64, FiniteError> {
    Ok(kl_divergence(p, s)? - kl_divergence(p, q)? - kl_divergence(q, s)?)
}

/// Poisson probabilities on `{0, …, m−1}` for the smallest `m ≥ floor` with
/// tail mass below [`TRUNCATION_TAIL`], renormalised.
pub fn truncated_poisson(rate: f64, floor: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = Vec::new();
    let mut pk = (-rate).exp();
    let mut cum = 0.0;
    let mut k = 0usize;
    loop {
        probs.push(pk);
        cum += pk;
        k += 1;
        if k >= floor && 1.0 - cum < TRUNCATION_TAIL {
            break;
        }
        pk *= rate / k as f64;
    }
    let total: f64 = probs.iter().sum();
    let support = (0..probs.len()).map(|k| k as f64).collect();
    (support, probs.into_iter().map(|p| p / total).collect())
}

/// Poisson probabilities on `{0, …, max}`, renormalised.
pub fn poisson_on(rate: f64, max: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(max + 1);
    let mut pk = (-rate).exp();
    for k in 0..=max {
        probs.push(pk);
        pk *= rate / (k + 1) as f64;
    }
    let total: f64 = probs.iter().sum();
    probs.into_iter().map(|p| p / total).collect()
}

/// `points` equally spaced values on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| lo + step * k as f64).collect()
}

/// `N(0, σ²)` discretised on `±width·σ` with `points` nodes.
pub fn discretized_normal(sigma: f64, width: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let support = grid(-width * sigma, width * sigma, points);
    let w: Vec<f64> = support.iter().map(|x| (-0.5 * (x / sigma).powi(2)).exp()).collect();
    let total: f64 = w.iter().sum();
    (support, w.into_iter().map(|v| v / total).collect())
}

/// Weighted least-squares projection onto additive functions, used to
/// cross-check back-fitting.
#[doc(hidden)]
pub fn additive_projection_lstsq(f: &Table, p: &Table) -> Table {
    let shape = f.shape.clone();
    let cols: usize = 1 + shape.iter().map(|m| m - 1).sum::<usize>();
    let mut x = DMatrix::zeros(f.len(), cols);
    let mut y = DMatrix::zeros(f.len(), 1);
    let mut idx = vec![0; shape.len()];
    for cell in 0..f.len() {
        let w = p.values[cell].sqrt();
        x[(cell, 0)] = w;
        let mut off = 1;
        for (i, &k) in idx.iter().enumerate() {
            if k > 0 {
                x[(cell, off + k - 1)] = w;
            }
            off += shape[i] - 1;
        }
        y[(cell, 0)] = w * f.values[cell];
        advance(&mut idx, &shape);
    }
    let svd = x.clone().svd(true, true);
    let beta = svd.solve(&y, 1e-12).expect("svd solve");
    let mut out = Table::zeros(shape.clone());
    let mut idx = vec![0; shape.len()];
    for v in out.values.iter_mut() {
        let mut s = beta[(0, 0)];
        let mut off = 1;
        for (i, &k) in idx.iter().enumerate() {
            if k > 0 {
                s += beta[(off + k - 1, 0)];
            }
            off += shape[i] - 1;
        }
        *v = s;
        advance(&mut idx, &shape);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random_marginal(m: usize, rng: &mut impl Rng) -> Vec<f64> {
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    }

    fn random_table(shape: &[usize], rng: &mut impl Rng) -> Table {
        let len = shape.iter().product();
        Table::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn independence() {
        let r = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.4]];
        let m = solve_adjusting(&Table::zeros(vec![3, 2]), &r, &IpfOptions::default()).unwrap();
        assert!(m.a.iter().flatten().all(|a| a.abs() < 1e-14));
        assert!(m.psi.abs() < 1e-14);
        assert!((m.p.get(&[2, 0]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invariants_on_random_instances() {
        let mut rng = seed::rng(11);
        for _ in 0..20 {
            let shape = [4, 5, 3];
            let h = random_table(&shape, &mut rng);
            let r: Vec<Vec<f64>> = shape.iter().map(|&m| random_marginal(m, &mut rng)).collect();
            let m = solve_adjusting(&h, &r, &IpfOptions::default()).unwrap();
            assert!(m.marginal_residual() <= 1e-10);
            assert!(m.zero_mean_residual().abs() <= 1e-10);
            let dens = m.density();
            for (a, b) in dens.values().iter().zip(m.p.values()) {
                assert!((a - b).abs() <= 1e-10);
            }
            // A second run from a random start gives the same Σa_i + ψ.
            let init = shape
                .iter()
                .map(|&k| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let m2 = solve_adjusting(
                &h,
                &r,
                &IpfOptions {
                    init: Some(init),
                    ..Default::default()
                },
            )
            .unwrap();
            for (a, b) in m.additive_part().values().iter().zip(m2.additive_part().values()) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn zero_cells_are_dropped() {
        let r = vec![vec![0.5, 0.0, 0.5], vec![0.25, 0.75]];
        let h = Table::from_fn(&[vec![0.0, 1.0, 2.0], vec![0.0, 1.0]], |x| x[0] * x[1]);
        let m = solve_adjusting(&h, &r, &IpfOptions::default()).unwrap();
        assert_eq!(m.kept[0], vec![0, 2]);
        assert_eq!(m.dropped[0], vec![1]);
        assert_eq!(m.p.shape(), &[2, 2]);
        assert!(m.marginal_residual() <= 1e-10);
    }

    #[test]
    fn rejects_bad_marginals() {
        let h = Table::zeros(vec![2, 2]);
        assert!(matches!(
            solve_adjusting(&h, &[vec![0.5, 0.6], vec![0.5, 0.5]], &IpfOptions::default()),
            Err(FiniteError::InvalidMarginal { coordinate: 0, .. })
        ));
        assert!(matches!(
            solve_adjusting(&h, &[vec![0.5, 0.5], vec![1.5, -0.5]], &IpfOptions::default()),
            Err(FiniteError::InvalidMarginal { coordinate: 1, .. })
        ));
        let h = Table::new(vec![2, 2], vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(
            solve_adjusting(&h, &[vec![0.5, 0.5], vec![0.5, 0.5]], &IpfOptions::default()),
            Err(FiniteError::NonFinite(1))
        ));
    }

    #[test]
    fn non_convergence_is_reported() {
        let h = Table::from_fn(&[grid(0.0, 4.0, 5), grid(0.0, 4.0, 5)], |x| 10.0 * x[0] * x[1]);
        let r = vec![vec![0.2; 5], vec![0.2; 5]];
        let err = solve_adjusting(
            &h,
            &r,
            &IpfOptions {
                max_sweeps: 2,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, FiniteError::NonConvergence { sweeps: 2, .. }));
    }

    #[test]
    fn circular_model_has_flat_adjusting_functions() {
        let m = 64;
        let pts: Vec<f64> = (0..m).map(|k| 2.0 * std::f64::consts::PI * k as f64 / m as f64).collect();
        let theta = 1.7;
        let h = Table::from_fn(&[pts.clone(), pts.clone()], |x| theta * (x[0] - x[1]).cos());
        let r = vec![vec![1.0 / m as f64; m]; 2];
        let model = solve_adjusting(&h, &r, &IpfOptions::default()).unwrap();
        assert!(model.a.iter().flatten().all(|a| a.abs() <= 1e-8));
        let z: f64 = pts.iter().map(|u| (theta * u.cos()).exp()).sum::<f64>() / m as f64;
        assert!((model.psi - z.ln()).abs() <= 1e-6);
    }

    #[test]
    fn backfit_fixed_point_and_odd_product() {
        let mut rng = seed::rng(3);
        let p = {
            let t = random_table(&[4, 3], &mut rng);
            let w: Vec<f64> = t.values().iter().map(|v| v.exp()).collect();
            let s: f64 = w.iter().sum();
            Table::new(vec![4, 3], w.into_iter().map(|v| v / s).collect()).unwrap()
        };
        let f = Table::from_fn(&[grid(0.0, 3.0, 4), grid(0.0, 2.0, 3)], |x| x[0].powi(2) - 2.0 * x[1]);
        let b = backfit_projection(&f, &p, 1e-13, 10_000).unwrap().to_table(&[4, 3]);
        let diffs: Vec<f64> = f.values().iter().zip(b.values()).map(|(a, b)| a - b).collect();
        let spread = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - diffs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-10);

        let sup = vec![vec![-1.0, 0.0, 1.0], vec![-2.0, 2.0]];
        let p = Table::from_fn(&sup, |x| {
            let a = if x[0] == 0.0 { 0.5 } else { 0.25 };
            a * 0.5
        });
        let f = Table::from_fn(&sup, |x| x[0] * x[1]);
        let b = backfit_projection(&f, &p, 1e-14, 100).unwrap().to_table(&[3, 2]);
        assert!(b.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn backfit_matches_least_squares_and_is_orthogonal() {
        let mut rng = seed::rng(5);
        for _ in 0..5 {
            let f = random_table(&[4, 4], &mut rng);
            let raw = random_table(&[4, 4], &mut rng);
            let w: Vec<f64> = raw.values().iter().map(|v| v.exp()).collect();
            let s: f64 = w.iter().sum();
            let p = Table::new(vec![4, 4], w.into_iter().map(|v| v / s).collect()).unwrap();
            let b = backfit_projection(&f, &p, 1e-14, 100_000).unwrap().to_table(&[4, 4]);
            let oracle = additive_projection_lstsq(&f, &p);
            for (x, y) in b.values().iter().zip(oracle.values()) {
                assert!((x - y).abs() < 1e-9);
            }
            for _ in 0..20 {
                let g1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g2: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g = Table::from_fn(&[grid(0.0, 3.0, 4), grid(0.0, 3.0, 4)], |x| {
                    g1[x[0] as usize] + g2[x[1] as usize]
                });
                let inner: f64 = (0..16)
                    .map(|c| p.values()[c] * (f.values()[c] - b.values()[c]) * g.values()[c])
                    .sum();
                assert!(inner.abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = seed::rng(17);
        let shape = [5, 5];
        let tables = vec![random_table(&shape, &mut rng), random_table(&shape, &mut rng)];
        let r: Vec<Vec<f64>> = shape.iter().map(|&m| random_marginal(m, &mut rng)).collect();
        let opts = IpfOptions {
            tol: 1e-14,
            ..Default::default()
        };
        let theta = [0.6, -0.4];
        let d0 = potential_derivatives(&theta, &tables, &r, &opts).unwrap();
        let eps = 1e-4;
        for j in 0..2 {
            let mut tp = theta;
            tp[j] += eps;
            let mut tm = theta;
            tm[j] -= eps;
            let dp = potential_derivatives(&tp, &tables, &r, &opts).unwrap();
            let dm = potential_derivatives(&tm, &tables, &r, &opts).unwrap();
            let fd = (dp.psi - dm.psi) / (2.0 * eps);
            assert!((fd - d0.grad[j]).abs() <= 1e-6 * d0.grad[j].abs().max(1e-3), "{fd} {}", d0.grad[j]);
            for a in 0..2 {
                let fd = (dp.grad[a] - dm.grad[a]) / (2.0 * eps);
                let g = d0.fisher[a][j];
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-3), "{fd} {g}");
            }
        }
        // Total correlation identity.
        let m = &d0.model;
        let tc: f64 = (0..m.p.len())
            .map(|c| {
                let v = m.p.values()[c];
                let (i, j) = (c / 5, c % 5);
                v * (v / (m.marginals[0][i] * m.marginals[1][j])).ln()
            })
            .sum();
        let rhs = theta[0] * d0.grad[0] + theta[1] * d0.grad[1] - d0.psi;
        assert!((tc - rhs).abs() <= 1e-8);
    }

    #[test]
    fn gradient_at_zero_is_product_of_means() {
        let sup = vec![vec![0.0, 1.0, 3.0], vec![-1.0, 2.0]];
        let r = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.6]];
        let h = vec![Table::from_fn(&sup, |x| x[0] * x[1])];
        let d = potential_derivatives(&[0.0], &h, &r, &IpfOptions::default()).unwrap();
        let e1 = 0.5 + 0.9;
        let e2 = -0.4 + 1.2;
        assert!((d.grad[0] - e1 * e2).abs() < 1e-12);
    }

    #[test]
    fn psi_is_convex() {
        let mut rng = seed::rng(23);
        let shape = [4, 4];
        let tables = vec![random_table(&shape, &mut rng), random_table(&shape, &mut rng)];
        let r: Vec<Vec<f64>> = shape.iter().map(|&m| random_marginal(m, &mut rng)).collect();
        let psi = |t: &[f64]| {
            solve_adjusting(&Table::combine(t, &tables).unwrap(), &r, &IpfOptions::default())
                .unwrap()
                .psi
        };
        for _ in 0..10 {
            let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let b = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let l: f64 = rng.random_range(0.0..1.0);
            let mid = [l * a[0] + (1.0 - l) * b[0], l * a[1] + (1.0 - l) * b[1]];
            assert!(psi(&mid) <= l * psi(&a) + (1.0 - l) * psi(&b) + 1e-10);
        }
    }

    #[test]
    fn binary_coordinate_gives_logistic_conditional() {
        let x1 = grid(0.0, 1.0, 7);
        let sup = vec![x1.clone(), vec![0.0, 1.0]];
        let theta = [1.3, -0.7];
        let h = Table::from_fn(&sup, |x| theta[0] * x[0] * x[1] + theta[1] * x[0].powi(2) * x[1]);
        let r = vec![vec![1.0 / 7.0; 7], vec![0.3, 0.7]];
        let m = solve_adjusting(&h, &r, &IpfOptions::default()).unwrap();
        let logits: Vec<f64> = (0..7)
            .map(|k| {
                let p1 = m.p.get(&[k, 1]) / (m.p.get(&[k, 0]) + m.p.get(&[k, 1]));
                let u = theta[0] * x1[k] + theta[1] * x1[k].powi(2);
                (p1 / (1.0 - p1)).ln() - u
            })
            .collect();
        for l in &logits {
            assert!((l - logits[0]).abs() <= 1e-8);
        }
    }

    #[test]
    fn large_theta_concentrates_on_monotone_support() {
        let sup = vec![grid(0.0, 4.0, 5), grid(0.0, 4.0, 5)];
        let r = vec![vec![0.2; 5], vec![0.2; 5]];
        let mut last = 0.0;
        for theta in [1.0, 3.0, 6.0, 12.0] {
            let h = Table::from_fn(&sup, |x| theta * x[0] * x[1]);
            let opts = IpfOptions {
                tol: 1e-8,
                ..Default::default()
            };
            let m = solve_adjusting(&h, &r, &opts).unwrap();
            let diag: f64 = (0..5).map(|k| m.p.get(&[k, k])).sum();
            assert!(diag > last);
            last = diag;
        }
        assert!(last > 0.99, "{last}");
    }

    #[test]
    fn two_point_marginals_reach_extremes() {
        let sup = vec![vec![-1.0, 1.0], vec![-1.0, 1.0]];
        let h = Table::from_fn(&sup, |x| x[0] * x[1]);
        let r = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let (lo, hi) = expectation_range(&h, &r, &sup, 10.0, &IpfOptions::default()).unwrap();
        assert!((lo + 1.0).abs() < 1e-3 && (hi - 1.0).abs() < 1e-3);
    }

    #[test]
    fn pythagorean_identity() {
        let mut rng = seed::rng(29);
        let shape = [5, 5];
        let hs = random_table(&shape, &mut rng);
        let rs: Vec<Vec<f64>> = shape.iter().map(|&m| random_marginal(m, &mut rng)).collect();
        let s = solve_adjusting(&hs, &rs, &IpfOptions::default()).unwrap().p;
        let hp = random_table(&shape, &mut rng);
        let rp: Vec<Vec<f64>> = shape.iter().map(|&m| random_marginal(m, &mut rng)).collect();
        let p = solve_adjusting(&hp, &rp, &IpfOptions::default()).unwrap().p;
        let pm: Vec<Vec<f64>> = (0..2).map(|i| p.marginal(i)).collect();
        let q = solve_adjusting(&hs, &pm, &IpfOptions::default()).unwrap().p;
        assert!(pythagorean_residual(&p, &q, &s).unwrap().abs() <= 1e-8);
        assert_eq!(pythagorean_residual(&q, &q, &s).unwrap(), 0.0);
        assert_eq!(pythagorean_residual(&p, &q, &q).unwrap(), 0.0);
    }

    #[test]
    fn truncation_floor_and_tail() {
        let (s, p) = truncated_poisson(1.0, TRUNCATION_FLOOR);
        assert_eq!(s.len(), 21);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let (s, _) = truncated_poisson(30.0, TRUNCATION_FLOOR);
        assert!(s.len() > 21);
    }

    #[test]
    fn text_dump_has_header_and_cells() {
        let r = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let h = Table::from_fn(&[vec![0.0, 1.0], vec![0.0, 1.0]], |x| x[0] * x[1]);
        let m = solve_adjusting(&h, &r, &IpfOptions::default()).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# psi\t"));
        assert_eq!(text.lines().count(), 4 + 1 + 4);
    }
}
