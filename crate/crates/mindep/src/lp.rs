//! Interior-point certificate: is the origin in the interior of the convex cone
//! spanned by a set of vectors? This decides existence of both the
//! pseudo-likelihood estimate (vectors = pair statistics) and the conditional
//! likelihood estimate (vectors = observed minus alternative sufficient
//! statistics).

use microlp::{ComparisonOp, OptimizationDirection, Problem};

use crate::linalg;
use nalgebra::DMatrix;

/// The optimum is 0 or 1; anything above this counts as 1.
const POSITIVE_TOL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interiority {
    /// Some strictly positive combination of all vectors vanishes and the
    /// vectors span the space: the estimate exists and is unique.
    Interior,
    /// A direction `v ≠ 0` has `vᵀu ≥ 0` for every vector: separation.
    Boundary,
    /// The vectors do not span the space, so the parameter is not identified.
    Degenerate,
}

/// Rescaled, deduplicated nonzero vectors and the per-component scale, or
/// `None` when the vectors do not span ℝᴷ.
fn prepare(vectors: &[Vec<f64>], k: usize) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    // Rescale each component so the LP is well conditioned.
    let mut scale = vec![0.0f64; k];
    for u in vectors {
        for (s, x) in scale.iter_mut().zip(u) {
            *s = s.max(x.abs());
        }
    }
    if scale.iter().any(|&s| s == 0.0) {
        return None;
    }
    let mut rows: Vec<Vec<f64>> = vectors
        .iter()
        .map(|u| u.iter().zip(&scale).map(|(x, s)| x / s).collect::<Vec<f64>>())
        .filter(|u: &Vec<f64>| u.iter().any(|x| x.abs() > 1e-13))
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rows.dedup();
    if rows.is_empty() {
        return None;
    }
    let mut gram = DMatrix::zeros(k, k);
    for u in &rows {
        for a in 0..k {
            for b in 0..k {
                gram[(a, b)] += u[a] * u[b];
            }
        }
    }
    if linalg::psd_rank(&gram, 1e-12) < k {
        return None;
    }
    Some((rows, scale))
}

/// Decides whether 0 lies in the interior of cone(`vectors`) in ℝᴷ.
pub fn interiority(vectors: &[Vec<f64>], k: usize) -> Result<Interiority, String> {
    let Some((rows, _)) = prepare(vectors, k) else {
        return Ok(Interiority::Degenerate);
    };

    // Weights λ_u = t + μ_u ≥ t with Σ λ_u u = 0. The problem is homogeneous,
    // so the optimum is t = 1 when a strictly positive combination exists
    // and t = 0 otherwise.
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let t = lp.add_var(1.0, (0.0, 1.0));
    let mu: Vec<_> = rows.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    for j in 0..k {
        let total: f64 = rows.iter().map(|u| u[j]).sum();
        let mut expr: Vec<(microlp::Variable, f64)> = vec![(t, total)];
        expr.extend(
            rows.iter()
                .zip(&mu)
                .filter(|(u, _)| u[j] != 0.0)
                .map(|(u, &v)| (v, u[j])),
        );
        lp.add_constraint(expr, ComparisonOp::Eq, 0.0);
    }

    let sol = lp
        .solve()
        .map_err(|e| format!("interiority LP failed: {e}"))?
        .into_solution()
        .map_err(|_| "interiority LP interrupted".to_string())?;
    Ok(if sol.objective() > POSITIVE_TOL {
        Interiority::Interior
    } else {
        Interiority::Boundary
    })
}

/// A unit vector `v` with `vᵀu ≥ 0` for every vector and `vᵀu > 0` for at
/// least one, when 0 is not interior to the cone. Such a `v` exists exactly in
/// the [`Interiority::Boundary`] case.
pub fn separating_direction(vectors: &[Vec<f64>], k: usize) -> Result<Option<Vec<f64>>, String> {
    let Some((rows, scale)) = prepare(vectors, k) else {
        return Ok(None);
    };
    // max Σ_u vᵀu subject to vᵀu ≥ 0 and −1 ≤ v ≤ 1.
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let v: Vec<_> = (0..k)
        .map(|j| lp.add_var(rows.iter().map(|u| u[j]).sum(), (-1.0, 1.0)))
        .collect();
    for u in &rows {
        let expr: Vec<(microlp::Variable, f64)> = v
            .iter()
            .zip(u)
            .filter(|(_, &x)| x != 0.0)
            .map(|(&var, &x)| (var, x))
            .collect();
        lp.add_constraint(expr, ComparisonOp::Ge, 0.0);
    }
    let sol = lp
        .solve()
        .map_err(|e| format!("separation LP failed: {e}"))?
        .into_solution()
        .map_err(|_| "separation LP interrupted".to_string())?;
    if sol.objective() <= 1e-9 {
        return Ok(None);
    }
    // Back to the original coordinates: (v/s)ᵀu = vᵀ(u/s).
    let dir: Vec<f64> = v.iter().zip(&scale).map(|(&var, s)| sol[var] / s).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(Some(dir.into_iter().map(|x| x / norm).collect()))
}
