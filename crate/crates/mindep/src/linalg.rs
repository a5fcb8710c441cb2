use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue floor applied when inverting information matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Inverse of a symmetric PSD matrix through its eigendecomposition, with
/// eigenvalues floored at `EIGEN_FLOOR · trace / K`. The second value is the
/// number of floored eigenvalues. `None` when the trace is not positive.
pub fn floored_inverse(m: &DMatrix<f64>) -> Option<(DMatrix<f64>, usize)> {
    let k = m.nrows();
    let trace = m.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return None;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = EIGEN_FLOOR * trace / k as f64;
    let mut floored = 0;
    let inv_vals = eig.eigenvalues.map(|l| {
        if l < floor {
            floored += 1;
            1.0 / floor
        } else {
            1.0 / l
        }
    });
    let v = &eig.eigenvectors;
    let inv = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Some((symmetrize(inv), floored))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Numerical rank of a symmetric PSD matrix relative to its largest eigenvalue.
pub fn psd_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let eig = SymmetricEigen::new(symmetrize(m.clone()));
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l > rel_tol * max).count()
}

#[cfg(test)]
/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m.clone()))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().cloned().collect()
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_well_conditioned_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let (inv, floored) = floored_inverse(&m).unwrap();
        assert_eq!(floored, 0);
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_floored() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (inv, floored) = floored_inverse(&m).unwrap();
        assert_eq!(floored, 1);
        assert!(inv.iter().all(|x| x.is_finite()));
        assert_eq!(psd_rank(&m, 1e-12), 1);
        assert!(floored_inverse(&DMatrix::zeros(2, 2)).is_none());
    }
}
