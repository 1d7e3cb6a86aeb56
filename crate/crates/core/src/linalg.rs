//! Small dense helpers for the 1x1 / 2x2 symmetric matrices that appear at
//! every grid node. Larger sizes fall back to nalgebra's decompositions.

use nalgebra::{DMatrix, DVector};

/// Replace `m` by (m + mᵀ)/2 in place. Exact for already-symmetric input.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    match m.nrows() {
        0 => Vec::new(),
        1 => vec![m[(0, 0)]],
        2 => {
            let a = m[(0, 0)];
            let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            let d = m[(1, 1)];
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mean - rad, mean + rad]
        }
        _ => {
            let eig = m.clone().symmetric_eigen();
            let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v
        }
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(f64::NAN)
}

/// Operator norm of a symmetric matrix: the largest eigenvalue magnitude.
pub fn sym_operator_norm(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)
        .into_iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs()))
}

pub fn det(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => m.determinant(),
    }
}

pub fn inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match m.nrows() {
        1 => {
            let a = m[(0, 0)];
            (a != 0.0 && a.is_finite()).then(|| DMatrix::from_element(1, 1, 1.0 / a))
        }
        2 => {
            let d = det(m);
            if d == 0.0 || !d.is_finite() {
                return None;
            }
            Some(DMatrix::from_row_slice(
                2,
                2,
                &[m[(1, 1)] / d, -m[(0, 1)] / d, -m[(1, 0)] / d, m[(0, 0)] / d],
            ))
        }
        _ => m.clone().try_inverse(),
    }
}

pub fn dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_diag() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        assert_eq!(sym_eigenvalues(&m), vec![2.0, 4.0]);
        assert_eq!(sym_operator_norm(&m), 4.0);
        let inv = inverse(&m).unwrap();
        assert_eq!(inv[(0, 0)], 0.5);
        assert_eq!(inv[(1, 1)], 0.25);
    }

    #[test]
    fn eigenvalues_match_nalgebra() {
        let m = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, -0.4, 0.7]);
        let ours = sym_eigenvalues(&m);
        let mut theirs: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| a.total_cmp(b));
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
