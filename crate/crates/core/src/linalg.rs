//! Dense helpers shared by the Gaussian algebra and the variational fit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter rungs tried in order before a factorization is declared
/// failed.
pub const JITTER_LADDER: [f64; 4] = [1e-6, 1e-5, 1e-4, 1e-3];

/// Lower Cholesky factor together with the absolute diagonal jitter that was
/// needed to obtain it.
#[derive(Debug, Clone)]
pub struct Factor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

/// Factorizes `a + jitter * I`, walking the jitter ladder (relative to
/// `scale`). With `try_exact` the matrix is first attempted as given.
pub fn cholesky_ladder(a: &DMatrix<f64>, scale: f64, try_exact: bool) -> Result<Factor> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cholesky of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(Factor {
            l: DMatrix::zeros(0, 0),
            jitter: 0.0,
        });
    }
    let scale = if scale.is_finite() && scale > 0.0 {
        scale
    } else {
        1.0
    };
    let exact = if try_exact { Some(0.0) } else { None };
    for jitter in exact
        .into_iter()
        .chain(JITTER_LADDER.iter().map(|r| r * scale))
    {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(ch) = m.cholesky() {
            let l = ch.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok(Factor { l, jitter });
            }
        }
    }
    Err(Error::Numerical(format!(
        "cholesky failed for {}x{} matrix after jitter {:e}",
        a.nrows(),
        a.ncols(),
        JITTER_LADDER[JITTER_LADDER.len() - 1] * scale
    )))
}

/// Inverse of a lower-triangular matrix by column-oriented forward
/// substitution (contiguous column updates).
pub fn lower_triangular_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    let ls = l.as_slice();
    let mut x = vec![0.0; n];
    for j in 0..n {
        x[j..].iter_mut().for_each(|v| *v = 0.0);
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / ls[k * n + k];
            x[k] = xk;
            if xk != 0.0 {
                let col = &ls[k * n + k + 1..(k + 1) * n];
                for (xi, lik) in x[k + 1..].iter_mut().zip(col) {
                    *xi -= xk * lik;
                }
            }
        }
        inv.column_mut(j).rows_mut(j, n - j).copy_from_slice(&x[j..]);
    }
    inv
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with non-zero diagonal")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor with non-zero diagonal")
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_upper_transpose_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor with non-zero diagonal")
}

/// Zeroes the strict upper triangle in place.
pub fn tril_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 1..m.ncols() {
        for i in 0..j.min(n) {
            m[(i, j)] = 0.0;
        }
    }
}

/// `0.5 * (m + m^T)`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn log_det_from_factor(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangular_inverse_matches_solve() {
        let a = DMatrix::from_fn(6, 6, |i, j| ((i * 5 + j * 3) % 7) as f64 / 7.0);
        let spd = &a * a.transpose() + DMatrix::identity(6, 6);
        let l = spd.cholesky().unwrap().unpack();
        let inv = lower_triangular_inverse(&l);
        let reference = solve_lower(&l, &DMatrix::identity(6, 6));
        assert!((inv - reference).amax() < 1e-12);
    }

    #[test]
    fn ladder_rescues_singular_matrix() {
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let rank_one = &v * v.transpose();
        let f = cholesky_ladder(&rank_one, 1.0, true).unwrap();
        assert!(f.jitter > 0.0);
    }

    #[test]
    fn ladder_gives_up_on_indefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            cholesky_ladder(&m, 1.0, true),
            Err(Error::Numerical(_))
        ));
    }
}
