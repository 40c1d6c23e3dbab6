//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The taller orientation is always factored: a wide input is transposed and
//! the factors swapped afterwards. Columns are rotated pairwise until every
//! pair is orthogonal to working precision relative to the column norms,
//! which gives singular values with high relative accuracy at the small sizes
//! this crate works with.

use crate::error::{Error, Result};
use crate::linalg::matrix::{dot, Matrix};

/// Singular values at or below this fraction of the largest are dropped.
pub const ZERO_MODE_CUTOFF: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m x r, orthonormal columns.
    pub left_vectors: Matrix,
    /// Nonincreasing, strictly positive, length r.
    pub singular_values: Vec<f64>,
    /// n x r, orthonormal columns (the right singular vectors).
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.left_vectors.rows();
        let n = self.right_vectors.rows();
        let mut out = Matrix::zeros(m, n);
        for (k, &s) in self.singular_values.iter().enumerate() {
            for i in 0..m {
                let u = self.left_vectors[(i, k)] * s;
                if u == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += u * self.right_vectors[(j, k)];
                }
            }
        }
        out
    }
}

pub fn svd_thin(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidMatrix(format!(
            "svd of empty {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::InvalidMatrix("svd input has non-finite entries".into()));
    }

    let (left, sigma, right) = if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose());
        (v, s, u)
    };

    let mut result = SvdResult {
        left_vectors: left,
        singular_values: sigma,
        right_vectors: right,
    };
    fix_signs(&mut result);
    Ok(result)
}

/// Factors a matrix with rows >= cols. Returns (U, S, V) with zero modes
/// already removed and values sorted nonincreasing.
fn jacobi_tall(a: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
    let m = a.rows();
    let n = a.cols();
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * (m as f64).sqrt().max(1.0);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let sigma_max = order.first().map(|o| o.1).unwrap_or(0.0);
    let kept: Vec<(usize, f64)> = order
        .into_iter()
        .filter(|&(_, s)| sigma_max > 0.0 && s > ZERO_MODE_CUTOFF * sigma_max)
        .collect();

    let r = kept.len();
    let mut u_out = Matrix::zeros(m, r);
    let mut v_out = Matrix::zeros(n, r);
    let mut sigma = Vec::with_capacity(r);
    for (k, &(j, s)) in kept.iter().enumerate() {
        let u: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
        u_out.set_column(k, &u);
        v_out.set_column(k, &v[j]);
        sigma.push(s);
    }
    (u_out, sigma, v_out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Makes the largest-magnitude entry of every right singular vector positive,
/// flipping the paired left vector with it.
fn fix_signs(svd: &mut SvdResult) {
    let n = svd.right_vectors.rows();
    let m = svd.left_vectors.rows();
    for k in 0..svd.rank() {
        let mut best = 0;
        for i in 1..n {
            if svd.right_vectors[(i, k)].abs() > svd.right_vectors[(best, k)].abs() {
                best = i;
            }
        }
        if svd.right_vectors[(best, k)] < 0.0 {
            for i in 0..n {
                svd.right_vectors[(i, k)] = -svd.right_vectors[(i, k)];
            }
            for i in 0..m {
                svd.left_vectors[(i, k)] = -svd.left_vectors[(i, k)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.gram();
        g.sub(&Matrix::identity(g.rows())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let svd = svd_thin(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.singular_values, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_drops_zero_mode() {
        let svd = svd_thin(&Matrix::from_diag(&[3.0, 2.0, 0.0])).unwrap();
        assert_eq!(svd.rank(), 2);
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-15);
        assert!((svd.singular_values[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn wide_input_reconstructs() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [2.0, -1.0, 0.5, 0.0]]).unwrap();
        let svd = svd_thin(&m).unwrap();
        assert_eq!(svd.left_vectors.shape(), (2, 2));
        assert_eq!(svd.right_vectors.shape(), (4, 2));
        let err = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(err <= 1e-12 * m.frobenius_norm());
        assert!(orthonormality_error(&svd.left_vectors) < 1e-12);
        assert!(orthonormality_error(&svd.right_vectors) < 1e-12);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let svd = svd_thin(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(svd.rank(), 0);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        let mut m = Matrix::identity(2);
        m[(0, 1)] = f64::INFINITY;
        assert!(matches!(svd_thin(&m), Err(Error::InvalidMatrix(_))));
        assert!(matches!(svd_thin(&Matrix::zeros(0, 3)), Err(Error::InvalidMatrix(_))));
    }

    #[test]
    fn sign_convention_is_applied() {
        let m = Matrix::from_rows(&[[-5.0, 0.1], [0.2, -3.0], [0.0, 0.0]]).unwrap();
        let svd = svd_thin(&m).unwrap();
        for k in 0..svd.rank() {
            let col = svd.right_vectors.column(k);
            let big = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
    }
}
