use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Nonincreasing.
    pub values: Vec<f64>,
    /// Columns are the matching unit eigenvectors.
    pub vectors: Matrix,
}

/// Cyclic two-sided Jacobi eigensolver. The input is symmetrized as
/// `(A + Aᵀ)/2` before iterating.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::DimError(format!(
            "eigendecomposition of non-square {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidMatrix("non-finite entries".into()));
    }
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let scale: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum::<f64>() + off;
        if off <= f64::EPSILON * f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen { values, vectors })
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Negative eigenvalues from round-off are clamped to zero.
pub fn sqrt_psd(a: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(a)?;
    let n = a.rows();
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in eig.values.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = eig.vectors[(i, k)] * s;
            for j in 0..n {
                out[(i, j)] += vi * eig.vectors[(j, k)];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix() {
        let eig = symmetric_eigen(&Matrix::from_diag(&[1.0, 5.0, 3.0])).unwrap();
        assert_eq!(eig.values, vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn reconstructs_symmetric_input() {
        let a = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, -1.0], [0.5, -1.0, 2.0]]).unwrap();
        let eig = symmetric_eigen(&a).unwrap();
        let d = Matrix::from_diag(&eig.values);
        let back = eig
            .vectors
            .matmul(&d)
            .unwrap()
            .matmul(&eig.vectors.transpose())
            .unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let r = sqrt_psd(&a).unwrap();
        let sq = r.matmul(&r).unwrap();
        assert!(sq.sub(&a).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn sqrt_clamps_negative_round_off() {
        let a = Matrix::from_diag(&[4.0, -1e-18]);
        let r = sqrt_psd(&a).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
        assert!((r[(0, 0)] - 2.0).abs() < 1e-15);
    }
}
