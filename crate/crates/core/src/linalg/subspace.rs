//! Bases, orthogonal projectors and the erasure operator built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::matrix::Matrix;
use crate::linalg::svd::svd_thin;

/// Tolerance used when checking that a basis has orthonormal columns.
pub const ORTHONORMAL_TOL: f64 = 1e-6;

/// Orthonormal columns spanning a subspace of `ℝ^dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub dim: usize,
    /// dim x k
    pub vectors: Matrix,
    /// Fraction of squared singular mass captured by the kept directions.
    pub explained_variance: f64,
}

impl Basis {
    /// Wraps columns without checking orthonormality; [`projector_of`]
    /// performs the check.
    pub fn from_columns(vectors: Matrix, explained_variance: f64) -> Self {
        Self {
            dim: vectors.rows(),
            vectors,
            explained_variance,
        }
    }

    pub fn rank(&self) -> usize {
        self.vectors.cols()
    }

    /// Coordinates of every row of `x` in this basis (`x · V`).
    pub fn project_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim {
            return Err(Error::DimError(format!(
                "rows of width {} projected onto a basis in dimension {}",
                x.cols(),
                self.dim
            )));
        }
        x.matmul(&self.vectors)
    }

    /// Largest deviation of `VᵀV` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.vectors.gram();
        g.sub(&Matrix::identity(g.rows())).map(|d| d.max_abs()).unwrap_or(f64::INFINITY)
    }
}

/// Smallest `k` whose leading squared singular values reach `tau` of the
/// total. `energies` must be nonincreasing.
pub fn select_rank(energies: &[f64], tau: f64) -> usize {
    let total: f64 = energies.iter().sum();
    let target = tau * total;
    let mut cum = 0.0;
    for (i, e) in energies.iter().enumerate() {
        cum += e;
        if cum >= target {
            return i + 1;
        }
    }
    energies.len()
}

/// Top right singular vectors of the stacked rows `h`, up to cumulative
/// variance `tau`. Rows are used as given, without centering.
pub fn basis_from_rows(h: &Matrix, tau: f64) -> Result<Basis> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidThreshold(tau));
    }
    let svd = svd_thin(h)?;
    if svd.rank() == 0 {
        return Err(Error::DegenerateInput(format!(
            "{}x{} feature matrix is numerically zero",
            h.rows(),
            h.cols()
        )));
    }
    let energies: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let k = select_rank(&energies, tau);
    let total: f64 = energies.iter().sum();
    let kept: f64 = energies[..k].iter().sum();
    let vectors = Matrix::from_fn(h.cols(), k, |i, j| svd.right_vectors[(i, j)]);
    Ok(Basis {
        dim: h.cols(),
        vectors,
        explained_variance: (kept / total).min(1.0),
    })
}

/// Orthogonal projector `P = V Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub dim: usize,
    pub matrix: Matrix,
}

impl Projector {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            matrix: Matrix::zeros(dim, dim),
        }
    }

    pub fn rank(&self) -> usize {
        self.matrix.trace().round().max(0.0) as usize
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(x)
    }
}

pub fn projector_of(b: &Basis) -> Result<Projector> {
    if b.vectors.rows() != b.dim {
        return Err(Error::InvalidBasis(format!(
            "basis declares dim {} but vectors have {} rows",
            b.dim,
            b.vectors.rows()
        )));
    }
    let err = b.orthonormality_error();
    if err > ORTHONORMAL_TOL {
        return Err(Error::InvalidBasis(format!(
            "columns deviate from orthonormal by {err:.3e}"
        )));
    }
    let matrix = b.vectors.matmul_t(&b.vectors)?;
    Ok(Projector { dim: b.dim, matrix })
}

/// `E = I − P_F (I − P_R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureOperator {
    pub dim: usize,
    pub matrix: Matrix,
    pub forget_rank: usize,
    pub retain_rank: usize,
}

impl ErasureOperator {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            matrix: Matrix::identity(dim),
            forget_rank: 0,
            retain_rank: 0,
        }
    }

    /// `‖E − I‖_F`.
    pub fn distance_from_identity(&self) -> f64 {
        self.matrix
            .sub(&Matrix::identity(self.dim))
            .map(|d| d.frobenius_norm())
            .unwrap_or(f64::NAN)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.matvec(x)
    }
}

pub fn erasure_operator(p_f: &Projector, p_r: Option<&Projector>) -> Result<ErasureOperator> {
    let d = p_f.dim;
    let identity = Matrix::identity(d);
    let (matrix, retain_rank) = match p_r {
        None => (identity.sub(&p_f.matrix)?, 0),
        Some(p_r) => {
            if p_r.dim != d {
                return Err(Error::DimError(format!(
                    "forget projector in dimension {d}, retain projector in {}",
                    p_r.dim
                )));
            }
            let complement = identity.sub(&p_r.matrix)?;
            (identity.sub(&p_f.matrix.matmul(&complement)?)?, p_r.rank())
        }
    };
    Ok(ErasureOperator {
        dim: d,
        matrix,
        forget_rank: p_f.rank(),
        retain_rank,
    })
}

/// `E · W`, the activation-space edit of a `(d x d_e)` projection.
pub fn apply_edit_left(e: &ErasureOperator, w: &Matrix) -> Result<Matrix> {
    if e.dim != w.rows() {
        return Err(Error::DimError(format!(
            "left edit of dimension {} on a {}x{} weight",
            e.dim,
            w.rows(),
            w.cols()
        )));
    }
    e.matrix.matmul(w)
}

/// `W · E`, the text-space edit acting on the input side of the projection.
pub fn apply_edit_right(w: &Matrix, e_text: &ErasureOperator) -> Result<Matrix> {
    if e_text.dim != w.cols() {
        return Err(Error::DimError(format!(
            "right edit of dimension {} on a {}x{} weight",
            e_text.dim,
            w.rows(),
            w.cols()
        )));
    }
    w.matmul(&e_text.matrix)
}

/// Smallest principal angle between two subspaces, in degrees.
pub fn min_principal_angle_deg(a: &Basis, b: &Basis) -> Result<f64> {
    let cross = a.vectors.transpose().matmul(&b.vectors)?;
    let svd = svd_thin(&cross)?;
    let cos = svd.singular_values.first().copied().unwrap_or(0.0).clamp(0.0, 1.0);
    Ok(cos.acos().to_degrees())
}
