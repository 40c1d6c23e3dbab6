//! Dense linear algebra: thin SVD, symmetric eigendecomposition, bases,
//! orthogonal projectors and the erasure operator.

mod eigen;
mod matrix;
mod subspace;
mod svd;

pub use eigen::{sqrt_psd, symmetric_eigen, SymmetricEigen};
pub use matrix::{cosine, dot, norm, Matrix};
pub use subspace::{
    apply_edit_left, apply_edit_right, basis_from_rows, erasure_operator,
    min_principal_angle_deg, projector_of, select_rank, Basis, ErasureOperator, Projector,
    ORTHONORMAL_TOL,
};
pub use svd::{svd_thin, SvdResult, ZERO_MODE_CUTOFF};
