use erasure_core::linalg::{
    apply_edit_left, basis_from_rows, erasure_operator, projector_of, select_rank, sqrt_psd,
    svd_thin, symmetric_eigen, Basis, Matrix,
};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn matrix_strategy(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

/// Random orthonormal `d x d` matrix via nalgebra QR.
fn orthogonal(d: usize, entries: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(d, d, &entries[..d * d]);
    a.qr().q()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_matches_nalgebra(m in matrix_strategy(9)) {
        let ours = svd_thin(&m).unwrap();
        let mut theirs: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let top = theirs[0].max(1e-300);
        for (k, s) in theirs.iter().enumerate() {
            if *s > 1e-10 * top {
                prop_assert!((ours.singular_values[k] - s).abs() <= 1e-9 * top);
            }
        }
        let err = ours.reconstruct().sub(&m).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-9 * m.frobenius_norm().max(1.0));
    }

    #[test]
    fn singular_vectors_are_orthonormal(m in matrix_strategy(10)) {
        let s = svd_thin(&m).unwrap();
        for f in [&s.left_vectors, &s.right_vectors] {
            let g = f.gram();
            prop_assert!(g.sub(&Matrix::identity(g.rows())).unwrap().max_abs() < 1e-10);
        }
        prop_assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn projectors_are_symmetric_and_idempotent(m in matrix_strategy(10), tau in 0.3f64..1.0) {
        prop_assume!(m.frobenius_norm() > 1e-6);
        let b = basis_from_rows(&m, tau).unwrap();
        prop_assert!(b.explained_variance >= tau - 1e-12);
        let p = projector_of(&b).unwrap().matrix;
        prop_assert!(p.sub(&p.transpose()).unwrap().max_abs() < 1e-12);
        prop_assert!(p.matmul(&p).unwrap().sub(&p).unwrap().max_abs() < 1e-10);
        prop_assert!((p.trace() - b.rank() as f64).abs() < 1e-9);
    }

    #[test]
    fn rank_is_the_first_crossing(e in prop::collection::vec(0.0f64..10.0, 1..20), tau in 0.01f64..1.0) {
        let mut e = e;
        e.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(e[0] > 0.0);
        let k = select_rank(&e, tau);
        let total: f64 = e.iter().sum();
        prop_assert!(e[..k].iter().sum::<f64>() >= tau * total || k == e.len());
        if k > 1 {
            prop_assert!(e[..k - 1].iter().sum::<f64>() < tau * total);
        }
    }

    #[test]
    fn erasure_fixes_retain_and_kills_exclusive_forget(
        d in 4usize..12,
        entries in prop::collection::vec(-1.0f64..1.0, 144),
        split in 0.2f64..0.8,
        mix in -1.0f64..1.0,
    ) {
        let q = orthogonal(d, &entries);
        let r = ((d as f64 * split) as usize).clamp(1, d - 2);
        let f = (d - r).min(3);
        let retain = from_na(&q.columns(0, r).into_owned());
        // Forget span: f directions orthogonal to retain plus one tilted into it.
        let mut forget_cols = q.columns(r, f).into_owned();
        let tilted = (q.column(r) + q.column(0) * mix).normalize();
        forget_cols.set_column(0, &tilted);
        let forget = from_na(&forget_cols.qr().q().columns(0, f).into_owned());
        let pf = projector_of(&Basis::from_columns(forget, 1.0)).unwrap();
        let pr = projector_of(&Basis::from_columns(retain.clone(), 1.0)).unwrap();
        let e = erasure_operator(&pf, Some(&pr)).unwrap();
        for j in 0..r {
            let x = retain.column(j);
            let y = e.apply(&x).unwrap();
            let diff: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-9);
        }
        for j in r + 1..r + f {
            let x: Vec<f64> = q.column(j).iter().copied().collect();
            let y = e.apply(&x).unwrap();
            prop_assert!(y.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9);
        }
    }

    #[test]
    fn left_edit_preserves_shape(d in 2usize..8, c in 1usize..8, entries in prop::collection::vec(-1.0f64..1.0, 64)) {
        let w = Matrix::from_fn(d, c, |i, j| entries[i * 8 + j]);
        let basis = Basis::from_columns(Matrix::from_fn(d, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }), 1.0);
        let e = erasure_operator(&projector_of(&basis).unwrap(), None).unwrap();
        let out = apply_edit_left(&e, &w).unwrap();
        prop_assert_eq!(out.shape(), w.shape());
        prop_assert!(out.row(0).iter().all(|v| v.abs() < 1e-15));
        for i in 1..d {
            prop_assert_eq!(out.row(i), w.row(i));
        }
    }

    #[test]
    fn eigen_matches_nalgebra(m in matrix_strategy(8)) {
        let s = m.gram();
        let ours = symmetric_eigen(&s).unwrap();
        let mut theirs: Vec<f64> = to_na(&s).symmetric_eigenvalues().iter().copied().collect();
        theirs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut mine = ours.values.clone();
        mine.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let scale = theirs[0].abs().max(1.0);
        for (a, b) in mine.iter().zip(&theirs) {
            prop_assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn psd_square_root_squares_back(m in matrix_strategy(8)) {
        let s = m.gram();
        let r = sqrt_psd(&s).unwrap();
        let back = r.matmul(&r).unwrap();
        prop_assert!(back.sub(&s).unwrap().max_abs() <= 1e-8 * s.max_abs().max(1.0));
    }
}
