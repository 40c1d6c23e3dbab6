use crate::error::{Error, Result};
use crate::linalg::Matrix;

fn check_shapes(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<()> {
    let d = q.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::DimError(format!("width {d} not divisible into {heads} heads")));
    }
    if k.cols() != d || v.cols() != d {
        return Err(Error::DimError(format!(
            "query width {d}, key width {}, value width {}",
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::DimError(format!(
            "{} keys against {} values",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// Softmax attention weights for every head: `heads` matrices of shape
/// `queries x tokens`, scaled by `1/√(d/heads)`.
pub fn attention_weights(q: &Matrix, k: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    check_shapes(q, k, k, heads)?;
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = k.rows();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w = Matrix::zeros(q.rows(), n);
        for i in 0..q.rows() {
            let qi = &q.row(i)[cols.clone()];
            let row = w.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        out.push(w);
    }
    Ok(out)
}

/// Multi-head scaled dot-product cross-attention. `q` is `S x d`, `k` and
/// `v` are `tokens x d`; the result is `S x d` with heads concatenated and no
/// output projection applied.
pub fn cross_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    check_shapes(q, k, v, heads)?;
    let weights = attention_weights(q, k, heads)?;
    let d = q.cols();
    let dh = d / heads;
    let mut out = Matrix::zeros(q.rows(), d);
    for (h, w) in weights.iter().enumerate() {
        for i in 0..q.rows() {
            let wi = w.row(i);
            let oi = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &a) in wi.iter().enumerate() {
                let vj = &v.row(j)[h * dh..(h + 1) * dh];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += a * x;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_returns_its_value() {
        let q = Matrix::from_fn(5, 8, |i, j| (i as f64 - j as f64) * 0.3);
        let k = Matrix::from_fn(1, 8, |_, j| j as f64 * 0.1);
        let v = Matrix::from_fn(1, 8, |_, j| j as f64 - 2.5);
        let out = cross_attention(&q, &k, &v, 2).unwrap();
        for i in 0..5 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn duplicate_keys_average_values() {
        let q = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.17);
        let k = Matrix::from_rows(&[[0.2, -0.1, 0.4, 0.3], [0.2, -0.1, 0.4, 0.3]]).unwrap();
        let v = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 1.0, 0.0]]).unwrap();
        let out = cross_attention(&q, &k, &v, 2).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[0.0, 1.0, 2.0, 2.0]);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let q = Matrix::from_fn(6, 8, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let k = Matrix::from_fn(4, 8, |i, j| ((i + j) % 3) as f64);
        for w in attention_weights(&q, &k, 4).unwrap() {
            for i in 0..w.rows() {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Matrix::zeros(2, 6);
        let k = Matrix::zeros(3, 6);
        assert!(cross_attention(&q, &k, &k, 4).is_err());
        assert!(cross_attention(&q, &Matrix::zeros(3, 4), &k, 2).is_err());
        assert!(cross_attention(&q, &k, &Matrix::zeros(2, 6), 2).is_err());
        assert!(cross_attention(&q, &Matrix::zeros(0, 6), &Matrix::zeros(0, 6), 2).is_err());
    }
}
