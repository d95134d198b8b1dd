//! Dense symmetric eigendecomposition by the cyclic Jacobi method.
//!
//! The general-purpose QR-based solver can return inaccurate eigenvectors
//! when the spectrum contains tight clusters of repeated eigenvalues,
//! which is the common case for projector-like matrices (spectra of 0s
//! and 1s). Jacobi rotations converge to machine precision regardless of
//! degeneracy, at a modest constant-factor cost that is irrelevant for
//! the matrix sizes used here.

use nalgebra::{DMatrix, DVector};

/// Eigendecomposition of a symmetric matrix: returns `(eigenvalues,
/// eigenvectors)` with eigenvalues sorted ascending and eigenvectors in
/// the matching columns, so that `m = v * diag(vals) * v^T`.
pub fn sym_eig(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let mut a = m.clone();
    let mut v = DMatrix::identity(n, n);
    let scale = a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);

    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off < 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-18 * scale {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vals[col] = a[(k, k)];
        vecs.set_column(col, &v.column(k));
    }
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstructs_random_symmetric_matrix() {
        let n = 8;
        let raw = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5);
        let m = &raw + raw.transpose();
        let (vals, vecs) = sym_eig(&m);
        let rec = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((rec - &m).abs().max() < 1e-12);
        let gram = vecs.transpose() * &vecs;
        assert!((gram - DMatrix::identity(n, n)).abs().max() < 1e-12);
        for k in 1..n {
            assert!(vals[k] >= vals[k - 1]);
        }
    }

    #[test]
    fn handles_degenerate_projector_spectrum() {
        // Rank-3 projector plus two fractional directions: the repeated
        // unit eigenvalues are exactly the case the QR solver mishandles.
        let n = 5;
        let q = {
            let raw = DMatrix::from_fn(n, n, |i, j| (1.0 + (i * 7 + j * 3) as f64).sin());
            let m = &raw + raw.transpose();
            sym_eig(&m).1
        };
        let vals = DVector::from_vec(vec![0.526, 0.566, 1.0, 1.0, 1.0]);
        let m = &q * DMatrix::from_diagonal(&vals) * q.transpose();
        let (got_vals, got_vecs) = sym_eig(&m);
        let rec = &got_vecs * DMatrix::from_diagonal(&got_vals) * got_vecs.transpose();
        assert!((rec - &m).abs().max() < 1e-13);
        for (a, b) in got_vals.iter().zip(vals.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
