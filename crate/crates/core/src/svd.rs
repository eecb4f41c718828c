//! Small dense routines for spectral analysis of low-rank updates.
//!
//! Singular values of `A * B` (A: in x r, B: r x out) equal those of
//! `R_A * R_B^T`, where R_A and R_B come from thin QR factorizations of A and
//! B^T. Working on that r x r core keeps full-size audits cheap: the large
//! dimensions only enter through two skinny QR passes.

use crate::error::{Error, Result};
use crate::tensor::matmul_raw;

/// Upper-triangular R factor (cols x cols) of a thin QR of `a` (rows x cols,
/// rows >= cols), via Householder reflections on a working copy.
pub fn thin_qr_r(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows < cols {
        return Err(Error::Numeric(format!(
            "thin_qr_r expects a tall matrix, got {rows}x{cols}"
        )));
    }
    let mut w = a.to_vec();
    let mut v = vec![0.0; rows];
    for j in 0..cols {
        // Householder vector for column j below the diagonal.
        let mut norm2 = 0.0;
        for i in j..rows {
            let x = w[i * cols + j];
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = w[j * cols + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut vnorm2 = 0.0;
        for i in j..rows {
            let x = w[i * cols + j];
            v[i] = if i == j { x - alpha } else { x };
            vnorm2 += v[i] * v[i];
        }
        if vnorm2 == 0.0 {
            continue;
        }
        // Apply I - 2 v v^T / (v^T v) to the remaining columns.
        for c in j..cols {
            let mut dot = 0.0;
            for i in j..rows {
                dot += v[i] * w[i * cols + c];
            }
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                w[i * cols + c] -= f * v[i];
            }
        }
    }
    let mut r = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in i..cols {
            r[i * cols + j] = w[i * cols + j];
        }
    }
    Ok(r)
}

/// Singular values of a square matrix via one-sided Jacobi rotations:
/// orthogonalize column pairs until the Gram matrix is diagonal; the
/// singular values are the resulting column norms, sorted descending.
pub fn jacobi_singular_values(m: &[f64], n: usize) -> Result<Vec<f64>> {
    const MAX_SWEEPS: usize = 64;
    const TOL: f64 = 1e-14;
    if n == 0 {
        return Ok(Vec::new());
    }
    debug_assert_eq!(m.len(), n * n);
    let mut w = m.to_vec();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    let xp = w[i * n + p];
                    let xq = w[i * n + q];
                    app += xp * xp;
                    aqq += xq * xq;
                    apq += xp * xq;
                }
                if apq.abs() <= TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let xp = w[i * n + p];
                    let xq = w[i * n + q];
                    w[i * n + p] = c * xp - s * xq;
                    w[i * n + q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            let mut sv: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|i| w[i * n + j] * w[i * n + j]).sum::<f64>().sqrt())
                .collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            return Ok(sv);
        }
    }
    Err(Error::Numeric(format!(
        "one-sided Jacobi did not converge on a {n}x{n} matrix within {MAX_SWEEPS} sweeps"
    )))
}

/// Singular values of `scale * A * B` computed on the r x r core.
pub fn low_rank_singular_values(
    a: &[f64],
    b: &[f64],
    in_dim: usize,
    rank: usize,
    out_dim: usize,
    scale: f64,
) -> Result<Vec<f64>> {
    let ra = thin_qr_r(a, in_dim, rank)?;
    // B is r x out; QR of B^T gives R_B with B = R_B^T Q^T.
    let bt: Vec<f64> = {
        let mut t = vec![0.0; out_dim * rank];
        for i in 0..rank {
            for j in 0..out_dim {
                t[j * rank + i] = b[i * out_dim + j];
            }
        }
        t
    };
    let rb = thin_qr_r(&bt, out_dim, rank)?;
    let rbt: Vec<f64> = {
        let mut t = vec![0.0; rank * rank];
        for i in 0..rank {
            for j in 0..rank {
                t[j * rank + i] = rb[i * rank + j];
            }
        }
        t
    };
    let mut core = matmul_raw(&ra, &rbt, rank, rank, rank);
    for v in &mut core {
        *v *= scale;
    }
    jacobi_singular_values(&core, rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_svd_oracle(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mat = nalgebra::DMatrix::from_row_slice(rows, cols, m);
        let mut sv: Vec<f64> = mat.svd(false, false).singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    #[test]
    fn diagonal_matrix_singular_values() {
        let m = [3.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.5];
        let sv = jacobi_singular_values(&m, 3).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14);
        assert!((sv[1] - 2.0).abs() < 1e-14);
        assert!((sv[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn orthonormal_factors_give_unit_spectrum() {
        // A: orthonormal columns (16x4), B: orthonormal rows (4x16).
        let (din, r, dout) = (16usize, 4usize, 16usize);
        let mut a = vec![0.0; din * r];
        for k in 0..r {
            a[k * r + k] = 1.0;
        }
        let mut b = vec![0.0; r * dout];
        for k in 0..r {
            b[k * dout + (dout - 1 - k)] = 1.0;
        }
        let sv = low_rank_singular_values(&a, &b, din, r, dout, 1.0).unwrap();
        assert_eq!(sv.len(), r);
        for &s in &sv {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_b_gives_zero_spectrum() {
        let (din, r, dout) = (8usize, 3usize, 6usize);
        let a: Vec<f64> = (0..din * r).map(|i| (i as f64 * 0.37).sin()).collect();
        let b = vec![0.0; r * dout];
        let sv = low_rank_singular_values(&a, &b, din, r, dout, 2.0).unwrap();
        assert!(sv.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn matches_dense_svd_on_random_skinny_factors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (din, r, dout) = (16usize, 4usize, 16usize);
        let scale = 0.75;
        let a: Vec<f64> = (0..din * r).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..r * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sv = low_rank_singular_values(&a, &b, din, r, dout, scale).unwrap();
        assert_eq!(sv.len(), r);

        let mut dense = matmul_raw(&a, &b, din, r, dout);
        for v in &mut dense {
            *v *= scale;
        }
        let oracle = dense_svd_oracle(&dense, din, dout);
        for k in 0..r {
            let denom = oracle[k].abs().max(1e-12);
            assert!(
                (sv[k] - oracle[k]).abs() / denom < 1e-10,
                "sigma_{k}: {} vs {}",
                sv[k],
                oracle[k]
            );
        }
        // Everything beyond the rank is numerically zero in the oracle too.
        for k in r..oracle.len() {
            assert!(oracle[k] < 1e-10);
        }
    }

    #[test]
    fn spectrum_is_sorted_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (din, r, dout) = (12usize, 5usize, 9usize);
            let a: Vec<f64> = (0..din * r).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..r * dout).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sv = low_rank_singular_values(&a, &b, din, r, dout, 1.0).unwrap();
            for w in sv.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(sv.iter().all(|&s| s >= 0.0));
        }
    }
}
