//! Dense linear algebra kernels used by the solvers and the certificate.
//!
//! Every kernel accumulates each output element in ascending index order on
//! purpose: the solver engines and the agent simulator must produce
//! bit-identical results, and a blocked/SIMD backend would reorder
//! accumulation. Loop nests are free to sweep row-major for cache locality as
//! long as the additions contributing to any single element stay in order.
//! Problem sizes are small (n ≤ a few hundred, p ≤ ~1k), so sequential loops
//! are fast enough under optimization.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry at ({i}, {j})")]
    NonFinite { i: usize, j: usize },
    #[error("Jacobi eigensolver did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { pivot: f64, index: usize },
    #[error("column {0} is numerically dependent; cannot orthonormalize")]
    DegenerateColumn(usize),
}

/// `a · b`. Each entry accumulates `a[i][t]·b[t][j]` in ascending `t`; the
/// row-sweep loop nest only changes the memory access pattern, not the order
/// of additions contributing to any single entry.
pub fn mat_mul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "shape mismatch in mat_mul: {m}x{k} · {k2}x{n}");
    let mut out = Array2::zeros((m, n));
    for (mut orow, arow) in out.rows_mut().into_iter().zip(a.rows()) {
        for (brow, &av) in b.rows().into_iter().zip(arow.iter()) {
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · x` with ascending-index accumulation.
pub fn mat_vec(a: &Array2<f64>, x: &Array1<f64>) -> Array1<f64> {
    let (m, k) = a.dim();
    assert_eq!(k, x.len(), "shape mismatch in mat_vec");
    let mut out = Array1::zeros(m);
    for (o, row) in out.iter_mut().zip(a.rows()) {
        *o = row
            .iter()
            .zip(x.iter())
            .map(|(a, x)| a * x)
            .fold(0.0, |s, v| s + v);
    }
    out
}

/// `aᵀ · x`. Each `out[j]` accumulates `a[t][j]·x[t]` in ascending `t`, the
/// same additions as a column-major loop but swept row by row so the matrix
/// is read contiguously.
pub fn mat_t_vec(a: &Array2<f64>, x: &Array1<f64>) -> Array1<f64> {
    let (m, k) = a.dim();
    assert_eq!(m, x.len(), "shape mismatch in mat_t_vec");
    let mut out = Array1::zeros(k);
    for (row, &xv) in a.rows().into_iter().zip(x.iter()) {
        for (o, &av) in out.iter_mut().zip(row.iter()) {
            *o += av * xv;
        }
    }
    out
}

pub fn transpose(a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = a.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..m {
        for j in 0..n {
            out[[j, i]] = a[[i, j]];
        }
    }
    out
}

/// `aᵀ · a` (symmetric Gram matrix).
pub fn gram(a: &Array2<f64>) -> Array2<f64> {
    mat_mul(&transpose(a), a)
}

pub fn frob_mat(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn norm2_vec(x: &Array1<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Eigen-decomposition of a symmetric matrix.
pub struct SymEigen {
    /// Eigenvalues in ascending order.
    pub values: Array1<f64>,
    /// Matching eigenvectors as columns, if requested.
    pub vectors: Option<Array2<f64>>,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// The input is symmetrized as (A + Aᵀ)/2 before iterating, so callers may
/// pass Gram-like products that are symmetric only up to roundoff.
pub fn sym_eigen(m: &Array2<f64>, want_vectors: bool) -> Result<SymEigen, LinalgError> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in 0..n {
            if !m[[i, j]].is_finite() {
                return Err(LinalgError::NonFinite { i, j });
            }
        }
    }
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = 0.5 * (m[[i, j]] + m[[j, i]]);
        }
    }
    let mut v = if want_vectors {
        Some(Array2::eye(n))
    } else {
        None
    };
    let mut d: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    const MAX_SWEEPS: usize = 60;
    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                off += a[[p, q]].abs();
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
        let thresh = if sweep < 3 {
            0.2 * off / ((n * n) as f64)
        } else {
            0.0
        };
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let g = 100.0 * a[[p, q]].abs();
                // Skip rotations on entries already negligible relative to the diagonal.
                if sweep > 3
                    && d[p].abs() + g == d[p].abs()
                    && d[q].abs() + g == d[q].abs()
                {
                    a[[p, q]] = 0.0;
                    continue;
                }
                if a[[p, q]].abs() <= thresh {
                    continue;
                }
                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    a[[p, q]] / h
                } else {
                    let theta = 0.5 * h / a[[p, q]];
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * a[[p, q]];
                z[p] -= h;
                z[q] += h;
                d[p] -= h;
                d[q] += h;
                a[[p, q]] = 0.0;
                let rotate = |a: &mut Array2<f64>, i: usize, j: usize, k: usize, l: usize| {
                    let g = a[[i, j]];
                    let h = a[[k, l]];
                    a[[i, j]] = g - s * (h + g * tau);
                    a[[k, l]] = h + s * (g - h * tau);
                };
                for j in 0..p {
                    rotate(&mut a, j, p, j, q);
                }
                for j in (p + 1)..q {
                    rotate(&mut a, p, j, j, q);
                }
                for j in (q + 1)..n {
                    rotate(&mut a, p, j, q, j);
                }
                if let Some(vm) = v.as_mut() {
                    for j in 0..n {
                        rotate(vm, j, p, j, q);
                    }
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    if !converged {
        // Final check: the loop above may exit at MAX_SWEEPS with off == 0.
        let mut off = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                off += a[[p, q]].abs();
            }
        }
        if off != 0.0 {
            return Err(LinalgError::NoConvergence(MAX_SWEEPS));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let vectors = v.map(|vm| {
        let mut sorted = Array2::zeros((n, n));
        for (new_col, &old_col) in order.iter().enumerate() {
            for row in 0..n {
                sorted[[row, new_col]] = vm[[row, old_col]];
            }
        }
        sorted
    });
    Ok(SymEigen { values, vectors })
}

/// Cholesky factor L (lower triangular) of a symmetric positive definite matrix.
pub fn cholesky(spd: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let (rows, cols) = spd.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(spd[[i, i]].abs()));
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = spd[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if !(s > 1e-13 * max_diag.max(1e-300)) {
                    return Err(LinalgError::NotPositiveDefinite { pivot: s, index: i });
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve L Lᵀ x = b given the Cholesky factor L.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    assert_eq!(n, b.len());
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Moore–Penrose pseudoinverse of a symmetric PSD matrix via eigendecomposition.
///
/// Eigenvalues below `rel_tol · λ_max` are treated as zero.
pub fn pinv_psd(s: &Array2<f64>, rel_tol: f64) -> Result<Array2<f64>, LinalgError> {
    let eig = sym_eigen(s, true)?;
    let vecs = eig.vectors.as_ref().unwrap();
    let n = s.nrows();
    let lam_max = eig.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let cut = rel_tol * lam_max.max(1e-300);
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        let lam = eig.values[k];
        if lam.abs() <= cut {
            continue;
        }
        let inv = 1.0 / lam;
        for i in 0..n {
            let vik = vecs[[i, k]];
            if vik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[[i, j]] += inv * vik * vecs[[j, k]];
            }
        }
    }
    Ok(out)
}

/// Smallest eigenvalue above `rel_tol · λ_max` in a sorted/unsorted value list.
pub fn min_nonzero(values: &Array1<f64>, rel_tol: f64) -> Option<f64> {
    let lam_max = values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let cut = rel_tol * lam_max.max(1e-300);
    values
        .iter()
        .copied()
        .filter(|v| v.abs() > cut)
        .fold(None, |acc: Option<f64>, v| match acc {
            None => Some(v),
            Some(a) => Some(a.min(v)),
        })
}

/// Thin orthonormal basis for the column span via modified Gram–Schmidt with
/// one reorthogonalization pass.
pub fn orthonormal_columns(g: &Array2<f64>) -> Result<Array2<f64>, LinalgError> {
    let (m, k) = g.dim();
    assert!(k <= m, "need at least as many rows as columns");
    let mut q = Array2::zeros((m, k));
    for j in 0..k {
        let mut v: Vec<f64> = (0..m).map(|i| g[[i, j]]).collect();
        for _pass in 0..2 {
            for prev in 0..j {
                let mut r = 0.0;
                for i in 0..m {
                    r += q[[i, prev]] * v[i];
                }
                for i in 0..m {
                    v[i] -= r * q[[i, prev]];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(LinalgError::DegenerateColumn(j));
        }
        for i in 0..m {
            q[[i, j]] = v[i] / norm;
        }
    }
    Ok(q)
}
