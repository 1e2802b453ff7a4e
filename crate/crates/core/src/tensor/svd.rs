//! Truncated SVD via cyclic Jacobi on the smaller Gram matrix.

use super::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Leading singular triplets: `a ≈ u · diag(singular_values) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(s) · vᵀ`
    pub fn recompose(&self) -> Matrix {
        let (m, n, k) = (self.u.rows(), self.v.rows(), self.rank());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for r in 0..k {
                let w = self.u.get(i, r) * self.singular_values[r];
                if w == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += w * self.v.get(j, r);
                }
            }
        }
        Matrix::from_raw(m, n, out)
    }
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
///
/// Returns eigenvalues in non-increasing order and the matching eigenvectors
/// as the columns of the returned matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::arg(format!("eigen needs a square matrix, got {}x{}", n, a.cols())));
    }
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in eigen input".into()));
    }
    let mut m = a.data().to_vec();
    // Rows of `vt` are the eigenvectors, so rotations touch contiguous memory.
    let mut vt = Matrix::identity(n).into_data();
    let total: f64 = m.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok((vec![0.0; n], Matrix::identity(n)));
    }

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-15 * total.sqrt() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                {
                    let (lo, hi) = m.split_at_mut(q * n);
                    let rp = &mut lo[p * n..(p + 1) * n];
                    let rq = &mut hi[..n];
                    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
                        let (apk, aqk) = (*x, *y);
                        *x = c * apk - s * aqk;
                        *y = s * apk + c * aqk;
                    }
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                let (lo, hi) = vt.split_at_mut(q * n);
                let vp = &mut lo[p * n..(p + 1) * n];
                let vq = &mut hi[..n];
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the original index order among equal eigenvalues.
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = Matrix::from_fn(n, n, |row, col| vt[order[col] * n + row]);
    Ok((values, vectors))
}

/// Leading `max_rank` singular triplets of `a`.
pub fn svd(a: &Matrix, max_rank: usize) -> Result<SvdResult> {
    let min_dim = a.rows().min(a.cols());
    if max_rank == 0 || max_rank > min_dim {
        return Err(Error::arg(format!(
            "max_rank must be in 1..={min_dim}, got {max_rank}"
        )));
    }
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in svd input".into()));
    }
    if a.rows() <= a.cols() {
        svd_wide(a, max_rank)
    } else {
        let t = svd_wide(&a.transpose(), max_rank)?;
        Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        })
    }
}

/// rows ≤ cols: eigenvectors of `a aᵀ` give `u`; `v = aᵀ u / σ`.
fn svd_wide(a: &Matrix, k: usize) -> Result<SvdResult> {
    let (m, n) = (a.rows(), a.cols());
    let (_, evecs) = symmetric_eigen(&a.gram_rows())?;
    let u = evecs.leading_columns(k);

    // aᵀ u, stored column by column
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for r in 0..k {
        let mut col = vec![0.0; n];
        for i in 0..m {
            let w = u.get(i, r);
            if w == 0.0 {
                continue;
            }
            let row = &a.data()[i * n..(i + 1) * n];
            for (c, &x) in col.iter_mut().zip(row) {
                *c += w * x;
            }
        }
        sigma.push(dot(&col, &col).sqrt());
        v_cols.push(col);
    }
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let floor = sigma_max * 1e-13;
    for r in 0..k {
        if sigma[r] <= floor {
            sigma[r] = 0.0;
            v_cols[r].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    orthonormalize_columns(&mut v_cols);
    let v = Matrix::from_fn(n, k, |i, r| v_cols[r][i]);
    Ok(SvdResult {
        u,
        singular_values: sigma,
        v,
    })
}

/// Modified Gram–Schmidt (two passes); zero or dependent columns are
/// replaced by canonical basis vectors orthogonal to the preceding ones.
fn orthonormalize_columns(cols: &mut [Vec<f64>]) {
    let n = cols.first().map_or(0, Vec::len);
    let mut next_basis = 0usize;
    for r in 0..cols.len() {
        let original = dot(&cols[r], &cols[r]).sqrt();
        let mut ok = original > 0.0 && project_out(cols, r) > 1e-8 * original;
        while !ok {
            assert!(next_basis < n, "cannot complete an orthonormal basis");
            cols[r] = vec![0.0; n];
            cols[r][next_basis] = 1.0;
            next_basis += 1;
            ok = project_out(cols, r) > 1e-8;
        }
        let len = dot(&cols[r], &cols[r]).sqrt();
        cols[r].iter_mut().for_each(|x| *x /= len);
    }
}

/// Remove components along columns `0..r` from column `r`; returns the remaining norm.
fn project_out(cols: &mut [Vec<f64>], r: usize) -> f64 {
    let (done, rest) = cols.split_at_mut(r);
    let col = &mut rest[0];
    for _ in 0..2 {
        for prev in done.iter() {
            let proj = dot(prev, col);
            for (c, p) in col.iter_mut().zip(prev) {
                *c -= proj * p;
            }
        }
    }
    dot(col, col).sqrt()
}
