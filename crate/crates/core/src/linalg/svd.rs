//! Thin singular value decomposition.
//!
//! Tall inputs are first reduced with a Householder QR so that the one-sided
//! (Hestenes) Jacobi iteration only ever runs on a square `n×n` factor. Wide
//! inputs are handled through the transpose. All arithmetic is `f64`.

use crate::error::{Error, Result};
use crate::linalg::matrix::{matmul_f64, Matrix};

/// `a ≈ u · diag(sigma) · vt` with `k = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m×k`, orthonormal columns.
    pub u: Matrix,
    /// Descending, non-negative.
    pub sigma: Vec<f64>,
    /// `k×n`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Result<Matrix> {
        let (m, k) = self.u.shape();
        let n = self.vt.cols();
        let mut us = self.u.to_f64();
        for i in 0..m {
            for j in 0..k {
                us[i * k + j] *= self.sigma[j];
            }
        }
        Matrix::from_f64(m, n, &matmul_f64(m, k, n, &us, &self.vt.to_f64()))
    }
}

/// `f64` decomposition shared by the merge engine, which needs the factors
/// before rounding to storage precision.
#[derive(Clone, Debug)]
pub(crate) struct SvdF64 {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// `m×k` row-major.
    pub u: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `k×n` row-major.
    pub vt: Vec<f64>,
}

const JACOBI_TOL: f64 = 1e-15;

pub fn thin_svd(a: &Matrix) -> Result<SvdResult> {
    let s = svd_f64(a.rows(), a.cols(), &a.to_f64())?;
    Ok(SvdResult {
        u: Matrix::from_f64(s.m, s.k, &s.u)?,
        sigma: s.sigma,
        vt: Matrix::from_f64(s.k, s.n, &s.vt)?,
    })
}

/// Largest singular value. Never exceeds the Frobenius norm.
pub fn top_singular_value(a: &Matrix) -> Result<f64> {
    Ok(thin_svd(a)?.sigma[0])
}

pub(crate) fn svd_f64(m: usize, n: usize, a: &[f64]) -> Result<SvdF64> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidMatrix(format!(
            "cannot decompose an empty {m}x{n} matrix"
        )));
    }
    if m < n {
        let at = transpose_f64(m, n, a);
        let s = svd_f64(n, m, &at)?;
        // a = (aᵀ)ᵀ = V Σ Uᵀ
        let mut out = SvdF64 {
            m,
            n,
            k: s.k,
            u: transpose_f64(s.k, m, &s.vt),
            sigma: s.sigma,
            vt: transpose_f64(n, s.k, &s.u),
        };
        fix_signs(&mut out);
        return Ok(out);
    }

    // m >= n from here on.
    let (q, r) = if m > n {
        let (q, r) = householder_qr(m, n, a);
        (Some(q), r)
    } else {
        (None, a.to_vec())
    };

    let (w, v) = one_sided_jacobi(n, n, &r, m)?;

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| w[j * n..(j + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    sigma = order.iter().map(|&j| sigma[j]).collect();

    // Left vectors in the reduced (n-dimensional) space, column-major.
    let smax = sigma[0];
    let frob = sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cutoff = frob * (m.max(n) as f64) * f64::EPSILON;
    let mut ub: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = sigma[slot];
        if smax > 0.0 && s > cutoff {
            ub.push(w[j * n..(j + 1) * n].iter().map(|x| x / s).collect());
        } else {
            sigma[slot] = if smax > 0.0 { s } else { 0.0 };
            ub.push(Vec::new());
            missing.push(slot);
        }
    }
    complete_basis(n, &mut ub, &missing);

    // vt rows are the permuted columns of V (V stored column-major, n×n).
    let mut vt = vec![0.0; n * n];
    for (slot, &j) in order.iter().enumerate() {
        vt[slot * n..(slot + 1) * n].copy_from_slice(&v[j * n..(j + 1) * n]);
    }

    // Back to row-major m×n.
    let mut ub_rows = vec![0.0; n * n];
    for (c, col) in ub.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            ub_rows[r * n + c] = x;
        }
    }
    let u = match q {
        Some(q) => matmul_f64(m, n, n, &q, &ub_rows),
        None => ub_rows,
    };

    let mut out = SvdF64 {
        m,
        n,
        k: n,
        u,
        sigma,
        vt,
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Orthogonalizes the columns of the `rows×cols` matrix `a` (row-major) by
/// plane rotations. Returns the rotated columns and the accumulated right
/// rotation `V`, both column-major.
fn one_sided_jacobi(
    rows: usize,
    cols: usize,
    a: &[f64],
    report_rows: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[c * rows + r] = a[r * cols + c];
        }
    }
    let mut v = vec![0.0; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }

    // Columns below this squared norm are roundoff and never rotated.
    let total: f64 = w.iter().map(|x| x * x).sum();
    let floor = total * (f64::EPSILON * rows as f64).powi(2);
    let tol = JACOBI_TOL.max(f64::EPSILON * rows as f64);

    let cap = 100 * rows.min(cols).max(1);
    for _sweep in 0..cap {
        let mut rotated = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let cp = &w[p * rows..(p + 1) * rows];
                    let cq = &w[q * rows..(q + 1) * rows];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if alpha <= floor || beta <= floor {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, rows, p, q, c, s);
                rotate_columns(&mut v, cols, p, q, c, s);
            }
        }
        if !rotated {
            return Ok((w, v));
        }
    }
    Err(Error::NoConvergence {
        algorithm: "one-sided Jacobi SVD",
        rows: report_rows,
        cols,
        sweeps: cap,
    })
}

#[inline]
fn rotate_columns(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Householder QR of a tall `m×n` matrix: returns thin `Q` (`m×n`) and the
/// upper-triangular `R` (`n×n`), both row-major.
fn householder_qr(m: usize, n: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut r = a.to_vec();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    for j in 0..n {
        let norm = (j..m).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let x0 = r[j * n + j];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        apply_reflector(&mut r, n, j, j, &v);
        reflectors.push(Some(v));
    }

    let mut q = vec![0.0; m * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }
    for j in (0..n).rev() {
        if let Some(v) = &reflectors[j] {
            apply_reflector(&mut q, n, j, 0, v);
        }
    }

    let mut rr = vec![0.0; n * n];
    for i in 0..n {
        for c in i..n {
            rr[i * n + c] = r[i * n + c];
        }
    }
    (q, rr)
}

/// `buf[start.., col0..] -= 2 v (vᵀ buf[start.., col0..])` on a row-major
/// buffer with `ncols` columns.
fn apply_reflector(buf: &mut [f64], ncols: usize, start: usize, col0: usize, v: &[f64]) {
    let mut dots = vec![0.0; ncols - col0];
    for (k, &vk) in v.iter().enumerate() {
        let row = &buf[(start + k) * ncols + col0..(start + k + 1) * ncols];
        for (d, &x) in dots.iter_mut().zip(row) {
            *d += vk * x;
        }
    }
    for (k, &vk) in v.iter().enumerate() {
        let row = &mut buf[(start + k) * ncols + col0..(start + k + 1) * ncols];
        for (x, &d) in row.iter_mut().zip(&dots) {
            *x -= 2.0 * vk * d;
        }
    }
}

/// Fills the empty slots of `cols` with unit vectors orthogonal to every
/// other column, trying standard basis vectors in order.
fn complete_basis(dim: usize, cols: &mut [Vec<f64>], missing: &[usize]) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < dim, "ran out of basis candidates");
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let d: f64 = e.iter().zip(other).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(other).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = e;
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of every `u` column non-negative,
/// flipping the matching `vt` row.
fn fix_signs(s: &mut SvdF64) {
    for j in 0..s.k {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..s.m {
            let x = s.u[i * s.k + j];
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..s.m {
                s.u[i * s.k + j] = -s.u[i * s.k + j];
            }
            for x in &mut s.vt[j * s.n..(j + 1) * s.n] {
                *x = -*x;
            }
        }
    }
}

pub(crate) fn transpose_f64(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
