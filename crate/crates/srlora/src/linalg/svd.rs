//! Thin singular value decomposition via one-sided Jacobi rotations.
//!
//! For `W` of shape `m x n` with `d = min(m, n)` this produces `U` (`m x d`,
//! orthonormal columns), singular values in descending order, and `V`
//! (`n x d`, orthonormal columns) with `W = U diag(s) V^T`.
//!
//! The algorithm orthogonalizes the columns of a working copy `G` of `W` by
//! plane rotations. For a column pair `(g_i, g_j)` with moments
//! `a = g_i.g_i`, `b = g_j.g_j`, `d = g_i.g_j` the rotation angle comes from
//! `zeta = (b - a) / (2d)`, `t = sign(zeta) / (|zeta| + sqrt(1 + zeta^2))`,
//! which zeroes the pair's off-diagonal exactly. Sweeps repeat until every
//! pair satisfies `|d| <= 1e-12 * sqrt(a * b)`; a full sweep with no
//! rotation ends the iteration. The sweep cap is 60, far above what any
//! matrix in this crate's size range needs, and hitting it is an error
//! rather than a silent low-quality result.
//!
//! Two determinism conventions are applied after convergence:
//! columns are sorted by singular value (ties keep the pre-sort order), and
//! each `(u_k, v_k)` pair is flipped so the largest-magnitude entry of `u_k`
//! is positive (ties pick the smallest row index). Exactly-zero columns of
//! `G` carry no direction, so their `u_k` is completed deterministically to
//! an orthonormal basis from standard basis vectors.

use crate::error::{Error, Result};

use super::Matrix;

const MAX_SWEEPS: usize = 60;
const JACOBI_TOL: f64 = 1e-12;

/// Thin SVD factors. `u` is `m x d`, `v` is `n x d`, `s` has length
/// `d = min(m, n)` and is non-negative and descending.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

impl SvdFactors {
    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn d(&self) -> usize {
        self.s.len()
    }

    /// `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for j in 0..self.s.len() {
            for i in 0..us.rows() {
                us.set(i, j, us.get(i, j) * self.s[j]);
            }
        }
        us.matmul_nt(&self.v).expect("factor shapes agree")
    }

    pub(crate) fn from_parts(u: Matrix, s: Vec<f64>, v: Matrix) -> Result<SvdFactors> {
        if u.cols() != s.len() || v.cols() != s.len() {
            return Err(Error::InvalidArgument(format!(
                "inconsistent svd factor shapes: u {}x{}, v {}x{}, {} singular values",
                u.rows(),
                u.cols(),
                v.rows(),
                v.cols(),
                s.len()
            )));
        }
        Ok(SvdFactors { u, s, v })
    }
}

/// Thin SVD of `w`. See the module docs for conventions.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let mut factors = if w.rows() >= w.cols() {
        one_sided_jacobi(w)?
    } else {
        let t = one_sided_jacobi(&w.transpose())?;
        SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_signs(&mut factors);
    Ok(factors)
}

/// Frobenius-norm error of the best rank-`k` approximation of `w`:
/// the root of the tail sum of squared singular values beyond `k`.
pub fn best_rank_k_error(w: &Matrix, k: usize) -> Result<f64> {
    let d = w.rows().min(w.cols());
    if k > d {
        return Err(Error::InvalidArgument(format!(
            "rank {k} exceeds min dimension {d}"
        )));
    }
    let f = svd(w)?;
    Ok(f.s[k..].iter().map(|s| s * s).sum::<f64>().sqrt())
}

/// Requires `a.rows() >= a.cols()`.
fn one_sided_jacobi(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);

    // Column-major working copies: tight loops over column pairs.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut worst = 0.0;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        worst = 0.0;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (aa, bb, dd) = column_moments(&g[i], &g[j]);
                if aa == 0.0 || bb == 0.0 {
                    continue;
                }
                let rel = dd.abs() / (aa * bb).sqrt();
                if rel > worst {
                    worst = rel;
                }
                if rel <= JACOBI_TOL {
                    continue;
                }
                let zeta = (bb - aa) / (2.0 * dd);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut g, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        // A sweep that rotated anything saw rel > tol, so this only fires
        // after a clean pass.
        converged = worst <= JACOBI_TOL;
    }
    if !converged {
        return Err(Error::SvdDidNotConverge {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let norms: Vec<f64> = g.iter().map(|c| l2(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        norms[y]
            .partial_cmp(&norms[x])
            .expect("singular values are finite")
            .then(x.cmp(&y))
    });

    let mut s_out = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &c in &order {
        s_out.push(norms[c]);
        if norms[c] > 0.0 {
            u_cols.push(g[c].iter().map(|x| x / norms[c]).collect());
        } else {
            // Placeholder; completed below once all real directions exist.
            u_cols.push(Vec::new());
        }
        v_cols.push(v[c].clone());
    }
    complete_null_columns(&mut u_cols, m);

    Ok(SvdFactors {
        u: from_columns(m, &u_cols),
        s: s_out,
        v: from_columns(n, &v_cols),
    })
}

fn column_moments(ci: &[f64], cj: &[f64]) -> (f64, f64, f64) {
    let mut aa = 0.0;
    let mut bb = 0.0;
    let mut dd = 0.0;
    for (x, y) in ci.iter().zip(cj) {
        aa += x * x;
        bb += y * y;
        dd += x * y;
    }
    (aa, bb, dd)
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let ci = &mut lo[i];
    let cj = &mut hi[0];
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

fn l2(col: &[f64]) -> f64 {
    col.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Replaces empty placeholder columns with unit vectors orthogonal to all
/// other columns. Candidates are standard basis vectors; the one with the
/// largest residual after projection wins, ties taking the smallest index.
fn complete_null_columns(u_cols: &mut [Vec<f64>], m: usize) {
    for idx in 0..u_cols.len() {
        if !u_cols[idx].is_empty() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..m {
            let mut cand = vec![0.0; m];
            cand[k] = 1.0;
            for other in u_cols.iter() {
                if other.is_empty() {
                    continue;
                }
                let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                for (c, o) in cand.iter_mut().zip(other) {
                    *c -= dot * o;
                }
            }
            let norm = l2(&cand);
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("m >= 1 candidates");
        debug_assert!(norm > 0.0, "fewer than m established directions");
        u_cols[idx] = cand.iter().map(|x| x / norm).collect();
    }
}

fn from_columns(rows: usize, cols: &[Vec<f64>]) -> Matrix {
    let mut m = Matrix::zeros(rows, cols.len());
    for (j, col) in cols.iter().enumerate() {
        m.set_column(j, col);
    }
    m
}

/// Flips each `(u_k, v_k)` pair so the largest-magnitude entry of `u_k` is
/// positive. Ties pick the smallest row index.
fn fix_signs(f: &mut SvdFactors) {
    for k in 0..f.s.len() {
        let mut arg = 0;
        for i in 1..f.u.rows() {
            if f.u.get(i, k).abs() > f.u.get(arg, k).abs() {
                arg = i;
            }
        }
        if f.u.get(arg, k) < 0.0 {
            for i in 0..f.u.rows() {
                f.u.set(i, k, -f.u.get(i, k));
            }
            for i in 0..f.v.rows() {
                f.v.set(i, k, -f.v.get(i, k));
            }
        }
    }
}
