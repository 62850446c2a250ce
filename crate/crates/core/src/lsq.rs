//! Deterministic parallel assembly of normal equations and a pivoted-QR solve.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Windows per assembly chunk. Chunks are summed in index order so the result
/// does not depend on the thread count.
const CHUNK: usize = 8192;

/// Condition estimate above which a warning is logged.
pub(crate) const WARN_CONDITION: f64 = 1e10;
/// Condition estimate above which the system is reported singular.
pub(crate) const MAX_CONDITION: f64 = 1e13;

/// Sums `u w^T` into the matrix and `t u` into the right-hand side, where
/// `row(k, u, w)` fills `u`, `w` and returns `t` for item `k`.
pub(crate) fn assemble<F>(count: usize, n: usize, row: F) -> Result<(DMatrix<f64>, DVector<f64>)>
where
    F: Fn(usize, &mut [f64], &mut [f64]) -> Result<f64> + Sync,
{
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Result<(DMatrix<f64>, DVector<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut a = DMatrix::zeros(n, n);
            let mut b = DVector::zeros(n);
            let mut u = vec![0.0; n];
            let mut w = vec![0.0; n];
            for k in c * CHUNK..((c + 1) * CHUNK).min(count) {
                let t = row(k, &mut u, &mut w)?;
                for p in 0..n {
                    b[p] += t * u[p];
                    for q in 0..n {
                        a[(p, q)] += u[p] * w[q];
                    }
                }
            }
            Ok((a, b))
        })
        .collect();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for p in parts {
        let (pa, pb) = p?;
        a += pa;
        b += pb;
    }
    Ok((a, b))
}

/// Solves `a x = b` after row and column equilibration, by QR with column
/// pivoting. Returns the solution and the diagonal-ratio condition estimate.
pub(crate) fn solve(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<(DVector<f64>, f64)> {
    let n = a.nrows();
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let inv_or_one = |v: f64| if v > 0.0 { 1.0 / v } else { 1.0 };
    let rs: Vec<f64> = (0..n).map(|i| inv_or_one(a.row(i).amax())).collect();
    let mut scaled = a.clone();
    for i in 0..n {
        scaled.row_mut(i).scale_mut(rs[i]);
    }
    let cs: Vec<f64> = (0..n).map(|j| inv_or_one(scaled.column(j).amax())).collect();
    for j in 0..n {
        scaled.column_mut(j).scale_mut(cs[j]);
    }
    let rhs = DVector::from_iterator(n, b.iter().zip(&rs).map(|(v, s)| v * s));
    let qr = scaled.col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let (hi, lo) = diag
        .iter()
        .fold((0.0f64, f64::INFINITY), |(h, l), &v| (h.max(v), l.min(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { what, condition });
    }
    if condition > WARN_CONDITION {
        log::warn!("{what} is ill-conditioned (estimate {condition:e})");
    }
    let y = qr.solve(&rhs).ok_or(Error::Singular { what, condition })?;
    let x = DVector::from_iterator(n, y.iter().zip(&cs).map(|(v, s)| v * s));
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok((x, condition))
}

/// Solves the same system as [`assemble`] followed by [`solve`] without
/// forming the sums: with the stacked test rows `U = QR` (columns
/// equilibrated), `U^T W x = U^T t` reduces to `Q^T W x = Q^T t`. Used when
/// the summed matrix is too ill-conditioned because a few rows dominate.
pub(crate) fn solve_factored<F>(count: usize, n: usize, row: F, what: &'static str) -> Result<(DVector<f64>, f64)>
where
    F: Fn(usize, &mut [f64], &mut [f64]) -> Result<f64> + Sync,
{
    if count < n {
        return Err(Error::Singular {
            what,
            condition: f64::INFINITY,
        });
    }
    let mut u_mat = DMatrix::zeros(count, n);
    let mut w_mat = DMatrix::zeros(count, n);
    let mut t = DVector::zeros(count);
    let mut u = vec![0.0; n];
    let mut w = vec![0.0; n];
    for k in 0..count {
        t[k] = row(k, &mut u, &mut w)?;
        for p in 0..n {
            u_mat[(k, p)] = u[p];
            w_mat[(k, p)] = w[p];
        }
    }
    if u_mat.iter().chain(w_mat.iter()).chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    for j in 0..n {
        let m = u_mat.column(j).amax();
        if m > 0.0 {
            u_mat.column_mut(j).scale_mut(1.0 / m);
        }
    }
    let qr = u_mat.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lo > 0.0 && hi / lo <= MAX_CONDITION) {
        return Err(Error::Singular {
            what,
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        });
    }
    let q = qr.q();
    solve(&(q.transpose() * w_mat), &(q.transpose() * t), what)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembly_is_outer_product_sum() {
        let (a, b) = assemble(20000, 2, |k, u, w| {
            let x = k as f64 * 1e-3;
            u.copy_from_slice(&[1.0, x]);
            w.copy_from_slice(&[1.0, x]);
            Ok(2.0 + 3.0 * x)
        })
        .unwrap();
        let (x, cond) = solve(&a, &b, "test matrix").unwrap();
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 3.0).abs() < 1e-9);
        assert!(cond.is_finite());
    }

    #[test]
    fn factored_matches_summed_and_survives_dominant_rows() {
        let row = |k: usize, u: &mut [f64], w: &mut [f64]| -> Result<f64> {
            let x = 1.0 + k as f64 * 0.25;
            u.copy_from_slice(&[1.0, x]);
            w.copy_from_slice(&[1.0, x - 0.5]);
            Ok(2.0 + 3.0 * (x - 0.5))
        };
        let (a, b) = assemble(40, 2, row).unwrap();
        let (x1, _) = solve(&a, &b, "m").unwrap();
        let (x2, _) = solve_factored(40, 2, row, "m").unwrap();
        assert!((x1 - &x2).amax() < 1e-10);
        // One informative row next to huge rows along a single direction.
        let big = |k: usize, u: &mut [f64], w: &mut [f64]| -> Result<f64> {
            let (s, a) = if k == 0 {
                (1.0, 1.0)
            } else if k == 1 {
                (1.0, -1.0)
            } else {
                (1e8 * k as f64, 2e8 * k as f64)
            };
            u.copy_from_slice(&[s, a]);
            w.copy_from_slice(&[s, a]);
            Ok(5.0 * s - 2.0 * a)
        };
        let (a, b) = assemble(6, 2, big).unwrap();
        assert!(solve(&a, &b, "m").is_err());
        let (x, _) = solve_factored(6, 2, big, "m").unwrap();
        assert!((x[0] - 5.0).abs() < 1e-6 && (x[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn singular_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(matches!(solve(&a, &b, "m"), Err(Error::Singular { .. })));
    }
}
