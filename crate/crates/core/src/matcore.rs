//! Dense small-matrix numerics: exponentials, phi-functions, Gram integrals,
//! Lyapunov and Riccati solvers, and Hautus rank tests.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

const SERIES_TOL: f64 = 1e-16;
const NK_MAX_ITERS: usize = 100;
const DARE_MAX_ITERS: usize = 500;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn require_square(m: &DMatrix<f64>, name: &str) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::invalid(format!(
            "{name} must be square and nonempty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m) {
        return Err(Error::invalid(format!("{name} has non-finite entries")));
    }
    Ok(m.nrows())
}

/// Relative asymmetry `||M - M^T|| / max(1, ||M||)`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).norm() / m.norm().max(1.0)
}

pub(crate) fn require_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if asymmetry(m) > 1e-10 {
        return Err(Error::invalid(format!("{name} must be symmetric")));
    }
    Ok(())
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// `e^{Mt}` by scaling and squaring of a truncated Taylor series.
pub fn mat_exp(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = require_square(m, "matrix")?;
    if !t.is_finite() {
        return Err(Error::invalid("time must be finite"));
    }
    let x = m * t;
    let norm = one_norm(&x);
    if !norm.is_finite() {
        return Err(Error::NonFinite("matrix exponential argument"));
    }
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    if squarings > 1000 {
        return Err(Error::Overflow { norm });
    }
    let scaled = x / 2f64.powi(squarings);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=60 {
        term = (&term * &scaled) / k as f64;
        sum += &term;
        if one_norm(&term) <= SERIES_TOL * one_norm(&sum) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    if !all_finite(&sum) {
        return Err(Error::Overflow { norm });
    }
    Ok(sum)
}

/// `(1/t) * integral_0^t e^{M tau} d tau` via the exponential of `[[M, I], [0, 0]]`.
pub fn phi1(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let n = require_square(m, "matrix")?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid("phi1 needs t > 0"));
    }
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    big.view_mut((0, n), (n, n)).fill_with_identity();
    let e = mat_exp(&big, t)?;
    Ok(e.view((0, n), (n, n)).into_owned() / t)
}

/// `C_A = (1/dt) * integral_0^dt e^{A u} e^{A^T u} du` via the Van Loan block exponential.
pub fn gram_integral(a: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = require_square(a, "A")?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("gram_integral needs dt > 0"));
    }
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-a));
    big.view_mut((0, n), (n, n)).fill_with_identity();
    big.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = mat_exp(&big, dt)?;
    let f22 = e.view((n, n), (n, n)).into_owned();
    let g12 = e.view((0, n), (n, n)).into_owned();
    let c = symmetrize(&(f22.transpose() * g12)) / dt;
    if !all_finite(&c) {
        return Err(Error::NonFinite("gram integral"));
    }
    Ok(c)
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Solves `F^T X + X F + M = 0`.
pub fn solve_lyapunov(f: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(f, "F")?;
    let eye = DMatrix::<f64>::identity(n, n);
    let ft = f.transpose();
    let op = eye.kronecker(&ft) + ft.kronecker(&eye);
    let x = op.lu().solve(&(-vec_of(m))).ok_or(Error::Singular {
        what: "Lyapunov operator",
        condition: f64::INFINITY,
    })?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    if !all_finite(&x) {
        return Err(Error::NonFinite("Lyapunov solve"));
    }
    Ok(symmetrize(&x))
}

/// Solves `X = F^T X F + M`.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = require_square(f, "F")?;
    let ft = f.transpose();
    let op = DMatrix::<f64>::identity(n * n, n * n) - ft.kronecker(&ft);
    let x = op.lu().solve(&vec_of(m)).ok_or(Error::Singular {
        what: "discrete Lyapunov operator",
        condition: f64::INFINITY,
    })?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    if !all_finite(&x) {
        return Err(Error::NonFinite("discrete Lyapunov solve"));
    }
    Ok(symmetrize(&x))
}

/// Value matrix of a linear policy: solves `beta P = M + F^T P + P F`.
pub fn solve_policy_lyapunov(f: &DMatrix<f64>, m: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    let n = require_square(f, "F")?;
    if m.shape() != (n, n) {
        return Err(Error::invalid("M must match F"));
    }
    require_symmetric(m, "M")?;
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta must be nonnegative"));
    }
    let shifted = f - DMatrix::<f64>::identity(n, n) * (beta / 2.0);
    if spectral_abscissa(&shifted) >= 0.0 {
        return Err(Error::UnstableClosedLoop);
    }
    solve_lyapunov(&shifted, m)
}

fn hautus_rank_ok(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let d = a.nrows();
    let m = b.ncols();
    let scale = 1.0 + a.norm() + b.norm();
    for lambda in a.complex_eigenvalues().iter() {
        if lambda.re < -1e-10 * scale {
            continue;
        }
        let mut pencil = DMatrix::<Complex<f64>>::zeros(d, d + m);
        for i in 0..d {
            for j in 0..d {
                let diag = if i == j { *lambda } else { Complex::new(0.0, 0.0) };
                pencil[(i, j)] = diag - Complex::new(a[(i, j)], 0.0);
            }
            for j in 0..m {
                pencil[(i, d + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = pencil.svd(false, false).singular_values;
        let rank = sv.iter().filter(|s| **s > 1e-10 * scale).count();
        if rank < d {
            return false;
        }
    }
    true
}

/// Hautus test for `(A - beta/2 I, B)`.
pub fn hautus_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>, beta: f64) -> bool {
    let d = a.nrows();
    if a.ncols() != d || b.nrows() != d {
        return false;
    }
    let shifted = a - DMatrix::<f64>::identity(d, d) * (beta / 2.0);
    hautus_rank_ok(&shifted, b)
}

/// Hautus test for `(A - beta/2 I, Q)`, as stabilizability of the transposed pair.
pub fn hautus_detectable(a: &DMatrix<f64>, q: &DMatrix<f64>, beta: f64) -> bool {
    hautus_stabilizable(&a.transpose(), &q.transpose(), beta)
}

/// Newton-Kleinman iteration for `A^T X + X A - X B Rp^-1 B^T X + Qp = 0`
/// with positive definite weights, started from a gain with `A + B K0` Hurwitz.
/// Returns `(X, K)` with `K = -Rp^-1 B^T X`.
fn newton_kleinman(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qp: &DMatrix<f64>,
    rp: &DMatrix<f64>,
    k0: DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rp_inv = rp
        .clone()
        .cholesky()
        .ok_or(Error::Singular {
            what: "R",
            condition: f64::INFINITY,
        })?
        .inverse();
    let s = b * &rp_inv * b.transpose();
    let mut k = k0;
    let mut last_res = f64::INFINITY;
    let mut best: Option<(DMatrix<f64>, DMatrix<f64>, f64)> = None;
    for it in 0..NK_MAX_ITERS {
        let f = a + b * &k;
        if !is_hurwitz(&f) {
            return best.map(|(x, k, _)| (x, k)).ok_or(Error::NotStabilizable);
        }
        let x = solve_lyapunov(&f, &(qp + k.transpose() * rp * &k))?;
        k = -(&rp_inv * b.transpose() * &x);
        let res = (a.transpose() * &x + &x * a - &x * &s * &x + qp).norm();
        let scale = 1.0 + qp.norm() + 2.0 * a.norm() * x.norm() + s.norm() * x.norm_squared();
        if best.as_ref().is_none_or(|(_, _, r)| res < *r) {
            best = Some((x.clone(), k.clone(), res));
        }
        // Quadratic convergence stops paying off once the residual stalls at round-off.
        if res < 1e-15 * scale || (it > 2 && res >= 0.5 * last_res && res < 1e-9 * scale) {
            return best.map(|(x, k, _)| (x, k)).ok_or(Error::NotStabilizable);
        }
        last_res = res;
    }
    Err(Error::NoConvergence {
        what: "Newton-Kleinman",
        iterations: NK_MAX_ITERS,
        residual: last_res,
    })
}

/// A gain `K` making `A + B K` Hurwitz.
///
/// Zero when `A` is already Hurwitz; otherwise Bass's shifted-Lyapunov gain,
/// falling back to a continuation over the spectral shift `A - c I` when the
/// pair is stabilizable but not controllable.
pub fn stabilizing_gain(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = require_square(a, "A")?;
    let m = b.ncols();
    if b.nrows() != d {
        return Err(Error::invalid("B rows must match A"));
    }
    if is_hurwitz(a) {
        return Ok(DMatrix::zeros(m, d));
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let alpha = a.norm() + 1.0;
    let shifted = a + &eye * alpha;
    if let Ok(z) = solve_lyapunov(&(-shifted.transpose()), &(b * b.transpose() * 2.0)) {
        if let Some(ch) = z.clone().cholesky() {
            let k = -(b.transpose() * ch.inverse());
            if all_finite(&k) && is_hurwitz(&(a + b * &k)) {
                return Ok(k);
            }
        }
    }
    let qp = DMatrix::<f64>::identity(d, d);
    let rp = DMatrix::<f64>::identity(m, m);
    let mut c = spectral_abscissa(a).max(0.0) + 1.0;
    let mut k = DMatrix::zeros(m, d);
    for _ in 0..200 {
        let (_, kc) = newton_kleinman(&(a - &eye * c), b, &qp, &rp, k)?;
        k = kc;
        let closed = a + b * &k;
        if is_hurwitz(&closed) {
            return Ok(k);
        }
        let margin = -spectral_abscissa(&(&closed - &eye * c));
        let next = (c - 0.9 * margin).max(0.0);
        if c - next < 1e-12 * (1.0 + c) {
            break;
        }
        c = next;
    }
    Err(Error::NotStabilizable)
}

/// Riccati residual `beta P - (Q - P B R^-1 B^T P + A^T P + P A)` in Frobenius norm.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    beta: f64,
    p: &DMatrix<f64>,
) -> Result<f64> {
    let r_inv = r.clone().try_inverse().ok_or(Error::Singular {
        what: "R",
        condition: f64::INFINITY,
    })?;
    let rhs = q - p * b * r_inv * b.transpose() * p + a.transpose() * p + p * a;
    Ok((p * beta - rhs).norm())
}

fn check_care_inputs(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    beta: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = require_square(a, "A")?;
    let m = require_square(r, "R")?;
    if b.shape() != (d, m) {
        return Err(Error::invalid(format!("B must be {d}x{m}")));
    }
    if q.shape() != (d, d) {
        return Err(Error::invalid(format!("Q must be {d}x{d}")));
    }
    if !all_finite(b) || !all_finite(q) {
        return Err(Error::invalid("non-finite B or Q"));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid("beta must be finite and nonnegative"));
    }
    require_symmetric(q, "Q")?;
    require_symmetric(r, "R")?;
    let qp = symmetrize(&(-q));
    let rp = symmetrize(&(-r));
    if rp.clone().try_inverse().is_none() {
        return Err(Error::Singular {
            what: "R",
            condition: f64::INFINITY,
        });
    }
    if rp.clone().cholesky().is_none() {
        return Err(Error::invalid("R must be negative definite"));
    }
    if qp.clone().cholesky().is_none() {
        return Err(Error::invalid("Q must be negative definite"));
    }
    Ok((qp, rp))
}

/// Negative definite stabilizing solution of
/// `beta P = Q - P B R^-1 B^T P + A^T P + P A`.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    beta: f64,
) -> Result<DMatrix<f64>> {
    let (qp, rp) = check_care_inputs(a, b, q, r, beta)?;
    if !hautus_stabilizable(a, b, beta) {
        return Err(Error::NotStabilizable);
    }
    if !hautus_detectable(a, q, beta) {
        return Err(Error::NotDetectable);
    }
    let d = a.nrows();
    let shifted = a - DMatrix::<f64>::identity(d, d) * (beta / 2.0);
    let k0 = stabilizing_gain(&shifted, b)?;
    let (x, _) = newton_kleinman(&shifted, b, &qp, &rp, k0)?;
    let p = symmetrize(&(-x));
    let res = care_residual(a, b, q, r, beta, &p)?;
    if !(res < 1e-9 * (1.0 + p.norm())) {
        return Err(Error::NoConvergence {
            what: "continuous Riccati equation",
            iterations: NK_MAX_ITERS,
            residual: res,
        });
    }
    Ok(p)
}

/// Stabilizing solution of the discounted discrete Riccati equation
/// `P = Q + g A^T P A - g^2 A^T P B (R + g B^T P B)^-1 B^T P A`
/// for negative definite `Q`, `R` and discount `g` in (0, 1].
///
/// Runs the Riccati recursion from `init` (or zero) and switches to Hewer's
/// Newton step whenever the current gain is stabilizing.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    gamma: f64,
    init: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let (qp, rp) = check_care_inputs(a, b, q, r, 0.0)?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid("discount must lie in (0, 1]"));
    }
    let sg = gamma.sqrt();
    let ag = a * sg;
    let bg = b * sg;
    let gain = |x: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let lhs = &rp + bg.transpose() * x * &bg;
        lhs.cholesky().map(|c| -(c.inverse() * bg.transpose() * x * &ag))
    };
    let step = |x: &DMatrix<f64>, k: &DMatrix<f64>| -> DMatrix<f64> {
        let cl = &ag + &bg * k;
        symmetrize(&(&qp + k.transpose() * &rp * k + cl.transpose() * x * &cl))
    };
    let mut x = match init {
        Some(p) => symmetrize(&(-p)),
        None => DMatrix::zeros(a.nrows(), a.nrows()),
    };
    let mut res = f64::INFINITY;
    for _ in 0..DARE_MAX_ITERS {
        let k = gain(&x).ok_or(Error::NonFinite("discrete Riccati gain"))?;
        let next = step(&x, &k);
        res = (&next - &x).norm();
        if !res.is_finite() {
            return Err(Error::NonFinite("discrete Riccati iteration"));
        }
        if res < 1e-10 * (1.0 + x.norm()) {
            return Ok(symmetrize(&(-next)));
        }
        let cl = &ag + &bg * &k;
        x = if spectral_radius(&cl) < 1.0 {
            solve_discrete_lyapunov(&cl, &(&qp + k.transpose() * &rp * &k))?
        } else {
            next
        };
    }
    Err(Error::NoConvergence {
        what: "discrete Riccati equation",
        iterations: DARE_MAX_ITERS,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_exponential() {
        let e = mat_exp(&m1(-1.0), 0.1).unwrap();
        assert!((e[(0, 0)] - 0.904_837_418_035_959_6).abs() < 1e-15);
        let d = mat_exp(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])), 1.0).unwrap();
        assert!((d[(0, 0)] - 1f64.exp()).abs() < 1e-14);
        assert!((d[(1, 1)] - 2f64.exp()).abs() < 1e-13);
        assert!(d[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn exponential_overflow_is_reported() {
        assert!(matches!(mat_exp(&m1(1000.0), 1.0), Err(Error::Overflow { .. })));
    }

    #[test]
    fn phi1_and_gram_scalar() {
        let p = phi1(&m1(-1.0), 1.0).unwrap();
        assert!((p[(0, 0)] - (1.0 - (-1f64).exp())).abs() < 1e-15);
        let z = phi1(&DMatrix::zeros(2, 2), 0.7).unwrap();
        assert!((z - DMatrix::<f64>::identity(2, 2)).norm() < 1e-15);
        let g = gram_integral(&m1(-1.0), 0.1).unwrap();
        assert!((g[(0, 0)] - (1.0 - (-0.2f64).exp()) / 0.2).abs() < 1e-14);
        let g2 = gram_integral(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])), 0.5).unwrap();
        assert!((g2[(0, 0)] - (1.0 - (-1f64).exp())).abs() < 1e-14);
        assert!((g2[(1, 1)] - (1.0 - (-2f64).exp()) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn scalar_care() {
        let p = solve_care(&m1(1.0), &m1(1.0), &m1(-1.0), &m1(-1.0), 0.0).unwrap();
        assert!((p[(0, 0)] + 1.0 + 2f64.sqrt()).abs() < 1e-12);
        let p = solve_care(&m1(-1.0), &m1(0.5), &m1(-1.0), &m1(-1.0), 3.0).unwrap();
        let expected = (5.0 - (25.0f64 + 1.0).sqrt()) / 0.5;
        assert!((p[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_scalars() {
        let p = solve_policy_lyapunov(&m1(-1.0), &m1(-1.0), 0.0).unwrap();
        assert!((p[(0, 0)] + 0.5).abs() < 1e-15);
        let p = solve_policy_lyapunov(&m1(-2.0), &m1(-3.0), 1.0).unwrap();
        assert!((p[(0, 0)] + 0.6).abs() < 1e-15);
        assert!(matches!(
            solve_policy_lyapunov(&m1(1.0), &m1(-1.0), 0.0),
            Err(Error::UnstableClosedLoop)
        ));
    }

    #[test]
    fn hautus_examples() {
        assert!(hautus_stabilizable(
            &(-DMatrix::<f64>::identity(2, 2)),
            &DMatrix::zeros(2, 1),
            0.0
        ));
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(!hautus_stabilizable(&a, &b, 0.0));
        assert!(hautus_stabilizable(&m1(1.0), &m1(1.0), 0.0));
        assert!(matches!(
            solve_care(&a, &b, &(-DMatrix::<f64>::identity(2, 2)), &m1(-1.0), 0.0),
            Err(Error::NotStabilizable)
        ));
    }

    #[test]
    fn stabilizing_gain_handles_uncontrollable_stable_mode() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let k = stabilizing_gain(&a, &b).unwrap();
        assert!(is_hurwitz(&(&a + &b * &k)));
    }

    #[test]
    fn scalar_dare_matches_quadratic() {
        // P = q + a^2 P - a^2 b^2 P^2 / (r + b^2 P) with q = r = -1, a = 2, b = 1.
        let p = solve_dare(&m1(2.0), &m1(1.0), &m1(-1.0), &m1(-1.0), 1.0, None).unwrap()[(0, 0)];
        let res = -1.0 + 4.0 * p - 4.0 * p * p / (-1.0 + p) - p;
        assert!(res.abs() < 1e-9, "residual {res}");
        assert!(p < 0.0);
    }
}
