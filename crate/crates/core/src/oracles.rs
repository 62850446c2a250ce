//! Closed-form and Riccati-based ground truths.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::coefficients::bellman_order_coefficients;
use crate::environments::{Interval, LqrSystem, MertonMarket};
use crate::error::{Error, Result};
use crate::matcore;
use crate::policy_eval::BeDiscount;
use crate::policy_iteration::LinearPolicy;

/// `V(s) = s^T P s + constant`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticValue {
    pub p: DMatrix<f64>,
    pub constant: f64,
}

impl QuadraticValue {
    fn new(sys: &LqrSystem, p: DMatrix<f64>) -> Self {
        let constant = if sys.sigma > 0.0 {
            sys.sigma * sys.sigma * p.trace() / sys.beta
        } else {
            0.0
        };
        Self { p, constant }
    }

    pub fn eval(&self, s: &[f64]) -> f64 {
        let d = s.len();
        let mut acc = self.constant;
        for i in 0..d {
            for j in 0..d {
                acc += s[i] * self.p[(i, j)] * s[j];
            }
        }
        acc
    }
}

/// True optimum: `P` from the CARE and `K = -R^-1 B^T P`.
pub fn lqr_optimal(sys: &LqrSystem) -> Result<(LinearPolicy, QuadraticValue)> {
    let p = matcore::solve_care(&sys.a, &sys.b, &sys.q, &sys.r, sys.beta)?;
    let k = care_gain(&sys.r, &sys.b, &p)?;
    Ok((LinearPolicy::linear(k), QuadraticValue::new(sys, p)))
}

fn care_gain(r: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rinv = r.clone().try_inverse().ok_or(Error::Singular {
        what: "R",
        condition: f64::INFINITY,
    })?;
    Ok(-(rinv * b.transpose() * p))
}

fn scalar_parts(sys: &LqrSystem) -> Result<(f64, f64, f64, f64)> {
    if sys.state_dim() != 1 || sys.action_dim() != 1 {
        return Err(Error::invalid("scalar formula needs d = m = 1"));
    }
    let b = sys.b[(0, 0)];
    if b == 0.0 {
        return Err(Error::invalid("scalar formula needs B != 0"));
    }
    Ok((sys.a[(0, 0)], b, sys.q[(0, 0)], sys.r[(0, 0)]))
}

/// `K = ((beta/2 - A) - sqrt((beta/2 - A)^2 + Q B^2 / R)) / B`.
pub fn lqr_optimal_1d(sys: &LqrSystem) -> Result<LinearPolicy> {
    let (a, b, q, r) = scalar_parts(sys)?;
    Ok(LinearPolicy::scalar(scalar_gain(a, b, q, r, sys.beta)))
}

fn scalar_gain(a: f64, b: f64, q: f64, r: f64, beta: f64) -> f64 {
    let c = beta / 2.0 - a;
    (c - (c * c + q * b * b / r).sqrt()) / b
}

/// Exact value of the linear policy `a = K s`.
pub fn lqr_policy_value(sys: &LqrSystem, policy: &LinearPolicy) -> Result<QuadraticValue> {
    let k = &policy.k;
    if k.shape() != (sys.action_dim(), sys.state_dim()) {
        return Err(Error::invalid("policy dimensions do not match the system"));
    }
    let f = &sys.a + &sys.b * k;
    let m = &sys.q + k.transpose() * &sys.r * k;
    let p = matcore::solve_policy_lyapunov(&f, &m, sys.beta)?;
    Ok(QuadraticValue::new(sys, p))
}

/// Drift pair recovered exactly by the i-th order estimators on a linear system.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveDynamics {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub order: usize,
    pub dt: f64,
}

/// `A_i = (1/dt) sum_j a_j (e^{A j dt} - I)`, `B_i = sum_j a_j j phi1(A, j dt) B`.
pub fn phibe_effective_dynamics(sys: &LqrSystem, dt: f64, order: usize) -> Result<EffectiveDynamics> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    let coeffs = bellman_order_coefficients(order)?.coeffs;
    let d = sys.state_dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut a_hat = DMatrix::zeros(d, d);
    let mut phi_sum = DMatrix::zeros(d, d);
    for (j, aj) in coeffs.iter().enumerate() {
        let h = (j + 1) as f64 * dt;
        a_hat += (matcore::mat_exp(&sys.a, h)? - &eye) * (*aj / dt);
        phi_sum += matcore::phi1(&sys.a, h)? * (*aj * (j + 1) as f64);
    }
    Ok(EffectiveDynamics {
        a_hat,
        b_hat: phi_sum * &sys.b,
        order,
        dt,
    })
}

/// Optimum of the PhiBE-equivalent LQR: `K_i = -R^-1 B_i^T P_i`.
pub fn phibe_optimal(sys: &LqrSystem, dt: f64, order: usize) -> Result<LinearPolicy> {
    Ok(phibe_optimal_with_value(sys, dt, order)?.0)
}

/// [`phibe_optimal`] together with the PhiBE value matrix.
pub fn phibe_optimal_with_value(sys: &LqrSystem, dt: f64, order: usize) -> Result<(LinearPolicy, QuadraticValue)> {
    let eff = phibe_effective_dynamics(sys, dt, order)?;
    let p = matcore::solve_care(&eff.a_hat, &eff.b_hat, &sys.q, &sys.r, sys.beta)?;
    let k = care_gain(&sys.r, &eff.b_hat, &p)?;
    Ok((LinearPolicy::linear(k), QuadraticValue::new(sys, p)))
}

/// Scalar closed form of [`phibe_optimal`].
pub fn phibe_optimal_1d(sys: &LqrSystem, dt: f64, order: usize) -> Result<LinearPolicy> {
    let (_, _, q, r) = scalar_parts(sys)?;
    let eff = phibe_effective_dynamics(sys, dt, order)?;
    let (a, b) = (eff.a_hat[(0, 0)], eff.b_hat[(0, 0)]);
    Ok(LinearPolicy::scalar(scalar_gain(a, b, q, r, sys.beta)))
}

/// Discrete problem seen by Optimal-BE: transition `(A~, B~)`, weights
/// `(Q~, R~)` and discount `gamma`.
struct BeProblem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gamma: f64,
}

fn be_problem(sys: &LqrSystem, dt: f64, choice: BeDiscount) -> Result<BeProblem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    let gamma = choice.gamma(sys.beta, dt);
    let scale = choice.reward_scale(sys.beta, dt);
    Ok(BeProblem {
        a: matcore::mat_exp(&sys.a, dt)?,
        b: matcore::phi1(&sys.a, dt)? * &sys.b * dt,
        q: &sys.q * scale,
        r: &sys.r * scale,
        gamma,
    })
}

fn be_gain(pb: &BeProblem, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = pb.gamma;
    let lhs = &pb.r + pb.b.transpose() * p * &pb.b * g;
    let inv = lhs.try_inverse().ok_or(Error::Singular {
        what: "BE gain matrix",
        condition: f64::INFINITY,
    })?;
    Ok(-(inv * pb.b.transpose() * p * &pb.a * g))
}

/// Optimum of the Optimal-BE problem, from the discounted discrete Riccati equation.
pub fn be_optimal(sys: &LqrSystem, dt: f64, choice: BeDiscount) -> Result<LinearPolicy> {
    let pb = be_problem(sys, dt, choice)?;
    let p = matcore::solve_dare(&pb.a, &pb.b, &pb.q, &pb.r, pb.gamma, None)?;
    Ok(LinearPolicy::linear(be_gain(&pb, &p)?))
}

/// Scalar closed form of [`be_optimal`]: the negative root of
/// `g B~^2 p^2 + ((1 - g A~^2) R~ - g Q~ B~^2) p - Q~ R~ = 0`.
pub fn be_optimal_1d(sys: &LqrSystem, dt: f64, choice: BeDiscount) -> Result<LinearPolicy> {
    scalar_parts(sys)?;
    let pb = be_problem(sys, dt, choice)?;
    let (a, b, q, r, g) = (pb.a[(0, 0)], pb.b[(0, 0)], pb.q[(0, 0)], pb.r[(0, 0)], pb.gamma);
    let qa = g * b * b;
    let qb = (1.0 - g * a * a) * r - g * q * b * b;
    let qc = -q * r;
    let disc = qb * qb - 4.0 * qa * qc;
    // Product of roots is qc/qa < 0, so exactly one root is negative.
    let p = (-qb - disc.sqrt()) / (2.0 * qa);
    let p = DMatrix::from_element(1, 1, p);
    Ok(LinearPolicy::linear(be_gain(&pb, &p)?))
}

/// Closed-form constant optimum of the Merton problem.
pub fn merton_optimal(market: &MertonMarket) -> f64 {
    market.optimal_allocation()
}

/// `c` with `V(W) = c W^{1-gamma}` for the constant allocation `a`.
pub fn merton_policy_value(market: &MertonMarket, a: f64) -> Result<f64> {
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::invalid("allocation must be nonnegative"));
    }
    let margin = market.growth_margin(a);
    if !(margin > 0.0) {
        return Err(Error::invalid(format!("allocation {a} has a divergent value")));
    }
    Ok(1.0 / (market.power() * margin))
}

/// Composite-trapezoid `L2` distance of `f - g` over a box with
/// `grid_points` nodes per axis.
pub fn l2_distance_on_box(
    f: impl Fn(&[f64]) -> f64,
    g: impl Fn(&[f64]) -> f64,
    bounds: &[Interval],
    grid_points: usize,
) -> Result<f64> {
    if bounds.is_empty() || grid_points < 2 {
        return Err(Error::invalid("need a nonempty box and at least two grid points"));
    }
    let d = bounds.len();
    let n = grid_points;
    let steps: Vec<f64> = bounds.iter().map(|(lo, hi)| (hi - lo) / (n - 1) as f64).collect();
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut total = 0.0;
    loop {
        let mut weight = 1.0;
        for k in 0..d {
            x[k] = bounds[k].0 + idx[k] as f64 * steps[k];
            let edge = idx[k] == 0 || idx[k] == n - 1;
            weight *= steps[k] * if edge { 0.5 } else { 1.0 };
        }
        let diff = f(&x) - g(&x);
        total += weight * diff * diff;
        let mut k = 0;
        loop {
            if k == d {
                return Ok(total.sqrt());
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Oracle gains for one system and interval, as printed by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub k_hat_1: Option<Vec<Vec<f64>>>,
    pub k_hat_2: Option<Vec<Vec<f64>>>,
    pub k_tilde: Option<Vec<Vec<f64>>>,
    pub k_tilde_lqr_optimal_discount: Option<Vec<Vec<f64>>>,
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Every oracle gain for `sys` at interval `dt`; failures of the
/// discretized problems are reported as `None`.
pub fn oracle_report(sys: &LqrSystem, dt: f64) -> Result<OracleReport> {
    let (k, v) = lqr_optimal(sys)?;
    let gain = |r: Result<LinearPolicy>| r.ok().map(|p| rows(&p.k));
    Ok(OracleReport {
        k: rows(&k.k),
        p: rows(&v.p),
        k_hat_1: gain(phibe_optimal(sys, dt, 1)),
        k_hat_2: gain(phibe_optimal(sys, dt, 2)),
        k_tilde: gain(be_optimal(sys, dt, BeDiscount::Exponential)),
        k_tilde_lqr_optimal_discount: gain(be_optimal(sys, dt, BeDiscount::LqrOptimal)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case1_scalar() {
        let sys = LqrSystem::scalar(1.0, 1.0, -1.0, -1.0, 0.0, 0.0).unwrap();
        let (k, v) = lqr_optimal(&sys).unwrap();
        assert!((k.k[(0, 0)] + 1.0 + 2f64.sqrt()).abs() < 1e-10);
        assert!((v.p[(0, 0)] + 1.0 + 2f64.sqrt()).abs() < 1e-10);
        let k1 = lqr_optimal_1d(&sys).unwrap();
        assert!((k1.k[(0, 0)] - k.k[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn be_forms_agree() {
        let sys = LqrSystem::scalar(1.0, 1.0, -1.0, -1.0, 0.0, 0.5).unwrap();
        for choice in [BeDiscount::Exponential, BeDiscount::LqrOptimal] {
            let a = be_optimal(&sys, 0.3, choice).unwrap().k[(0, 0)];
            let b = be_optimal_1d(&sys, 0.3, choice).unwrap().k[(0, 0)];
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn effective_dynamics_zero_a() {
        let sys = LqrSystem::scalar(0.0, 2.0, -1.0, -1.0, 0.0, 0.0).unwrap();
        for i in 1..4 {
            let e = phibe_effective_dynamics(&sys, 0.7, i).unwrap();
            assert!(e.a_hat[(0, 0)].abs() < 1e-14);
            assert!((e.b_hat[(0, 0)] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn merton_values() {
        let m = MertonMarket::new(0.02, 0.05, 0.08, 0.2, 0.5, 0.2).unwrap();
        assert!((merton_policy_value(&m, 1.5).unwrap() - 12.2137).abs() < 1e-4);
        let cash = merton_policy_value(&m, 0.0).unwrap();
        assert!((cash - 1.0 / (0.5 * (0.2 - 0.5 * 0.02))).abs() < 1e-12);
    }

    #[test]
    fn l2_examples() {
        let one = l2_distance_on_box(|_| 1.0, |_| 0.0, &[(-3.0, 3.0)], 601).unwrap();
        assert!((one - 6f64.sqrt()).abs() < 1e-12);
        let lin = l2_distance_on_box(|s| s[0], |_| 0.0, &[(-3.0, 3.0)], 601).unwrap();
        assert!((lin - 18f64.sqrt()).abs() < 1e-3);
        let two = l2_distance_on_box(|_| 1.0, |_| 0.0, &[(-3.0, 3.0), (-3.0, 3.0)], 21).unwrap();
        assert!((two - 6.0).abs() < 1e-12);
    }
}
