//! Linear-quadratic environment with exact Gaussian transitions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::batch::TrajectoryBatch;
use super::sampling::{rollout, ActionSource, Interval, RolloutPlan, Step, Stepper};
use crate::error::{Error, Result};
use crate::matcore;
use crate::policy_iteration::LinearPolicy;

/// `ds = (A s + B a) dt + sigma dW`, reward `s^T Q s + a^T R a`, discount `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LqrSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sigma: f64,
    pub beta: f64,
}

impl LqrSystem {
    /// Validates definiteness, stabilizability and detectability.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sigma: f64,
        beta: f64,
    ) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d || d == 0 {
            return Err(Error::invalid("A must be square"));
        }
        let m = b.ncols();
        if b.nrows() != d || m == 0 || r.shape() != (m, m) || q.shape() != (d, d) {
            return Err(Error::invalid("B, Q, R dimensions are inconsistent with A"));
        }
        let finite = a
            .iter()
            .chain(b.iter())
            .chain(q.iter())
            .chain(r.iter())
            .all(|v| v.is_finite());
        if !finite || !sigma.is_finite() || !beta.is_finite() {
            return Err(Error::invalid("non-finite system parameter"));
        }
        if sigma < 0.0 || beta < 0.0 {
            return Err(Error::invalid("sigma and beta must be nonnegative"));
        }
        if sigma > 0.0 && beta <= 0.0 {
            return Err(Error::invalid("a noisy system needs beta > 0"));
        }
        matcore::require_symmetric(&q, "Q")?;
        matcore::require_symmetric(&r, "R")?;
        if (-&q).cholesky().is_none() {
            return Err(Error::invalid("Q must be negative definite"));
        }
        if (-&r).cholesky().is_none() {
            return Err(Error::invalid("R must be negative definite"));
        }
        if !matcore::hautus_stabilizable(&a, &b, beta) {
            return Err(Error::NotStabilizable);
        }
        if !matcore::hautus_detectable(&a, &q, beta) {
            return Err(Error::NotDetectable);
        }
        Ok(Self {
            a,
            b,
            q,
            r,
            sigma,
            beta,
        })
    }

    /// One-dimensional system.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, sigma: f64, beta: f64) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self::new(s(a), s(b), s(q), s(r), sigma, beta)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        quad_form(&self.q, s) + quad_form(&self.r, a)
    }
}

fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += x[i] * m[(i, j)] * x[j];
        }
    }
    acc
}

/// Exact one-interval transition under a held action:
/// `s' ~ N(M_s s + M_a a, covariance)`.
#[derive(Clone, Debug)]
pub struct TransitionKernel {
    pub dt: f64,
    pub mean_state: DMatrix<f64>,
    pub mean_action: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    factor: Option<DMatrix<f64>>,
}

impl TransitionKernel {
    pub fn mean(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        &self.mean_state * DVector::from_column_slice(s) + &self.mean_action * DVector::from_column_slice(a)
    }

    /// Writes one draw of the next state into `out`.
    pub fn sample_into(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let mut x = self.mean(s, a);
        if let Some(l) = &self.factor {
            let z = DVector::from_fn(l.ncols(), |_, _| StandardNormal.sample(rng));
            x += l * z;
        }
        out.copy_from_slice(x.as_slice());
    }
}

/// Kernel over one interval `dt`; `M_s = e^{A dt}`, `M_a = phi1(A, dt) B dt`,
/// covariance `sigma^2 C_A dt`.
pub fn lqr_exact_transition(sys: &LqrSystem, dt: f64) -> Result<TransitionKernel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    let mean_state = matcore::mat_exp(&sys.a, dt)?;
    let mean_action = matcore::phi1(&sys.a, dt)? * &sys.b * dt;
    let d = sys.state_dim();
    let (covariance, factor) = if sys.sigma > 0.0 {
        let cov = matcore::gram_integral(&sys.a, dt)? * (sys.sigma * sys.sigma * dt);
        let eig = SymmetricEigen::new(cov.clone());
        let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        (cov, Some(factor))
    } else {
        (DMatrix::zeros(d, d), None)
    };
    Ok(TransitionKernel {
        dt,
        mean_state,
        mean_action,
        covariance,
        factor,
    })
}

struct LqrStepper<'a> {
    sys: &'a LqrSystem,
    kernel: TransitionKernel,
}

impl Stepper for LqrStepper<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.sys.state_dim(), self.sys.action_dim())
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        self.sys.reward(s, a)
    }

    fn advance(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]) -> Result<Step> {
        self.kernel.sample_into(s, a, rng, next);
        Ok(Step::Next)
    }
}

/// General LQR sampler.
pub fn sample_lqr_batch_with(
    sys: &LqrSystem,
    dt: f64,
    plan: &RolloutPlan<'_>,
    source: ActionSource<'_>,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let stepper = LqrStepper {
        sys,
        kernel: lqr_exact_transition(sys, dt)?,
    };
    rollout(&stepper, dt, plan, source, seed)
}

/// Uniform initial states and uniform actions held for `hold_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn sample_lqr_batch(
    sys: &LqrSystem,
    dt: f64,
    num_traj: usize,
    steps: usize,
    init_box: &[Interval],
    action_box: &[Interval],
    hold_steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_lqr_batch_with(
        sys,
        dt,
        &RolloutPlan {
            num_traj,
            steps,
            init_box,
        },
        ActionSource::Uniform { action_box, hold_steps },
        seed,
    )
}

/// Rollouts of `policy`, re-evaluated at every step.
pub fn sample_policy_lqr_batch(
    sys: &LqrSystem,
    dt: f64,
    policy: &LinearPolicy,
    num_traj: usize,
    steps: usize,
    init_box: &[Interval],
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_lqr_batch_with(
        sys,
        dt,
        &RolloutPlan {
            num_traj,
            steps,
            init_box,
        },
        ActionSource::Policy { policy, hold_steps: 1 },
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel() {
        let sys = LqrSystem::scalar(-1.0, 0.5, -1.0, -1.0, 1.0, 1.0).unwrap();
        let k = lqr_exact_transition(&sys, 0.1).unwrap();
        let e = (-0.1f64).exp();
        assert!((k.mean_state[(0, 0)] - e).abs() < 1e-15);
        assert!((k.mean_action[(0, 0)] - 0.5 * (1.0 - e)).abs() < 1e-15);
        assert!((k.covariance[(0, 0)] - (1.0 - (-0.2f64).exp()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn integrator_kernel() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let sys = LqrSystem {
            a: DMatrix::zeros(2, 2),
            b: eye.clone(),
            q: -&eye,
            r: -&eye,
            sigma: 0.0,
            beta: 0.0,
        };
        let k = lqr_exact_transition(&sys, 0.3).unwrap();
        let m = k.mean(&[1.0, 2.0], &[3.0, -1.0]);
        assert!((m[0] - 1.9).abs() < 1e-15 && (m[1] - 1.7).abs() < 1e-15);
        assert_eq!(k.covariance, DMatrix::zeros(2, 2));
    }

    #[test]
    fn rejects_noisy_undiscounted() {
        assert!(LqrSystem::scalar(1.0, 1.0, -1.0, -1.0, 1.0, 0.0).is_err());
        assert!(LqrSystem::scalar(1.0, 1.0, 1.0, -1.0, 0.0, 0.0).is_err());
    }
}
