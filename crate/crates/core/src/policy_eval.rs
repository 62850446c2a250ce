//! Value-function estimation: i-th order PhiBE Galerkin evaluation and
//! Optimal-BE evaluation.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::environments::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::lsq;
use crate::windows::{DiffusionMode, WindowOptions, WindowSet};

/// Weights over a basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub weights: Vec<f64>,
    pub basis: BasisSet,
}

impl CoefficientVector {
    pub fn new(weights: Vec<f64>, basis: BasisSet) -> Result<Self> {
        if weights.len() != basis.size() {
            return Err(Error::invalid("weight count differs from basis size"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("coefficient vector"));
        }
        Ok(Self { weights, basis })
    }

    pub fn zeros(basis: BasisSet) -> Self {
        Self {
            weights: vec![0.0; basis.size()],
            basis,
        }
    }

    /// `sum_k w_k phi_k(s, a)`.
    pub fn eval(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let f = self.basis.features(s, a)?;
        Ok(f.iter().zip(&self.weights).map(|(x, w)| x * w).sum())
    }
}

/// Output of a policy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub coeffs: CoefficientVector,
    pub conditioning: f64,
    pub sample_count: usize,
}

impl ValueEstimate {
    pub fn eval(&self, s: &[f64]) -> Result<f64> {
        self.coeffs.eval(s, &[])
    }
}

/// Discount convention for the Optimal-BE estimators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeDiscount {
    /// `gamma = e^{-beta dt}`, reward `r dt`.
    #[default]
    Exponential,
    /// `gamma = 1/(beta dt + 1)`, reward `gamma r dt`.
    LqrOptimal,
}

impl BeDiscount {
    pub fn gamma(self, beta: f64, dt: f64) -> f64 {
        match self {
            BeDiscount::Exponential => (-beta * dt).exp(),
            BeDiscount::LqrOptimal => 1.0 / (beta * dt + 1.0),
        }
    }

    pub fn reward_scale(self, beta: f64, dt: f64) -> f64 {
        match self {
            BeDiscount::Exponential => dt,
            BeDiscount::LqrOptimal => dt * self.gamma(beta, dt),
        }
    }
}

pub(crate) fn check_dt(batch: &TrajectoryBatch, dt: f64) -> Result<()> {
    if !(dt > 0.0) || (batch.dt - dt).abs() > 1e-12 * dt.max(1.0) {
        return Err(Error::invalid(format!(
            "dt {dt} does not match the batch interval {}",
            batch.dt
        )));
    }
    Ok(())
}

fn check_value_basis(phi: &BasisSet, d: usize) -> Result<()> {
    if phi.is_state_action() || phi.state_dim() != d {
        return Err(Error::invalid("value basis does not match the state dimension"));
    }
    Ok(())
}

/// i-th order PhiBE Galerkin evaluation of the policy that generated `batch`.
pub fn phibe_policy_evaluation(
    batch: &TrajectoryBatch,
    phi: &BasisSet,
    beta: f64,
    dt: f64,
    order: usize,
    diffusion: DiffusionMode,
) -> Result<ValueEstimate> {
    check_dt(batch, dt)?;
    let opts = WindowOptions {
        diffusion,
        ..Default::default()
    };
    let windows = WindowSet::from_batch(batch, order, opts)?;
    phibe_policy_evaluation_windows(&windows, phi, beta)
}

/// Galerkin evaluation on prepared windows:
/// `sum phi (beta phi - L phi)^T theta = sum r phi`.
pub fn phibe_policy_evaluation_windows(windows: &WindowSet, phi: &BasisSet, beta: f64) -> Result<ValueEstimate> {
    check_value_basis(phi, windows.state_dim)?;
    if !(beta >= 0.0) {
        return Err(Error::invalid("beta must be nonnegative"));
    }
    let n = phi.size();
    let (a, b) = lsq::assemble(windows.len(), n, |w, u, row| {
        let s = windows.state(w);
        phi.features_into(s, &[], u)?;
        phi.generator_into(s, &[], windows.drift(w), windows.diffusion(w), row)?;
        for (r, f) in row.iter_mut().zip(u.iter()) {
            *r = beta * f - *r;
        }
        Ok(windows.reward(w))
    })?;
    let (theta, conditioning) = lsq::solve(&a, &b, "Galerkin matrix")?;
    Ok(ValueEstimate {
        coeffs: CoefficientVector::new(theta.as_slice().to_vec(), phi.clone())?,
        conditioning,
        sample_count: windows.len(),
    })
}

/// Optimal-BE evaluation: `sum phi (phi - gamma phi')^T theta = sum r~ phi`.
pub fn be_policy_evaluation(
    batch: &TrajectoryBatch,
    phi: &BasisSet,
    beta: f64,
    dt: f64,
    discount: BeDiscount,
) -> Result<ValueEstimate> {
    check_dt(batch, dt)?;
    batch.validate()?;
    check_value_basis(phi, batch.state_dim)?;
    let gamma = discount.gamma(beta, dt);
    let scale = discount.reward_scale(beta, dt);
    let index = transition_index(batch, 1)?;
    let n = phi.size();
    let (a, b) = lsq::assemble(index.len(), n, |k, u, row| {
        let (l, j) = index[k];
        phi.features_into(batch.state(l, j), &[], u)?;
        let mut nx = vec![0.0; n];
        phi.features_into(batch.state(l, j + 1), &[], &mut nx)?;
        for p in 0..n {
            row[p] = u[p] - gamma * nx[p];
        }
        Ok(scale * batch.reward(l, j))
    })?;
    let (theta, conditioning) = lsq::solve(&a, &b, "BE evaluation matrix")?;
    Ok(ValueEstimate {
        coeffs: CoefficientVector::new(theta.as_slice().to_vec(), phi.clone())?,
        conditioning,
        sample_count: index.len(),
    })
}

/// `(trajectory, step)` pairs with a recorded successor.
pub(crate) fn transition_index(batch: &TrajectoryBatch, min_states: usize) -> Result<Vec<(usize, usize)>> {
    let mut index = Vec::with_capacity(batch.total_states());
    for l in 0..batch.num_trajectories() {
        let n = batch.num_states(l);
        if n < min_states + 1 {
            return Err(Error::BatchTooShort {
                order: min_states,
                needed: min_states + 1,
                found: n,
            });
        }
        index.extend((0..n - 1).map(|j| (l, j)));
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{quadratic_state_basis, BasisSet, Term};
    use crate::environments::{sample_policy_lqr_batch, LqrSystem};
    use crate::policy_iteration::LinearPolicy;

    fn frozen_batch() -> TrajectoryBatch {
        let sys = LqrSystem {
            a: nalgebra::DMatrix::zeros(1, 1),
            b: nalgebra::DMatrix::from_element(1, 1, 1.0),
            q: nalgebra::DMatrix::from_element(1, 1, -1.0),
            r: nalgebra::DMatrix::from_element(1, 1, -1.0),
            sigma: 0.0,
            beta: 0.5,
        };
        let pol = LinearPolicy::zeros(1, 1);
        sample_policy_lqr_batch(&sys, 0.1, &pol, 1, 5, &[(2.0, 2.0)], 3).unwrap()
    }

    #[test]
    fn constant_state_phibe() {
        let basis = BasisSet::from_terms(1, 0, vec![Term::Constant]).unwrap();
        let v = phibe_policy_evaluation(&frozen_batch(), &basis, 0.5, 0.1, 1, DiffusionMode::Zero).unwrap();
        assert!((v.coeffs.weights[0] - (-4.0 / 0.5)).abs() < 1e-12);
    }

    #[test]
    fn constant_state_be() {
        let basis = BasisSet::from_terms(1, 0, vec![Term::Constant]).unwrap();
        let v = be_policy_evaluation(&frozen_batch(), &basis, 0.5, 0.1, BeDiscount::Exponential).unwrap();
        let expect = -4.0 * 0.1 / (1.0 - (-0.05f64).exp());
        assert!((v.coeffs.weights[0] - expect).abs() < 1e-9 * expect.abs());
    }

    #[test]
    fn dt_mismatch_rejected() {
        let basis = quadratic_state_basis(1, false).unwrap();
        assert!(phibe_policy_evaluation(&frozen_batch(), &basis, 0.5, 0.2, 1, DiffusionMode::Zero).is_err());
    }
}
