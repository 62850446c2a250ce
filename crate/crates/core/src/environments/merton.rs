//! Merton portfolio environment with a borrowing spread.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::batch::TrajectoryBatch;
use super::sampling::{rollout, ActionSource, Interval, RolloutPlan, Step, Stepper};
use crate::error::{Error, Result};
use crate::policy_iteration::LinearPolicy;

/// Wealth below this level ends a trajectory.
pub const WEALTH_FLOOR: f64 = 1e-12;

/// Market with lending rate `r`, borrowing rate `r_b`, one risky asset
/// `(mu, sigma)` and power utility `W^{1-gamma}/(1-gamma)` discounted at `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MertonMarket {
    pub r: f64,
    pub r_b: f64,
    pub mu: f64,
    pub sigma: f64,
    pub gamma_risk: f64,
    pub beta: f64,
}

impl MertonMarket {
    pub fn new(r: f64, r_b: f64, mu: f64, sigma: f64, gamma_risk: f64, beta: f64) -> Result<Self> {
        let m = Self {
            r,
            r_b,
            mu,
            sigma,
            gamma_risk,
            beta,
        };
        m.validate()?;
        Ok(m)
    }

    /// Checks parameter ranges and that the optimal policy has a finite value.
    pub fn validate(&self) -> Result<()> {
        let all = [self.r, self.r_b, self.mu, self.sigma, self.gamma_risk, self.beta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite market parameter"));
        }
        if !(self.r_b > self.r) {
            return Err(Error::invalid("borrowing rate must exceed the lending rate"));
        }
        if !(self.sigma > 0.0) || !(self.beta > 0.0) {
            return Err(Error::invalid("sigma and beta must be positive"));
        }
        if !(self.gamma_risk > 0.0) || self.gamma_risk == 1.0 {
            return Err(Error::invalid("risk aversion must be positive and different from 1"));
        }
        if !(self.growth_margin(self.optimal_allocation()) > 0.0) {
            return Err(Error::invalid("the optimal policy has a divergent value"));
        }
        Ok(())
    }

    /// Branch-dependent wealth drift rate.
    pub fn drift(&self, a: f64) -> f64 {
        if a <= 1.0 {
            a * self.mu + (1.0 - a) * self.r
        } else {
            a * self.mu - (a - 1.0) * self.r_b
        }
    }

    pub fn volatility(&self, a: f64) -> f64 {
        self.sigma * a
    }

    pub fn utility(&self, w: f64) -> f64 {
        let p = 1.0 - self.gamma_risk;
        w.powf(p) / p
    }

    /// Exponent `1 - gamma` of the value homogeneity.
    pub fn power(&self) -> f64 {
        1.0 - self.gamma_risk
    }

    /// `beta - (1-g) m + g (1-g) v^2 / 2` for constant allocation `a`.
    pub fn growth_margin(&self, a: f64) -> f64 {
        let g = self.gamma_risk;
        let v = self.volatility(a);
        self.beta - (1.0 - g) * self.drift(a) + g * (1.0 - g) * v * v / 2.0
    }

    /// Closed-form constant optimum over `[0, inf)`.
    pub fn optimal_allocation(&self) -> f64 {
        let s2 = self.gamma_risk * self.sigma * self.sigma;
        let lend = (self.mu - self.r) / s2;
        if lend <= 1.0 {
            lend.max(0.0)
        } else {
            ((self.mu - self.r_b) / s2).max(1.0)
        }
    }
}

/// Exact geometric-Brownian step of wealth `w` under allocation `a`.
pub fn merton_step(market: &MertonMarket, w: f64, a: f64, dt: f64, noise: f64) -> Result<f64> {
    if !(w > 0.0) {
        return Err(Error::invalid("wealth must be positive"));
    }
    if !(a >= 0.0) || !a.is_finite() {
        return Err(Error::invalid("allocation must be nonnegative"));
    }
    let m = market.drift(a);
    let v = market.volatility(a);
    Ok(w * ((m - v * v / 2.0) * dt + v * dt.sqrt() * noise).exp())
}

struct MertonStepper<'a> {
    market: &'a MertonMarket,
    dt: f64,
}

impl Stepper for MertonStepper<'_> {
    fn dims(&self) -> (usize, usize) {
        (1, 1)
    }

    fn reward(&self, s: &[f64], _a: &[f64]) -> f64 {
        self.market.utility(s[0])
    }

    fn advance(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]) -> Result<Step> {
        let z: f64 = StandardNormal.sample(rng);
        let w = merton_step(self.market, s[0], a[0], self.dt, z)?;
        if w < WEALTH_FLOOR {
            return Ok(Step::Truncate(format!("wealth {w:e} below {WEALTH_FLOOR:e}")));
        }
        next[0] = w;
        Ok(Step::Next)
    }
}

/// General Merton sampler.
pub fn sample_merton_batch_with(
    market: &MertonMarket,
    dt: f64,
    plan: &RolloutPlan<'_>,
    source: ActionSource<'_>,
    seed: u64,
) -> Result<TrajectoryBatch> {
    market.validate()?;
    if plan.init_box.iter().any(|(lo, _)| !(*lo > 0.0)) {
        return Err(Error::invalid("initial wealth box must be positive"));
    }
    if let ActionSource::Uniform { action_box, .. } | ActionSource::UniformThenPolicy { action_box, .. } = source {
        if action_box.iter().any(|(lo, _)| *lo < 0.0) {
            return Err(Error::invalid("allocation box must be nonnegative"));
        }
    }
    rollout(&MertonStepper { market, dt }, dt, plan, source, seed)
}

/// Uniform initial wealth and uniform allocations held for `hold_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn sample_merton_batch(
    market: &MertonMarket,
    dt: f64,
    num_traj: usize,
    steps: usize,
    init_wealth_box: Interval,
    action_box: Interval,
    hold_steps: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_merton_batch_with(
        market,
        dt,
        &RolloutPlan {
            num_traj,
            steps,
            init_box: &[init_wealth_box],
        },
        ActionSource::Uniform {
            action_box: &[action_box],
            hold_steps,
        },
        seed,
    )
}

/// Rollouts of a (typically constant) policy.
pub fn sample_merton_policy_batch(
    market: &MertonMarket,
    dt: f64,
    policy: &LinearPolicy,
    num_traj: usize,
    steps: usize,
    init_wealth_box: Interval,
    seed: u64,
) -> Result<TrajectoryBatch> {
    sample_merton_batch_with(
        market,
        dt,
        &RolloutPlan {
            num_traj,
            steps,
            init_box: &[init_wealth_box],
        },
        ActionSource::Policy { policy, hold_steps: 1 },
        seed,
    )
}
