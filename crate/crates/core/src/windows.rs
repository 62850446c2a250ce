//! Per-window drift and diffusion estimates feeding the PhiBE estimators.
//!
//! A window starts at `s^j` and spans `i` further states. Windows come either
//! from a sampled batch or from exact kernel moments ("exact-expectation mode").

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coefficients::bellman_order_coefficients;
use crate::environments::{LqrSystem, MertonMarket, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::matcore;

/// Whether the second-moment term enters the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    #[default]
    Zero,
    Empirical,
}

/// Which window starts are used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSelection {
    /// Every `j = 0..=I-i`.
    #[default]
    All,
    /// Only starts at multiples of the batch's hold length.
    HoldAligned,
}

/// Normalization of the drift estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftScaling {
    /// `(1/dt) sum_k a_k (s^{j+k} - s^j)`.
    #[default]
    PerTime,
    /// `sum_k a_k (s^{j+k} - s^j)` without the `1/dt`.
    AsPrinted,
}

/// Options for turning a batch into windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOptions {
    pub diffusion: DiffusionMode,
    pub selection: WindowSelection,
    pub drift_scaling: DriftScaling,
}

/// Flat storage of `(s, a, r, b_hat, Sigma_hat)` per window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub dt: f64,
    pub order: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    drift: Vec<f64>,
    diffusion: Option<Vec<f64>>,
}

impl WindowSet {
    fn empty(dt: f64, order: usize, d: usize, m: usize, with_diffusion: bool) -> Self {
        Self {
            dt,
            order,
            state_dim: d,
            action_dim: m,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            drift: Vec::new(),
            diffusion: with_diffusion.then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, w: usize) -> &[f64] {
        &self.states[w * self.state_dim..(w + 1) * self.state_dim]
    }

    pub fn action(&self, w: usize) -> &[f64] {
        &self.actions[w * self.action_dim..(w + 1) * self.action_dim]
    }

    pub fn reward(&self, w: usize) -> f64 {
        self.rewards[w]
    }

    pub fn drift(&self, w: usize) -> &[f64] {
        &self.drift[w * self.state_dim..(w + 1) * self.state_dim]
    }

    /// Row-major `d x d` diffusion estimate, if tracked.
    pub fn diffusion(&self, w: usize) -> Option<&[f64]> {
        let dd = self.state_dim * self.state_dim;
        self.diffusion.as_ref().map(|v| &v[w * dd..(w + 1) * dd])
    }

    fn push(&mut self, s: &[f64], a: &[f64], r: f64, drift: &[f64], diffusion: Option<&[f64]>) {
        self.states.extend_from_slice(s);
        self.actions.extend_from_slice(a);
        self.rewards.push(r);
        self.drift.extend_from_slice(drift);
        if let (Some(v), Some(x)) = (self.diffusion.as_mut(), diffusion) {
            v.extend_from_slice(x);
        }
    }

    /// Windows of order `order` from a sampled batch.
    pub fn from_batch(batch: &TrajectoryBatch, order: usize, opts: WindowOptions) -> Result<Self> {
        batch.validate()?;
        let coeffs = bellman_order_coefficients(order)?.coeffs;
        let (d, m) = (batch.state_dim, batch.action_dim);
        let with_diff = opts.diffusion == DiffusionMode::Empirical;
        let mut out = Self::empty(batch.dt, order, d, m, with_diff);
        let hold = batch.meta.hold_steps.max(1);
        if opts.selection == WindowSelection::HoldAligned && hold < order {
            log::warn!("hold length {hold} is shorter than the estimator order {order}");
        }
        let drift_factor = match opts.drift_scaling {
            DriftScaling::PerTime => 1.0 / batch.dt,
            DriftScaling::AsPrinted => 1.0,
        };
        let mut drift = vec![0.0; d];
        let mut diff = vec![0.0; d * d];
        let mut delta = vec![0.0; d];
        for l in 0..batch.num_trajectories() {
            let n = batch.num_states(l);
            if n < order + 1 {
                return Err(Error::BatchTooShort {
                    order,
                    needed: order + 1,
                    found: n,
                });
            }
            for j in 0..n - order {
                if opts.selection == WindowSelection::HoldAligned && j % hold != 0 {
                    continue;
                }
                let s = batch.state(l, j);
                drift.fill(0.0);
                diff.fill(0.0);
                for (k, ak) in coeffs.iter().enumerate() {
                    let sk = batch.state(l, j + k + 1);
                    for i in 0..d {
                        delta[i] = sk[i] - s[i];
                        drift[i] += ak * delta[i] * drift_factor;
                    }
                    if with_diff {
                        for p in 0..d {
                            for q in 0..d {
                                diff[p * d + q] += ak * delta[p] * delta[q] / batch.dt;
                            }
                        }
                    }
                }
                out.push(
                    s,
                    batch.action(l, j),
                    batch.reward(l, j),
                    &drift,
                    with_diff.then_some(&diff[..]),
                );
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("batch yields no windows"));
        }
        Ok(out)
    }

    /// Keeps the windows whose action satisfies `keep`.
    pub fn filter_actions(&self, keep: impl Fn(&[f64]) -> bool) -> WindowSet {
        let mut out = Self::empty(
            self.dt,
            self.order,
            self.state_dim,
            self.action_dim,
            self.diffusion.is_some(),
        );
        for w in 0..self.len() {
            if keep(self.action(w)) {
                out.push(
                    self.state(w),
                    self.action(w),
                    self.reward(w),
                    self.drift(w),
                    self.diffusion(w),
                );
            }
        }
        out
    }
}

/// Exact windows for LQR: the action is held over the whole window, and the
/// drift and diffusion estimates are replaced by their kernel expectations.
pub fn lqr_exact_windows(
    sys: &LqrSystem,
    dt: f64,
    order: usize,
    points: &[(Vec<f64>, Vec<f64>)],
    opts: WindowOptions,
) -> Result<WindowSet> {
    let coeffs = bellman_order_coefficients(order)?.coeffs;
    let (d, m) = (sys.state_dim(), sys.action_dim());
    let with_diff = opts.diffusion == DiffusionMode::Empirical;
    let drift_factor = match opts.drift_scaling {
        DriftScaling::PerTime => 1.0 / dt,
        DriftScaling::AsPrinted => 1.0,
    };
    // Horizon-k mean maps and covariances.
    let mut maps = Vec::with_capacity(order);
    for k in 1..=order {
        let h = k as f64 * dt;
        let ms = matcore::mat_exp(&sys.a, h)?;
        let ma = matcore::phi1(&sys.a, h)? * &sys.b * h;
        let cov = if sys.sigma > 0.0 {
            matcore::gram_integral(&sys.a, h)? * (sys.sigma * sys.sigma * h)
        } else {
            DMatrix::zeros(d, d)
        };
        maps.push((ms, ma, cov));
    }
    let mut out = WindowSet::empty(dt, order, d, m, with_diff);
    for (s, a) in points {
        if s.len() != d || a.len() != m {
            return Err(Error::invalid("exact window point has wrong dimensions"));
        }
        let sv = DVector::from_column_slice(s);
        let av = DVector::from_column_slice(a);
        let mut drift = DVector::zeros(d);
        let mut diff = DMatrix::zeros(d, d);
        for (ak, (ms, ma, cov)) in coeffs.iter().zip(&maps) {
            let delta = ms * &sv + ma * &av - &sv;
            drift += &delta * (*ak * drift_factor);
            if with_diff {
                diff += (&delta * delta.transpose() + cov) * (*ak / dt);
            }
        }
        let diff_rm: Vec<f64> = diff.transpose().iter().copied().collect();
        out.push(
            s,
            a,
            sys.reward(s, a),
            drift.as_slice(),
            with_diff.then_some(&diff_rm[..]),
        );
    }
    Ok(out)
}

/// Exact windows for the Merton market with a held allocation.
pub fn merton_exact_windows(
    market: &MertonMarket,
    dt: f64,
    order: usize,
    points: &[(f64, f64)],
    opts: WindowOptions,
) -> Result<WindowSet> {
    let coeffs = bellman_order_coefficients(order)?.coeffs;
    let with_diff = opts.diffusion == DiffusionMode::Empirical;
    let drift_factor = match opts.drift_scaling {
        DriftScaling::PerTime => 1.0 / dt,
        DriftScaling::AsPrinted => 1.0,
    };
    let mut out = WindowSet::empty(dt, order, 1, 1, with_diff);
    for &(w, a) in points {
        if !(w > 0.0) || !(a >= 0.0) {
            return Err(Error::invalid("exact Merton window needs W > 0 and a >= 0"));
        }
        let mu = market.drift(a);
        let v = market.volatility(a);
        let (mut drift, mut diff) = (0.0, 0.0);
        for (k, ak) in coeffs.iter().enumerate() {
            let h = (k + 1) as f64 * dt;
            let g = (mu * h).exp();
            drift += ak * w * (g - 1.0) * drift_factor;
            diff += ak * w * w * (((2.0 * mu + v * v) * h).exp() - 2.0 * g + 1.0) / dt;
        }
        out.push(
            &[w],
            &[a],
            market.utility(w),
            &[drift],
            with_diff.then_some(&[diff][..]),
        );
    }
    Ok(out)
}
