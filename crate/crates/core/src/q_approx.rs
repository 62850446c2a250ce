//! State-action function estimation: PhiBE q by Galerkin projection or
//! gradient descent, and Optimal-BE Q evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::environments::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::lsq;
use crate::policy_eval::{check_dt, transition_index, BeDiscount, CoefficientVector, ValueEstimate};
use crate::policy_iteration::LinearPolicy;
use crate::windows::{DiffusionMode, WindowOptions, WindowSet};

/// How a q estimate was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMethodTag {
    Galerkin,
    GradientDescent,
    Be,
}

/// Solver diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QDiagnostics {
    pub condition: Option<f64>,
    pub final_loss: Option<f64>,
    pub iterations: Option<usize>,
    pub gradient_norm: Option<f64>,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEstimate {
    pub coeffs: CoefficientVector,
    pub method: QMethodTag,
    pub diagnostics: QDiagnostics,
}

/// Gradient-descent stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stopping {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for Stopping {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            grad_tol: 1e-9,
        }
    }
}

/// Result of [`phibe_q_gradient_descent`] with its loss trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct GdRun {
    pub estimate: QEstimate,
    pub loss_history: Vec<f64>,
    pub step_size: f64,
}

/// Normal equations `G w = c` of the q least-squares problem and `sum t^2`.
struct QSystem {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    target_sq: f64,
    count: usize,
}

fn check_q_basis(psi: &BasisSet, windows: &WindowSet) -> Result<()> {
    if !psi.is_state_action() || psi.state_dim() != windows.state_dim || psi.action_dim() != windows.action_dim {
        return Err(Error::invalid("q basis does not match the batch dimensions"));
    }
    Ok(())
}

fn q_system(windows: &WindowSet, psi: &BasisSet, value: &ValueEstimate) -> Result<QSystem> {
    check_q_basis(psi, windows)?;
    let phi = &value.coeffs.basis;
    if phi.state_dim() != windows.state_dim || phi.is_state_action() {
        return Err(Error::invalid("value basis does not match the batch dimensions"));
    }
    let theta = &value.coeffs.weights;
    let n = psi.size();
    let nv = phi.size();
    let target = |w: usize| -> Result<f64> {
        let mut gen = vec![0.0; nv];
        phi.generator_into(windows.state(w), &[], windows.drift(w), windows.diffusion(w), &mut gen)?;
        Ok(windows.reward(w) + gen.iter().zip(theta).map(|(g, t)| g * t).sum::<f64>())
    };
    let (gram, rhs) = lsq::assemble(windows.len(), n, |w, u, row| {
        psi.features_into(windows.state(w), windows.action(w), u)?;
        row.copy_from_slice(u);
        target(w)
    })?;
    let mut target_sq = 0.0;
    for w in 0..windows.len() {
        target_sq += target(w)?.powi(2);
    }
    Ok(QSystem {
        gram,
        rhs,
        target_sq,
        count: windows.len(),
    })
}

/// i-th order PhiBE q by Galerkin projection on a sampled batch.
pub fn phibe_q_galerkin(
    batch: &TrajectoryBatch,
    psi: &BasisSet,
    value: &ValueEstimate,
    dt: f64,
    order: usize,
    diffusion: DiffusionMode,
) -> Result<QEstimate> {
    check_dt(batch, dt)?;
    if batch.meta.hold_steps < order {
        log::warn!(
            "q batch holds actions for {} steps but order {order} assumes {order}",
            batch.meta.hold_steps
        );
    }
    let windows = WindowSet::from_batch(
        batch,
        order,
        WindowOptions {
            diffusion,
            ..Default::default()
        },
    )?;
    phibe_q_galerkin_windows(&windows, psi, value)
}

/// Galerkin q on prepared windows: `[sum psi psi^T] w = sum (r + L V) psi`.
pub fn phibe_q_galerkin_windows(windows: &WindowSet, psi: &BasisSet, value: &ValueEstimate) -> Result<QEstimate> {
    let sys = q_system(windows, psi, value)?;
    let (w, cond) = lsq::solve(&sys.gram, &sys.rhs, "Gram matrix")?;
    let loss = loss(&sys, &w);
    Ok(QEstimate {
        coeffs: CoefficientVector::new(w.as_slice().to_vec(), psi.clone())?,
        method: QMethodTag::Galerkin,
        diagnostics: QDiagnostics {
            condition: Some(cond),
            final_loss: Some(loss),
            sample_count: sys.count,
            ..Default::default()
        },
    })
}

fn loss(sys: &QSystem, w: &DVector<f64>) -> f64 {
    let quad = w.dot(&(&sys.gram * w));
    (quad - 2.0 * w.dot(&sys.rhs) + sys.target_sq) / (2.0 * sys.count as f64)
}

/// i-th order PhiBE q by full-batch gradient descent on a sampled batch.
#[allow(clippy::too_many_arguments)]
pub fn phibe_q_gradient_descent(
    batch: &TrajectoryBatch,
    psi: &BasisSet,
    value: &ValueEstimate,
    omega0: &CoefficientVector,
    alpha: Option<f64>,
    dt: f64,
    order: usize,
    diffusion: DiffusionMode,
    stopping: Stopping,
) -> Result<GdRun> {
    check_dt(batch, dt)?;
    let windows = WindowSet::from_batch(
        batch,
        order,
        WindowOptions {
            diffusion,
            ..Default::default()
        },
    )?;
    phibe_q_gradient_descent_windows(&windows, psi, value, omega0, alpha, stopping)
}

/// Gradient descent `w <- w - alpha (G w - c)/N` on prepared windows.
/// `alpha = None` uses `1/lambda_max(G/N)`.
pub fn phibe_q_gradient_descent_windows(
    windows: &WindowSet,
    psi: &BasisSet,
    value: &ValueEstimate,
    omega0: &CoefficientVector,
    alpha: Option<f64>,
    stopping: Stopping,
) -> Result<GdRun> {
    if omega0.basis != *psi {
        return Err(Error::invalid("initial coefficients use a different basis"));
    }
    let sys = q_system(windows, psi, value)?;
    let nf = sys.count as f64;
    let alpha = match alpha {
        Some(a) if a > 0.0 && a.is_finite() => a,
        Some(_) => return Err(Error::invalid("step size must be positive")),
        None => {
            let lmax = SymmetricEigen::new(&sys.gram / nf).eigenvalues.max();
            if !(lmax > 0.0) {
                return Err(Error::Singular {
                    what: "Gram matrix",
                    condition: f64::INFINITY,
                });
            }
            1.0 / lmax
        }
    };
    let mut w = DVector::from_column_slice(&omega0.weights);
    let mut history = vec![loss(&sys, &w)];
    let mut grad = (&sys.gram * &w - &sys.rhs) / nf;
    let mut iters = 0;
    while grad.norm() >= stopping.grad_tol && iters < stopping.max_iters {
        w -= &grad * alpha;
        if !(w.norm() <= 1e8) {
            return Err(Error::StepSizeTooLarge);
        }
        grad = (&sys.gram * &w - &sys.rhs) / nf;
        history.push(loss(&sys, &w));
        iters += 1;
    }
    let gnorm = grad.norm();
    if gnorm >= stopping.grad_tol {
        log::warn!("gradient descent stopped at {iters} iterations with gradient norm {gnorm:e}");
    }
    Ok(GdRun {
        estimate: QEstimate {
            coeffs: CoefficientVector::new(w.as_slice().to_vec(), psi.clone())?,
            method: QMethodTag::GradientDescent,
            diagnostics: QDiagnostics {
                final_loss: history.last().copied(),
                iterations: Some(iters),
                gradient_norm: Some(gnorm),
                sample_count: sys.count,
                ..Default::default()
            },
        },
        loss_history: history,
        step_size: alpha,
    })
}

/// Action paired with the next state in the BE Q equation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextAction {
    /// `pi(s^{j+1})`.
    #[default]
    Policy,
    /// The current recorded action `a^j`.
    AsRecorded,
}

/// Options of [`be_q_evaluation`].
#[derive(Clone, Copy, Default)]
pub struct BeQOptions<'a> {
    pub discount: BeDiscount,
    pub next_action: NextAction,
    /// Required when `next_action` is [`NextAction::Policy`].
    pub policy: Option<&'a LinearPolicy>,
    /// Keeps only transitions whose action passes.
    pub action_filter: Option<&'a (dyn Fn(&[f64]) -> bool + Sync)>,
}

/// Optimal-BE Q evaluation:
/// `sum psi (psi - gamma psi(s', a'))^T w = sum r~ psi`.
pub fn be_q_evaluation(
    batch: &TrajectoryBatch,
    psi: &BasisSet,
    beta: f64,
    dt: f64,
    opts: BeQOptions<'_>,
) -> Result<QEstimate> {
    check_dt(batch, dt)?;
    batch.validate()?;
    if !psi.is_state_action() || psi.state_dim() != batch.state_dim || psi.action_dim() != batch.action_dim {
        return Err(Error::invalid("q basis does not match the batch dimensions"));
    }
    if opts.next_action == NextAction::Policy && opts.policy.is_none() {
        return Err(Error::invalid("policy next action requires a policy"));
    }
    let gamma = opts.discount.gamma(beta, dt);
    let scale = opts.discount.reward_scale(beta, dt);
    let mut index = transition_index(batch, 1)?;
    if let Some(keep) = opts.action_filter {
        index.retain(|&(l, j)| keep(batch.action(l, j)));
    }
    let n = psi.size();
    let m = batch.action_dim;
    let row_fn = |k: usize, u: &mut [f64], row: &mut [f64]| -> Result<f64> {
        let (l, j) = index[k];
        let act = batch.action(l, j);
        psi.features_into(batch.state(l, j), act, u)?;
        let next_s = batch.state(l, j + 1);
        let mut next_a = vec![0.0; m];
        match (opts.next_action, opts.policy) {
            (NextAction::Policy, Some(p)) => p.act_into(next_s, &mut next_a),
            _ => next_a.copy_from_slice(act),
        }
        let mut nx = vec![0.0; n];
        psi.features_into(next_s, &next_a, &mut nx)?;
        for p in 0..n {
            row[p] = u[p] - gamma * nx[p];
        }
        Ok(scale * batch.reward(l, j))
    };
    let (a, b) = lsq::assemble(index.len(), n, row_fn)?;
    let (w, cond) = match lsq::solve(&a, &b, "BE Q matrix") {
        Err(Error::Singular { .. }) => lsq::solve_factored(index.len(), n, row_fn, "BE Q matrix")?,
        other => other?,
    };
    Ok(QEstimate {
        coeffs: CoefficientVector::new(w.as_slice().to_vec(), psi.clone())?,
        method: QMethodTag::Be,
        diagnostics: QDiagnostics {
            condition: Some(cond),
            sample_count: index.len(),
            ..Default::default()
        },
    })
}
