//! Optimal-PhiBE and Optimal-BE policy iteration with closed-form improvement.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, Block, Term};
use crate::environments::sampling::draw_box;
use crate::environments::{
    sample_lqr_batch_with, sample_merton_batch_with, trajectory_rng, ActionSource, Interval, LqrSystem, MertonMarket,
    RolloutPlan, TrajectoryBatch,
};
use crate::error::{Error, Result};
use crate::matcore;
use crate::oracles::{self, l2_distance_on_box};
use crate::policy_eval::{
    be_policy_evaluation, phibe_policy_evaluation_windows, BeDiscount, CoefficientVector, ValueEstimate,
};
use crate::q_approx::{
    be_q_evaluation, phibe_q_galerkin_windows, phibe_q_gradient_descent_windows, BeQOptions, NextAction, QEstimate,
    Stopping,
};
use crate::windows::{lqr_exact_windows, merton_exact_windows, WindowOptions, WindowSet};

/// `a = K s + offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRecord", into = "PolicyRecord")]
pub struct LinearPolicy {
    pub k: DMatrix<f64>,
    pub offset: DVector<f64>,
}

/// Serialized form of a [`LinearPolicy`]: gain rows and offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRecord {
    pub k: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl From<LinearPolicy> for PolicyRecord {
    fn from(p: LinearPolicy) -> Self {
        PolicyRecord {
            k: oracles::rows(&p.k),
            offset: p.offset.iter().copied().collect(),
        }
    }
}

impl TryFrom<PolicyRecord> for LinearPolicy {
    type Error = Error;

    fn try_from(r: PolicyRecord) -> Result<Self> {
        let m = r.k.len();
        let d = r.k.first().map_or(0, Vec::len);
        if m == 0 || d == 0 || r.k.iter().any(|row| row.len() != d) || r.offset.len() != m {
            return Err(Error::invalid(
                "policy gain must be a nonempty m x d matrix with an m-vector offset",
            ));
        }
        let k = DMatrix::from_fn(m, d, |i, j| r.k[i][j]);
        Ok(LinearPolicy {
            k,
            offset: DVector::from_vec(r.offset),
        })
    }
}

impl LinearPolicy {
    /// Pure feedback `a = K s`.
    pub fn linear(k: DMatrix<f64>) -> Self {
        let m = k.nrows();
        Self {
            k,
            offset: DVector::zeros(m),
        }
    }

    pub fn scalar(k: f64) -> Self {
        Self::linear(DMatrix::from_element(1, 1, k))
    }

    /// Constant scalar action on a scalar state.
    pub fn constant(a: f64) -> Self {
        Self {
            k: DMatrix::zeros(1, 1),
            offset: DVector::from_element(1, a),
        }
    }

    pub fn zeros(state_dim: usize, action_dim: usize) -> Self {
        Self::linear(DMatrix::zeros(action_dim, state_dim))
    }

    pub fn state_dim(&self) -> usize {
        self.k.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn act_into(&self, s: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.offset[i] + (0..s.len()).map(|j| self.k[(i, j)] * s[j]).sum::<f64>();
        }
    }

    pub fn act(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.action_dim()];
        self.act_into(s, &mut out);
        out
    }

    /// Frobenius distance of gains plus offsets.
    pub fn distance(&self, other: &LinearPolicy) -> f64 {
        if self.k.shape() != other.k.shape() {
            return f64::INFINITY;
        }
        ((&self.k - &other.k).norm_squared() + (&self.offset - &other.offset).norm_squared()).sqrt()
    }
}

/// Admissible actions for the closed-form argmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionConstraints {
    #[default]
    Unconstrained,
    /// Scalar actions clipped to `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
}

/// Closed-form `argmax_a q(s, a)`.
///
/// Quadratic bases give `K = -(2 W_aa)^-1 W_sa^T`; power bases give the vertex
/// `-w_1/(2 w_2)`, clipped when `constraints` is an interval.
pub fn improve_policy(q: &QEstimate, constraints: ActionConstraints) -> Result<LinearPolicy> {
    let basis = &q.coeffs.basis;
    let w = &q.coeffs.weights;
    if !basis.is_state_action() {
        return Err(Error::invalid("policy improvement needs a state-action basis"));
    }
    if basis.blocks().iter().any(|b| matches!(b, Block::Power { .. })) {
        let c = power_coefficients(basis, w)?;
        if !(c[2] < 0.0) {
            return Err(Error::NonConcave);
        }
        let mut a = -c[1] / (2.0 * c[2]);
        if let ActionConstraints::Interval { lo, hi } = constraints {
            a = a.clamp(lo, hi);
        }
        return Ok(LinearPolicy::constant(a));
    }
    let (d, m) = (basis.state_dim(), basis.action_dim());
    let mut waa = DMatrix::<f64>::zeros(m, m);
    let mut wsa = DMatrix::<f64>::zeros(d, m);
    for (t, c) in basis.terms().iter().zip(w) {
        match *t {
            Term::ActionQuad(k, l) if k == l => waa[(k, k)] += c,
            Term::ActionQuad(k, l) => {
                waa[(k, l)] += c / 2.0;
                waa[(l, k)] += c / 2.0;
            }
            Term::StateAction(i, k) => wsa[(i, k)] += c,
            _ => {}
        }
    }
    let neg = -(&waa * 2.0);
    let chol = neg.cholesky().ok_or(Error::NonConcave)?;
    Ok(LinearPolicy::linear(chol.solve(&wsa.transpose())))
}

/// Coefficients of `a^0, a^1, a^2` in a power basis.
fn power_coefficients(basis: &BasisSet, w: &[f64]) -> Result<[f64; 3]> {
    let mut c = [0.0; 3];
    for (t, wk) in basis.terms().iter().zip(w) {
        match *t {
            Term::Power { action_degree, .. } if action_degree <= 2 => c[action_degree as usize] += wk,
            _ => return Err(Error::invalid("power-basis improvement needs action degrees 0..=2")),
        }
    }
    Ok(c)
}

/// Per-branch argmax for a scalar action with a kink at `kink`: each branch's
/// q is maximized over its own interval (vertex if concave, endpoints otherwise)
/// and the branch with the larger `w_0 + w_1 a + w_2 a^2` wins.
pub fn improve_policy_piecewise(
    low: Option<&QEstimate>,
    high: Option<&QEstimate>,
    kink: f64,
    a_max: f64,
) -> Result<LinearPolicy> {
    let mut best: Option<(f64, f64)> = None;
    for (q, lo, hi) in [(low, 0.0, kink), (high, kink, a_max)] {
        let Some(q) = q else { continue };
        let c = power_coefficients(&q.coeffs.basis, &q.coeffs.weights)?;
        let f = |a: f64| c[0] + c[1] * a + c[2] * a * a;
        let a = if c[2] < 0.0 {
            (-c[1] / (2.0 * c[2])).clamp(lo, hi)
        } else if f(lo) >= f(hi) {
            lo
        } else {
            hi
        };
        if best.is_none_or(|(_, v)| f(a) > v) {
            best = Some((a, f(a)));
        }
    }
    best.map(|(a, _)| LinearPolicy::constant(a))
        .ok_or_else(|| Error::invalid("no branch has a q estimate"))
}

/// Environment driven by the policy-iteration loops.
#[derive(Clone, Debug, PartialEq)]
pub enum Env {
    Lqr(LqrSystem),
    Merton(MertonMarket),
}

impl Env {
    pub fn beta(&self) -> f64 {
        match self {
            Env::Lqr(s) => s.beta,
            Env::Merton(m) => m.beta,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Lqr(s) => s.state_dim(),
            Env::Merton(_) => 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::Lqr(s) => s.action_dim(),
            Env::Merton(_) => 1,
        }
    }

    pub fn sample(
        &self,
        dt: f64,
        plan: &RolloutPlan<'_>,
        source: ActionSource<'_>,
        seed: u64,
    ) -> Result<TrajectoryBatch> {
        match self {
            Env::Lqr(s) => sample_lqr_batch_with(s, dt, plan, source, seed),
            Env::Merton(m) => sample_merton_batch_with(m, dt, plan, source, seed),
        }
    }

    fn exact_windows(
        &self,
        dt: f64,
        order: usize,
        points: &[(Vec<f64>, Vec<f64>)],
        opts: WindowOptions,
    ) -> Result<WindowSet> {
        match self {
            Env::Lqr(s) => lqr_exact_windows(s, dt, order, points, opts),
            Env::Merton(m) => {
                let p: Vec<(f64, f64)> = points.iter().map(|(s, a)| (s[0], a[0])).collect();
                merton_exact_windows(m, dt, order, &p, opts)
            }
        }
    }

    /// Default evaluation box: `[-3, 3]^d` for LQR, `[0.1, 6]` for Merton.
    pub fn default_box(&self) -> Vec<Interval> {
        match self {
            Env::Lqr(s) => vec![(-3.0, 3.0); s.state_dim()],
            Env::Merton(_) => vec![(0.1, 6.0)],
        }
    }

    /// Optimal value as a function of the state.
    fn optimal_value(&self) -> Result<Box<dyn Fn(&[f64]) -> f64 + Sync>> {
        match self {
            Env::Lqr(s) => {
                let (_, v) = oracles::lqr_optimal(s)?;
                Ok(Box::new(move |x: &[f64]| v.eval(x)))
            }
            Env::Merton(m) => {
                let c = oracles::merton_policy_value(m, oracles::merton_optimal(m))?;
                let p = m.power();
                Ok(Box::new(move |x: &[f64]| c * x[0].powf(p)))
            }
        }
    }

    /// Exact value of `policy`, or `None` when it is infinite.
    fn policy_value(&self, policy: &LinearPolicy) -> Option<Box<dyn Fn(&[f64]) -> f64 + Sync>> {
        match self {
            Env::Lqr(s) => {
                let v = oracles::lqr_policy_value(s, policy).ok()?;
                Some(Box::new(move |x: &[f64]| v.eval(x)))
            }
            Env::Merton(m) => {
                let c = oracles::merton_policy_value(m, policy.offset[0]).ok()?;
                let p = m.power();
                Some(Box::new(move |x: &[f64]| c * x[0].powf(p)))
            }
        }
    }
}

/// Starting policy. Merton: `a = 0.5`. LQR: `K = 0` when that is stable for
/// both the continuous (`A - beta/2`) and the sampled (`e^{A dt}`) dynamics.
/// Otherwise the gains `B~^+ (+-I/2 - A~)` placing the sampled closed loop at
/// `+-I/2` are tried and, of those stable for both dynamics, the one with the
/// larger continuous decay rate is kept; a discrete LQR gain is the fallback.
pub fn default_initial_policy(env: &Env, dt: f64) -> Result<LinearPolicy> {
    let sys = match env {
        Env::Merton(_) => return Ok(LinearPolicy::constant(0.5)),
        Env::Lqr(s) => s,
    };
    let d = sys.state_dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let at = matcore::mat_exp(&sys.a, dt)?;
    let bt = matcore::phi1(&sys.a, dt)? * &sys.b * dt;
    let shifted = &sys.a - &eye * (sys.beta / 2.0);
    if matcore::is_hurwitz(&shifted) && matcore::spectral_radius(&at) < 1.0 {
        return Ok(LinearPolicy::zeros(d, sys.action_dim()));
    }
    let abscissa = |k: &DMatrix<f64>| matcore::spectral_abscissa(&(&shifted + &sys.b * k));
    let stable = |k: &DMatrix<f64>| matcore::spectral_radius(&(&at + &bt * k)) < 1.0 && abscissa(k) < 0.0;
    if let Ok(pinv) = bt.clone().pseudo_inverse(1e-12) {
        let best = [0.5, -0.5]
            .iter()
            .map(|&rho| &pinv * (&eye * rho - &at))
            .filter(|k| stable(k))
            .min_by(|x, y| abscissa(x).total_cmp(&abscissa(y)));
        if let Some(k) = best {
            return Ok(LinearPolicy::linear(k));
        }
    }
    let m = sys.action_dim();
    let p = matcore::solve_dare(&at, &bt, &(-&eye), &(-DMatrix::<f64>::identity(m, m)), 1.0, None)?;
    let lhs = -DMatrix::<f64>::identity(m, m) + bt.transpose() * &p * &bt;
    let k = -(lhs.try_inverse().ok_or(Error::Singular {
        what: "initial gain",
        condition: f64::INFINITY,
    })? * bt.transpose()
        * &p
        * &at);
    Ok(LinearPolicy::linear(k))
}

/// Mixes a master seed, a stream tag and an index into a child seed (splitmix64).
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_Q: u64 = 1;
const TAG_PI: u64 = 2;
const TAG_BE: u64 = 3;
const TAG_FINAL: u64 = 4;

/// Sizes and boxes of the data used by one policy-iteration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    /// Trajectories and steps of the fixed random-action batch.
    pub q_trajectories: usize,
    pub q_steps: usize,
    /// Hold length of the random actions; defaults to the estimator order.
    #[serde(default)]
    pub q_hold_steps: Option<usize>,
    /// Trajectories and steps of each per-iteration policy batch.
    pub pi_trajectories: usize,
    pub pi_steps: usize,
    #[serde(default = "one")]
    pub pi_hold_steps: usize,
    pub init_box: Vec<Interval>,
    pub action_box: Vec<Interval>,
}

fn one() -> usize {
    1
}

/// Sampled trajectories, or exact kernel moments at uniformly drawn points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Sampled,
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum QMethod {
    #[default]
    Galerkin,
    GradientDescent {
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        stopping: Stopping,
    },
}

/// How the improved policy is extracted from q.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", deny_unknown_fields)]
pub enum ImprovementRule {
    Closed {
        #[serde(default)]
        constraints: ActionConstraints,
    },
    /// Separate q fits for actions `<= kink` and `> kink` (see [`improve_policy_piecewise`]).
    Branches { kink: f64, a_max: f64 },
}

impl Default for ImprovementRule {
    fn default() -> Self {
        ImprovementRule::Closed {
            constraints: ActionConstraints::Unconstrained,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhibePiConfig {
    pub dt: f64,
    pub order: usize,
    pub iterations: usize,
    #[serde(default)]
    pub early_stop_tol: Option<f64>,
    #[serde(default)]
    pub q_method: QMethod,
    #[serde(default)]
    pub window: WindowOptions,
    #[serde(default)]
    pub data: DataMode,
    pub plan: BatchPlan,
    #[serde(default)]
    pub improvement: ImprovementRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BePiConfig {
    pub dt: f64,
    pub iterations: usize,
    #[serde(default)]
    pub early_stop_tol: Option<f64>,
    #[serde(default)]
    pub discount: BeDiscount,
    #[serde(default)]
    pub next_action: NextAction,
    pub plan: BatchPlan,
    #[serde(default)]
    pub improvement: ImprovementRule,
}

/// One policy-iteration step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub seed: u64,
    /// Policy evaluated in this iteration.
    pub policy: LinearPolicy,
    /// Value coefficients of `policy` (empty for BE, whose value is read off q).
    pub value: Vec<f64>,
    /// q coefficients, one vector per fitted branch.
    pub q: Vec<Vec<f64>>,
    pub improved: LinearPolicy,
    /// `L2` distance of the estimated value of `policy` to the optimal value.
    pub value_error: Option<f64>,
    /// `L2` distance of the exact value of `policy` to the optimal value.
    pub policy_value_error: Option<f64>,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Per-iteration records and the final evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub final_policy: Option<LinearPolicy>,
    pub final_value: Vec<f64>,
    pub final_value_error: Option<f64>,
    pub final_policy_value_error: Option<f64>,
}

impl IterationTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format `iteration,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,metric,value\n");
        let mut row = |it: usize, metric: &str, v: f64| out.push_str(&format!("{it},{metric},{v}\n"));
        for r in &self.records {
            for (i, k) in r.policy.k.iter().enumerate() {
                row(r.iteration, &format!("k_{i}"), *k);
            }
            for (i, k) in r.policy.offset.iter().enumerate() {
                row(r.iteration, &format!("offset_{i}"), *k);
            }
            for (i, v) in r.value.iter().enumerate() {
                row(r.iteration, &format!("theta_{i}"), *v);
            }
            for (b, q) in r.q.iter().enumerate() {
                for (i, v) in q.iter().enumerate() {
                    row(r.iteration, &format!("omega_{b}_{i}"), *v);
                }
            }
            if let Some(e) = r.value_error {
                row(r.iteration, "value_error", e);
            }
            if let Some(e) = r.policy_value_error {
                row(r.iteration, "policy_value_error", e);
            }
        }
        out
    }
}

/// Result of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct PiOutcome {
    pub policy: LinearPolicy,
    pub value: ValueEstimate,
    pub trace: IterationTrace,
}

/// Failure inside a run, with the records completed before it.
#[derive(Debug, thiserror::Error)]
#[error("iteration {iteration}: {source}")]
pub struct PiError {
    pub iteration: usize,
    #[source]
    pub source: Error,
    pub trace: IterationTrace,
}

impl PiError {
    pub fn into_error(self) -> Error {
        Error::AtIteration {
            iteration: self.iteration,
            source: Box::new(self.source),
        }
    }
}

/// Errors against the analytic oracles on the evaluation box.
struct Scorer<'a> {
    env: &'a Env,
    bounds: Vec<Interval>,
    grid: usize,
    optimal: Box<dyn Fn(&[f64]) -> f64 + Sync>,
}

impl<'a> Scorer<'a> {
    fn new(env: &'a Env, bounds: &[Interval]) -> Result<Self> {
        let grid = match bounds.len() {
            1 => 601,
            2 => 201,
            _ => 21,
        };
        Ok(Self {
            env,
            bounds: bounds.to_vec(),
            grid,
            optimal: env.optimal_value()?,
        })
    }

    fn distance(&self, f: impl Fn(&[f64]) -> f64) -> Option<f64> {
        let d = l2_distance_on_box(f, &self.optimal, &self.bounds, self.grid).ok()?;
        d.is_finite().then_some(d)
    }

    fn policy_error(&self, policy: &LinearPolicy) -> Option<f64> {
        let v = self.env.policy_value(policy)?;
        self.distance(v)
    }
}

fn check_common(env: &Env, dt: f64, iterations: usize, plan: &BatchPlan, pi0: &LinearPolicy) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    if plan.init_box.len() != env.state_dim() || plan.action_box.len() != env.action_dim() {
        return Err(Error::invalid("batch plan boxes do not match the environment"));
    }
    if pi0.state_dim() != env.state_dim() || pi0.action_dim() != env.action_dim() {
        return Err(Error::invalid("initial policy dimensions do not match the environment"));
    }
    Ok(())
}

fn uniform_points(seed: u64, count: usize, sbox: &[Interval], abox: &[Interval]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng: ChaCha8Rng = trajectory_rng(seed, 0);
    (0..count)
        .map(|_| {
            let mut s = vec![0.0; sbox.len()];
            let mut a = vec![0.0; abox.len()];
            draw_box(&mut rng, sbox, &mut s);
            draw_box(&mut rng, abox, &mut a);
            (s, a)
        })
        .collect()
}

fn split_branches(windows: &WindowSet, rule: ImprovementRule) -> Vec<WindowSet> {
    match rule {
        ImprovementRule::Closed { .. } => vec![windows.clone()],
        ImprovementRule::Branches { kink, .. } => vec![
            windows.filter_actions(|a| a[0] <= kink),
            windows.filter_actions(|a| a[0] > kink),
        ],
    }
}

fn improve(qs: &[QEstimate], rule: ImprovementRule) -> Result<LinearPolicy> {
    match rule {
        ImprovementRule::Closed { constraints } => improve_policy(&qs[0], constraints),
        ImprovementRule::Branches { kink, a_max } => improve_policy_piecewise(qs.first(), qs.get(1), kink, a_max),
    }
}

/// i-th order Optimal-PhiBE policy iteration.
///
/// The random-action data is generated once; each iteration samples data
/// under the current policy, evaluates it, fits q on the fixed data and
/// improves greedily. A final evaluation of the last policy gives the value.
/// With `eval_box`, errors against the analytic oracles are recorded.
pub fn optimal_phibe_pi(
    env: &Env,
    phi: &BasisSet,
    psi: &BasisSet,
    pi0: &LinearPolicy,
    cfg: &PhibePiConfig,
    seed: u64,
    eval_box: Option<&[Interval]>,
) -> std::result::Result<PiOutcome, PiError> {
    let mut trace = IterationTrace::default();
    let fail = |iteration: usize, source: Error, trace: &IterationTrace| PiError {
        iteration,
        source,
        trace: trace.clone(),
    };
    let setup = || -> Result<(Vec<WindowSet>, Option<Scorer<'_>>)> {
        check_common(env, cfg.dt, cfg.iterations, &cfg.plan, pi0)?;
        let plan = &cfg.plan;
        let qseed = derive_seed(seed, TAG_Q, 0);
        let windows = match cfg.data {
            DataMode::Sampled => {
                let batch = env.sample(
                    cfg.dt,
                    &RolloutPlan {
                        num_traj: plan.q_trajectories,
                        steps: plan.q_steps,
                        init_box: &plan.init_box,
                    },
                    ActionSource::Uniform {
                        action_box: &plan.action_box,
                        hold_steps: plan.q_hold_steps.unwrap_or(cfg.order),
                    },
                    qseed,
                )?;
                WindowSet::from_batch(&batch, cfg.order, cfg.window)?
            }
            DataMode::Exact => {
                let pts = uniform_points(
                    qseed,
                    plan.q_trajectories * plan.q_steps,
                    &plan.init_box,
                    &plan.action_box,
                );
                env.exact_windows(cfg.dt, cfg.order, &pts, cfg.window)?
            }
        };
        let scorer = eval_box.map(|b| Scorer::new(env, b)).transpose()?;
        Ok((split_branches(&windows, cfg.improvement), scorer))
    };
    let (q_windows, scorer) = setup().map_err(|e| fail(0, e, &trace))?;

    let evaluate = |policy: &LinearPolicy, bseed: u64| -> Result<ValueEstimate> {
        let plan = &cfg.plan;
        let windows = match cfg.data {
            DataMode::Sampled => {
                let batch = env.sample(
                    cfg.dt,
                    &RolloutPlan {
                        num_traj: plan.pi_trajectories,
                        steps: plan.pi_steps,
                        init_box: &plan.init_box,
                    },
                    ActionSource::Policy {
                        policy,
                        hold_steps: plan.pi_hold_steps,
                    },
                    bseed,
                )?;
                let opts = WindowOptions {
                    selection: crate::windows::WindowSelection::All,
                    ..cfg.window
                };
                WindowSet::from_batch(&batch, cfg.order, opts)?
            }
            DataMode::Exact => {
                let mut pts = uniform_points(bseed, plan.pi_trajectories * plan.pi_steps, &plan.init_box, &[]);
                for (s, a) in &mut pts {
                    *a = policy.act(s);
                }
                env.exact_windows(cfg.dt, cfg.order, &pts, cfg.window)?
            }
        };
        phibe_policy_evaluation_windows(&windows, phi, env.beta())
    };

    let mut policy = pi0.clone();
    let mut warm: Vec<Option<CoefficientVector>> = vec![None; q_windows.len()];
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let bseed = derive_seed(seed, TAG_PI, it as u64);
        let step = || -> Result<(ValueEstimate, Vec<QEstimate>, LinearPolicy)> {
            let value = evaluate(&policy, bseed)?;
            let mut qs = Vec::with_capacity(q_windows.len());
            for (b, w) in q_windows.iter().enumerate() {
                let q = match cfg.q_method {
                    QMethod::Galerkin => phibe_q_galerkin_windows(w, psi, &value)?,
                    QMethod::GradientDescent { alpha, stopping } => {
                        let start = warm[b].clone().unwrap_or_else(|| CoefficientVector::zeros(psi.clone()));
                        phibe_q_gradient_descent_windows(w, psi, &value, &start, alpha, stopping)?.estimate
                    }
                };
                qs.push(q);
            }
            let improved = improve(&qs, cfg.improvement)?;
            Ok((value, qs, improved))
        };
        let (value, qs, improved) = step().map_err(|e| fail(it, e, &trace))?;
        for (b, q) in qs.iter().enumerate() {
            warm[b] = Some(q.coeffs.clone());
        }
        let record = IterationRecord {
            iteration: it,
            seed: bseed,
            policy: policy.clone(),
            value: value.coeffs.weights.clone(),
            q: qs.iter().map(|q| q.coeffs.weights.clone()).collect(),
            improved: improved.clone(),
            value_error: scorer
                .as_ref()
                .and_then(|s| s.distance(|x| value.eval(x).unwrap_or(f64::NAN))),
            policy_value_error: scorer.as_ref().and_then(|s| s.policy_error(&policy)),
            wall_time: start.elapsed().as_secs_f64(),
        };
        trace.records.push(record);
        let change = improved.distance(&policy);
        policy = improved;
        if cfg.early_stop_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }
    let last = trace.records.len();
    let value = evaluate(&policy, derive_seed(seed, TAG_FINAL, last as u64)).map_err(|e| fail(last, e, &trace))?;
    finish(&mut trace, &policy, &value, scorer.as_ref());
    Ok(PiOutcome { policy, value, trace })
}

fn finish(trace: &mut IterationTrace, policy: &LinearPolicy, value: &ValueEstimate, scorer: Option<&Scorer<'_>>) {
    trace.final_policy = Some(policy.clone());
    trace.final_value = value.coeffs.weights.clone();
    if let Some(s) = scorer {
        trace.final_value_error = s.distance(|x| value.eval(x).unwrap_or(f64::NAN));
        trace.final_policy_value_error = s.policy_error(policy);
    }
}

/// Optimal-BE policy iteration: each iteration samples trajectories with a
/// random first action followed by the current policy, fits Q by the BE
/// equation and improves greedily; the final value comes from a BE
/// evaluation of the last policy.
pub fn optimal_be_pi(
    env: &Env,
    phi: &BasisSet,
    psi: &BasisSet,
    pi0: &LinearPolicy,
    cfg: &BePiConfig,
    seed: u64,
    eval_box: Option<&[Interval]>,
) -> std::result::Result<PiOutcome, PiError> {
    let mut trace = IterationTrace::default();
    let fail = |iteration: usize, source: Error, trace: &IterationTrace| PiError {
        iteration,
        source,
        trace: trace.clone(),
    };
    check_common(env, cfg.dt, cfg.iterations, &cfg.plan, pi0).map_err(|e| fail(0, e, &trace))?;
    let scorer = eval_box
        .map(|b| Scorer::new(env, b))
        .transpose()
        .map_err(|e| fail(0, e, &trace))?;
    let plan = &cfg.plan;
    let rollout = RolloutPlan {
        num_traj: plan.pi_trajectories,
        steps: plan.pi_steps,
        init_box: &plan.init_box,
    };
    let filters: Vec<Box<dyn Fn(&[f64]) -> bool + Sync>> = match cfg.improvement {
        ImprovementRule::Closed { .. } => vec![Box::new(|_: &[f64]| true)],
        ImprovementRule::Branches { kink, .. } => vec![
            Box::new(move |a: &[f64]| a[0] <= kink),
            Box::new(move |a: &[f64]| a[0] > kink),
        ],
    };
    let mut policy = pi0.clone();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let bseed = derive_seed(seed, TAG_BE, it as u64);
        let step = || -> Result<(Vec<QEstimate>, LinearPolicy)> {
            let batch = env.sample(
                cfg.dt,
                &rollout,
                ActionSource::UniformThenPolicy {
                    action_box: &plan.action_box,
                    policy: &policy,
                },
                bseed,
            )?;
            let mut qs = Vec::with_capacity(filters.len());
            for f in &filters {
                let opts = BeQOptions {
                    discount: cfg.discount,
                    next_action: cfg.next_action,
                    policy: Some(&policy),
                    action_filter: Some(f.as_ref()),
                };
                qs.push(be_q_evaluation(&batch, psi, env.beta(), cfg.dt, opts)?);
            }
            let improved = improve(&qs, cfg.improvement)?;
            Ok((qs, improved))
        };
        let (qs, improved) = step().map_err(|e| fail(it, e, &trace))?;
        // The value of the evaluated policy is q at its own action.
        let value_of = |x: &[f64]| -> f64 {
            let a = policy.act(x);
            let idx = match cfg.improvement {
                ImprovementRule::Branches { kink, .. } if a[0] > kink => 1,
                _ => 0,
            };
            qs.get(idx).and_then(|q| q.coeffs.eval(x, &a).ok()).unwrap_or(f64::NAN)
        };
        let record = IterationRecord {
            iteration: it,
            seed: bseed,
            policy: policy.clone(),
            value: Vec::new(),
            q: qs.iter().map(|q| q.coeffs.weights.clone()).collect(),
            improved: improved.clone(),
            value_error: scorer.as_ref().and_then(|s| s.distance(value_of)),
            policy_value_error: scorer.as_ref().and_then(|s| s.policy_error(&policy)),
            wall_time: start.elapsed().as_secs_f64(),
        };
        trace.records.push(record);
        let change = improved.distance(&policy);
        policy = improved;
        if cfg.early_stop_tol.is_some_and(|tol| change < tol) {
            break;
        }
    }
    let last = trace.records.len();
    let final_eval = || -> Result<ValueEstimate> {
        let batch = env.sample(
            cfg.dt,
            &rollout,
            ActionSource::Policy {
                policy: &policy,
                hold_steps: 1,
            },
            derive_seed(seed, TAG_FINAL, last as u64),
        )?;
        be_policy_evaluation(&batch, phi, env.beta(), cfg.dt, cfg.discount)
    };
    let value = final_eval().map_err(|e| fail(last, e, &trace))?;
    finish(&mut trace, &policy, &value, scorer.as_ref());
    Ok(PiOutcome { policy, value, trace })
}
