//! Experiment harness: versioned JSON configs, per-case policy-iteration
//! runs, interval and batch-size sweeps, analytic error atlases, and tidy
//! CSV/JSON outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{merton_q_basis, merton_value_basis, quadratic_state_action_basis, quadratic_state_basis, BasisSet};
use crate::coefficients::bellman_order_coefficients;
use crate::environments::{Interval, LqrSystem, MertonMarket};
use crate::error::{Error, Result};
use crate::oracles;
use crate::policy_eval::BeDiscount;
use crate::policy_iteration::{
    default_initial_policy, derive_seed, optimal_be_pi, optimal_phibe_pi, BatchPlan, BePiConfig, DataMode, Env,
    ImprovementRule, IterationTrace, LinearPolicy, PhibePiConfig, PolicyRecord, QMethod,
};
use crate::q_approx::NextAction;
use crate::windows::{DiffusionMode, WindowOptions};

pub const SCHEMA_VERSION: u32 = 1;

/// Stream tag separating repetition seeds from the driver's internal tags.
const TAG_REPETITION: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum EnvSpec {
    /// Matrices given as lists of rows.
    Lqr {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        #[serde(default)]
        sigma: f64,
        #[serde(default)]
        beta: f64,
    },
    Merton {
        r: f64,
        r_b: f64,
        mu: f64,
        sigma: f64,
        gamma_risk: f64,
        beta: f64,
    },
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!(
            "matrix {what} must be a nonempty list of equal-length rows"
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

impl EnvSpec {
    pub fn lqr(sys: &LqrSystem) -> Self {
        EnvSpec::Lqr {
            a: oracles::rows(&sys.a),
            b: oracles::rows(&sys.b),
            q: oracles::rows(&sys.q),
            r: oracles::rows(&sys.r),
            sigma: sys.sigma,
            beta: sys.beta,
        }
    }

    /// Builds and validates the environment.
    pub fn build(&self) -> Result<Env> {
        let env = match self {
            EnvSpec::Lqr {
                a,
                b,
                q,
                r,
                sigma,
                beta,
            } => LqrSystem::new(
                matrix(a, "a")?,
                matrix(b, "b")?,
                matrix(q, "q")?,
                matrix(r, "r")?,
                *sigma,
                *beta,
            )
            .map(Env::Lqr),
            EnvSpec::Merton {
                r,
                r_b,
                mu,
                sigma,
                gamma_risk,
                beta,
            } => MertonMarket::new(*r, *r_b, *mu, *sigma, *gamma_risk, *beta).map(Env::Merton),
        };
        env.map_err(|e| Error::Config(format!("environment rejected: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Algorithm {
    PhibePi { order: usize },
    BePi,
}

impl Algorithm {
    pub fn label(&self) -> String {
        match self {
            Algorithm::PhibePi { order } => format!("phibe{order}"),
            Algorithm::BePi => "be".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum BasisSpec {
    /// Quadratic monomials in the state (and action), optionally with a constant.
    Quadratic { constant: bool },
    /// `W^{1-gamma}` times powers of the action.
    Merton,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    #[default]
    Oracle,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtSweepSpec {
    pub dts: Vec<f64>,
    #[serde(default)]
    pub mode: SweepMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSweepSpec {
    /// Total data points per batch.
    pub sizes: Vec<usize>,
    /// Recorded states per trajectory.
    pub points_per_trajectory: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtlasParameter {
    A,
    B,
    /// Scales `Q` with `R` held fixed.
    QOverR,
    Beta,
    Dt,
}

impl AtlasParameter {
    fn name(self) -> &'static str {
        match self {
            AtlasParameter::A => "a",
            AtlasParameter::B => "b",
            AtlasParameter::QOverR => "q_over_r",
            AtlasParameter::Beta => "beta",
            AtlasParameter::Dt => "dt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasPanel {
    pub parameter: AtlasParameter,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasSpec {
    pub panels: Vec<AtlasPanel>,
}

/// Algorithm options shared by every run of an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default)]
    pub data: DataMode,
    #[serde(default)]
    pub q_method: QMethod,
    /// Defaults to zero diffusion for LQR and the empirical second moment for
    /// Merton, whose diffusion depends on the action.
    #[serde(default)]
    pub window: Option<WindowOptions>,
    /// Defaults to the closed-form rule for LQR and the two-branch rule for Merton.
    #[serde(default)]
    pub improvement: Option<ImprovementRule>,
    /// Defaults to [`default_initial_policy`].
    #[serde(default)]
    pub pi0: Option<PolicyRecord>,
    #[serde(default)]
    pub discount: BeDiscount,
    #[serde(default)]
    pub next_action: NextAction,
    #[serde(default)]
    pub early_stop_tol: Option<f64>,
    /// Defaults to [`Env::default_box`].
    #[serde(default)]
    pub eval_box: Option<Vec<Interval>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub env: EnvSpec,
    pub dt: f64,
    pub algorithms: Vec<Algorithm>,
    pub plan: BatchPlan,
    pub bases: BasisSpec,
    pub iterations: usize,
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default)]
    pub options: RunOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_sweep: Option<DtSweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_sweep: Option<BatchSweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas: Option<AtlasSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Free-form remarks carried into the summary, e.g. batch scaling.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(format!("cannot parse config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Admissibility checks run before any sampling.
    pub fn validate(&self) -> Result<Env> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(config_err("dt must be positive"));
        }
        if self.algorithms.is_empty() {
            return Err(config_err("at least one algorithm is required"));
        }
        if self.iterations == 0 || self.repetitions == 0 {
            return Err(config_err("iterations and repetitions must be at least 1"));
        }
        let env = self.env.build()?;
        for alg in &self.algorithms {
            if let Algorithm::PhibePi { order } = alg {
                bellman_order_coefficients(*order).map_err(|e| config_err(format!("order {order}: {e}")))?;
            }
        }
        let (d, m) = (env.state_dim(), env.action_dim());
        let plan = &self.plan;
        if plan.init_box.len() != d || plan.action_box.len() != m {
            return Err(config_err("plan boxes do not match the environment dimensions"));
        }
        let bad = |b: &Interval| !(b.0 <= b.1) || !b.0.is_finite() || !b.1.is_finite();
        if plan.init_box.iter().chain(&plan.action_box).any(bad) {
            return Err(config_err("plan boxes must be finite intervals with lo <= hi"));
        }
        if plan.q_hold_steps == Some(0) || plan.pi_hold_steps == 0 {
            return Err(config_err("hold steps must be at least 1"));
        }
        match (&env, self.bases) {
            (Env::Lqr(_), BasisSpec::Quadratic { .. }) | (Env::Merton(_), BasisSpec::Merton) => {}
            _ => return Err(config_err("basis family does not match the environment")),
        }
        if let Some(b) = &self.options.eval_box {
            if b.len() != d || b.iter().any(bad) {
                return Err(config_err("eval_box does not match the state dimension"));
            }
        }
        if let Some(p) = &self.options.pi0 {
            let pol = LinearPolicy::try_from(p.clone()).map_err(|e| config_err(format!("pi0: {e}")))?;
            if pol.state_dim() != d || pol.action_dim() != m {
                return Err(config_err("pi0 dimensions do not match the environment"));
            }
        }
        if let Some(s) = &self.dt_sweep {
            if s.dts.is_empty() || s.dts.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
                return Err(config_err("dt_sweep.dts must be a nonempty list of positive intervals"));
            }
        }
        if let Some(s) = &self.batch_sweep {
            if s.sizes.is_empty() || s.points_per_trajectory < 2 {
                return Err(config_err(
                    "batch_sweep needs sizes and at least 2 points per trajectory",
                ));
            }
        }
        if let Some(a) = &self.atlas {
            if a.panels.iter().any(|p| p.values.is_empty()) {
                return Err(config_err("atlas panels need at least one value"));
            }
        }
        Ok(env)
    }

    fn bases_for(&self, env: &Env) -> Result<(BasisSet, BasisSet)> {
        match (self.bases, env) {
            (BasisSpec::Quadratic { constant }, Env::Lqr(s)) => Ok((
                quadratic_state_basis(s.state_dim(), constant)?,
                quadratic_state_action_basis(s.state_dim(), s.action_dim(), constant)?,
            )),
            (BasisSpec::Merton, Env::Merton(m)) => {
                Ok((merton_value_basis(m.gamma_risk)?, merton_q_basis(m.gamma_risk)?))
            }
            _ => Err(config_err("basis family does not match the environment")),
        }
    }

    fn window_for(&self, env: &Env) -> WindowOptions {
        self.options.window.unwrap_or(match env {
            Env::Lqr(_) => WindowOptions::default(),
            Env::Merton(_) => WindowOptions {
                diffusion: DiffusionMode::Empirical,
                ..WindowOptions::default()
            },
        })
    }

    fn improvement_for(&self, env: &Env) -> ImprovementRule {
        self.options.improvement.unwrap_or(match env {
            Env::Lqr(_) => ImprovementRule::default(),
            Env::Merton(_) => ImprovementRule::Branches { kink: 1.0, a_max: 5.0 },
        })
    }
}

/// One tidy output row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub seed: u64,
    pub algorithm: String,
    pub repetition: usize,
    pub x_name: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

/// Mean, min and max of one metric over repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub algorithm: String,
    pub x_name: String,
    pub x: f64,
    pub metric: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Least-squares fit of `log(value) = intercept + slope log(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub algorithm: String,
    pub metric: String,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

/// Final state of one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: String,
    pub repetition: usize,
    pub seed: u64,
    pub x_name: String,
    pub x: f64,
    pub iterations: usize,
    pub final_policy: Option<LinearPolicy>,
    pub final_value: Vec<f64>,
    pub final_value_error: Option<f64>,
    pub final_policy_value_error: Option<f64>,
    pub wall_time: f64,
}

/// A run or grid point that did not complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub algorithm: String,
    pub repetition: usize,
    pub seed: u64,
    pub x_name: String,
    pub x: f64,
    pub iteration: Option<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub name: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub aggregates: Vec<Aggregate>,
    pub slopes: Vec<SlopeFit>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<Failure>,
    pub notes: Vec<String>,
    pub wall_time: f64,
}

impl ResultRecord {
    /// Rows as CSV. Contains no timing, so reruns are byte-identical.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "config_hash",
                "seed",
                "algorithm",
                "repetition",
                "x_name",
                "x",
                "metric",
                "value",
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Summary JSON: everything except the rows.
    pub fn summary_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("rows");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Rows matching `algorithm` and `metric`.
    pub fn select<'a>(&'a self, algorithm: &'a str, metric: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.algorithm == algorithm && r.metric == metric)
    }

    pub fn slope(&self, algorithm: &str, metric: &str) -> Option<f64> {
        self.slopes
            .iter()
            .find(|s| s.algorithm == algorithm && s.metric == metric)
            .map(|s| s.slope)
    }

    pub fn aggregate(&self, algorithm: &str, metric: &str, x: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.algorithm == algorithm && a.metric == metric && a.x == x)
    }

    fn compute_aggregates(&mut self) {
        let mut keys: Vec<(String, String, f64, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.algorithm.clone(), r.x_name.clone(), r.x, r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        self.aggregates = keys
            .into_iter()
            .map(|(algorithm, x_name, x, metric)| {
                let mut vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.algorithm == algorithm && r.x_name == x_name && r.x == x && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                vals.sort_by(f64::total_cmp);
                let n = vals.len();
                let median = if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    0.5 * (vals[n / 2 - 1] + vals[n / 2])
                };
                Aggregate {
                    algorithm,
                    x_name,
                    x,
                    metric,
                    count: n,
                    mean: vals.iter().sum::<f64>() / n as f64,
                    median,
                    min: vals[0],
                    max: vals[n - 1],
                }
            })
            .collect();
    }

    /// Slope fits of the aggregated means against `x`, per algorithm and metric.
    fn fit_slopes(&mut self, metrics: &[&str]) {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for a in &self.aggregates {
            if metrics.contains(&a.metric.as_str()) && !pairs.contains(&(a.algorithm.clone(), a.metric.clone())) {
                pairs.push((a.algorithm.clone(), a.metric.clone()));
            }
        }
        for (algorithm, metric) in pairs {
            let pts: Vec<(f64, f64)> = self
                .aggregates
                .iter()
                .filter(|a| a.algorithm == algorithm && a.metric == metric)
                .map(|a| (a.x, a.mean))
                .collect();
            if let Some((slope, intercept, points)) = loglog_fit(&pts) {
                self.slopes.push(SlopeFit {
                    algorithm,
                    metric,
                    slope,
                    intercept,
                    points,
                });
            }
        }
    }
}

/// Log-log least-squares line through the positive points; `None` with
/// fewer than two distinct abscissae.
pub fn loglog_fit(points: &[(f64, f64)]) -> Option<(f64, f64, usize)> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx, n))
}

/// Which operation produced a record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    RunCase,
    DtSweep,
    BatchSweep,
    Atlas,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::RunCase => "run_case",
            ExperimentKind::DtSweep => "dt_sweep",
            ExperimentKind::BatchSweep => "batch_sweep",
            ExperimentKind::Atlas => "atlas",
        }
    }
}

pub fn run(config: &ExperimentConfig, kind: ExperimentKind) -> Result<ResultRecord> {
    match kind {
        ExperimentKind::RunCase => run_case(config),
        ExperimentKind::DtSweep => dt_sweep(config),
        ExperimentKind::BatchSweep => batch_sweep(config),
        ExperimentKind::Atlas => error_atlas(config),
    }
}

fn new_record(config: &ExperimentConfig, kind: ExperimentKind) -> Result<ResultRecord> {
    Ok(ResultRecord {
        name: config.name.clone(),
        experiment: kind.name().to_string(),
        config_hash: config.hash()?,
        seed: config.seed,
        notes: config.notes.clone(),
        ..Default::default()
    })
}

/// Inputs of one policy-iteration run.
struct RunSpec<'a> {
    env: &'a Env,
    phi: &'a BasisSet,
    psi: &'a BasisSet,
    pi0: &'a LinearPolicy,
    eval_box: &'a [Interval],
    dt: f64,
    plan: &'a BatchPlan,
}

struct RunOutput {
    trace: IterationTrace,
    failure: Option<(usize, String)>,
    wall_time: f64,
}

fn run_once(config: &ExperimentConfig, spec: &RunSpec<'_>, alg: Algorithm, seed: u64) -> RunOutput {
    let start = Instant::now();
    let opts = &config.options;
    let improvement = config.improvement_for(spec.env);
    let result = match alg {
        Algorithm::PhibePi { order } => {
            let cfg = PhibePiConfig {
                dt: spec.dt,
                order,
                iterations: config.iterations,
                early_stop_tol: opts.early_stop_tol,
                q_method: opts.q_method,
                window: config.window_for(spec.env),
                data: opts.data,
                plan: spec.plan.clone(),
                improvement,
            };
            optimal_phibe_pi(spec.env, spec.phi, spec.psi, spec.pi0, &cfg, seed, Some(spec.eval_box))
        }
        Algorithm::BePi => {
            let cfg = BePiConfig {
                dt: spec.dt,
                iterations: config.iterations,
                early_stop_tol: opts.early_stop_tol,
                discount: opts.discount,
                next_action: opts.next_action,
                plan: spec.plan.clone(),
                improvement,
            };
            optimal_be_pi(spec.env, spec.phi, spec.psi, spec.pi0, &cfg, seed, Some(spec.eval_box))
        }
    };
    let (trace, failure) = match result {
        Ok(out) => (out.trace, None),
        Err(e) => (e.trace, Some((e.iteration, e.source.to_string()))),
    };
    RunOutput {
        trace,
        failure,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

/// Names and values of the policy parameters.
fn policy_metrics(policy: &LinearPolicy, env: &Env) -> Vec<(String, f64)> {
    if let Env::Merton(_) = env {
        return vec![("allocation".to_string(), policy.offset[0])];
    }
    let k = &policy.k;
    if k.len() == 1 {
        return vec![("policy_k".to_string(), k[(0, 0)])];
    }
    let mut out = Vec::with_capacity(k.len());
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            out.push((format!("policy_k_{}_{}", i + 1, j + 1), k[(i, j)]));
        }
    }
    out
}

fn gain_error(env: &Env, policy: &LinearPolicy) -> Option<f64> {
    match env {
        Env::Lqr(s) => {
            let (k, _) = oracles::lqr_optimal(s).ok()?;
            Some((&policy.k - &k.k).norm())
        }
        Env::Merton(m) => Some((policy.offset[0] - oracles::merton_optimal(m)).abs()),
    }
}

struct Prepared {
    env: Env,
    phi: BasisSet,
    psi: BasisSet,
    eval_box: Vec<Interval>,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let env = config.validate()?;
    let (phi, psi) = config.bases_for(&env)?;
    let eval_box = config.options.eval_box.clone().unwrap_or_else(|| env.default_box());
    Ok(Prepared {
        env,
        phi,
        psi,
        eval_box,
    })
}

fn initial_policy(config: &ExperimentConfig, env: &Env, dt: f64) -> Result<LinearPolicy> {
    match &config.options.pi0 {
        Some(p) => LinearPolicy::try_from(p.clone()).map_err(|e| config_err(format!("pi0: {e}"))),
        None => default_initial_policy(env, dt),
    }
}

/// Runs every algorithm `repetitions` times at one `(dt, plan)` point and
/// appends rows tagged with `x_name = x`. Per-iteration rows are emitted
/// only when `per_iteration` is set.
fn run_point(
    config: &ExperimentConfig,
    prep: &Prepared,
    record: &mut ResultRecord,
    dt: f64,
    plan: &BatchPlan,
    point: (&str, f64, u64),
    per_iteration: bool,
) -> Result<()> {
    let (x_name, x, point_index) = point;
    let pi0 = initial_policy(config, &prep.env, dt)?;
    let spec = RunSpec {
        env: &prep.env,
        phi: &prep.phi,
        psi: &prep.psi,
        pi0: &pi0,
        eval_box: &prep.eval_box,
        dt,
        plan,
    };
    let units: Vec<(usize, Algorithm, usize)> = config
        .algorithms
        .iter()
        .enumerate()
        .flat_map(|(ai, alg)| (0..config.repetitions).map(move |rep| (ai, *alg, rep)))
        .collect();
    let outputs: Vec<(Algorithm, usize, u64, RunOutput)> = units
        .par_iter()
        .map(|&(ai, alg, rep)| {
            let index = (point_index << 32) | ((ai as u64) << 20) | rep as u64;
            let seed = derive_seed(config.seed, TAG_REPETITION, index);
            (alg, rep, seed, run_once(config, &spec, alg, seed))
        })
        .collect();
    let hash = record.config_hash.clone();
    for (alg, rep, seed, out) in outputs {
        let label = alg.label();
        let row = |x_name: &str, x: f64, metric: &str, value: f64| ResultRow {
            config_hash: hash.clone(),
            seed,
            algorithm: label.clone(),
            repetition: rep,
            x_name: x_name.to_string(),
            x,
            metric: metric.to_string(),
            value,
        };
        if per_iteration {
            for r in &out.trace.records {
                let it = r.iteration as f64;
                if let Some(e) = r.value_error {
                    record.rows.push(row("iteration", it, "value_error", e));
                }
                if let Some(e) = r.policy_value_error {
                    record.rows.push(row("iteration", it, "policy_value_error", e));
                }
                for (name, v) in policy_metrics(&r.policy, &prep.env) {
                    record.rows.push(row("iteration", it, &name, v));
                }
            }
        }
        if let Some((iteration, message)) = &out.failure {
            log::warn!("{label} repetition {rep} at {x_name}={x} failed: {message}");
            record.failures.push(Failure {
                algorithm: label.clone(),
                repetition: rep,
                seed,
                x_name: x_name.to_string(),
                x,
                iteration: Some(*iteration),
                message: message.clone(),
            });
            record.rows.push(row(x_name, x, "failed", 1.0));
        } else {
            let t = &out.trace;
            if let Some(e) = t.final_value_error {
                record.rows.push(row(x_name, x, "final_value_error", e));
            }
            if let Some(e) = t.final_policy_value_error {
                record.rows.push(row(x_name, x, "final_policy_value_error", e));
            }
            if let Some(p) = &t.final_policy {
                for (name, v) in policy_metrics(p, &prep.env) {
                    record.rows.push(row(x_name, x, &format!("final_{name}"), v));
                }
                if let Some(e) = gain_error(&prep.env, p) {
                    record.rows.push(row(x_name, x, "final_gain_error", e));
                }
            }
            for (j, w) in t.final_value.iter().enumerate() {
                record.rows.push(row(x_name, x, &format!("final_value_w{}", j + 1), *w));
            }
        }
        record.runs.push(RunSummary {
            algorithm: label,
            repetition: rep,
            seed,
            x_name: x_name.to_string(),
            x,
            iterations: out.trace.records.len(),
            final_policy: out.trace.final_policy.clone(),
            final_value: out.trace.final_value.clone(),
            final_value_error: out.trace.final_value_error,
            final_policy_value_error: out.trace.final_policy_value_error,
            wall_time: out.wall_time,
        });
    }
    Ok(())
}

/// Runs the configured algorithms `repetitions` times with derived seeds and
/// records the error of every iterate against the oracle value.
pub fn run_case(config: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let mut record = new_record(config, ExperimentKind::RunCase)?;
    let iters = config.iterations as f64;
    run_point(
        config,
        &prep,
        &mut record,
        config.dt,
        &config.plan,
        ("final", iters, 0),
        true,
    )?;
    record.compute_aggregates();
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Gain errors of the analytic oracles at one interval, keyed by algorithm label.
fn oracle_errors(
    sys: &LqrSystem,
    dt: f64,
    algorithms: &[Algorithm],
    discount: BeDiscount,
) -> Vec<(String, Result<f64>)> {
    let k = match oracles::lqr_optimal(sys) {
        Ok((k, _)) => k,
        Err(e) => return vec![("oracle".to_string(), Err(e))],
    };
    algorithms
        .iter()
        .map(|alg| {
            let approx = match alg {
                Algorithm::PhibePi { order } => oracles::phibe_optimal(sys, dt, *order),
                Algorithm::BePi => oracles::be_optimal(sys, dt, discount),
            };
            (alg.label(), approx.map(|p| (&p.k - &k.k).norm()))
        })
        .collect()
}

/// [`oracle_errors`] through the scalar closed forms.
fn scalar_oracle_errors(
    sys: &LqrSystem,
    dt: f64,
    algorithms: &[Algorithm],
    discount: BeDiscount,
) -> Vec<(String, Result<f64>)> {
    let k = match oracles::lqr_optimal_1d(sys) {
        Ok(k) => k.k[(0, 0)],
        Err(e) => return vec![("oracle".to_string(), Err(e))],
    };
    algorithms
        .iter()
        .map(|alg| {
            let approx = match alg {
                Algorithm::PhibePi { order } => oracles::phibe_optimal_1d(sys, dt, *order),
                Algorithm::BePi => oracles::be_optimal_1d(sys, dt, discount),
            };
            (alg.label(), approx.map(|p| (p.k[(0, 0)] - k).abs()))
        })
        .collect()
}

/// Interval sweep. Oracle mode evaluates `|K_i - K|` and `|K~ - K|`
/// analytically; sampled mode runs full policy iteration per interval.
/// Slopes are fitted when at least two intervals succeed.
pub fn dt_sweep(config: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let sweep = config
        .dt_sweep
        .as_ref()
        .ok_or_else(|| config_err("dt_sweep section is required"))?;
    let mut record = new_record(config, ExperimentKind::DtSweep)?;
    match sweep.mode {
        SweepMode::Oracle => {
            let sys = match &prep.env {
                Env::Lqr(s) => s,
                Env::Merton(_) => return Err(config_err("oracle mode needs an LQR environment")),
            };
            let per_dt: Vec<Vec<(String, Result<f64>)>> = sweep
                .dts
                .par_iter()
                .map(|&h| oracle_errors(sys, h, &config.algorithms, config.options.discount))
                .collect();
            for (&h, errs) in sweep.dts.iter().zip(per_dt) {
                for (label, err) in errs {
                    push_oracle_row(&mut record, &label, "dt", h, "gain_error", err);
                }
            }
            record.compute_aggregates();
            record.fit_slopes(&["gain_error"]);
        }
        SweepMode::Sampled => {
            for (i, &h) in sweep.dts.iter().enumerate() {
                run_point(
                    config,
                    &prep,
                    &mut record,
                    h,
                    &config.plan,
                    ("dt", h, i as u64 + 1),
                    false,
                )?;
            }
            record.compute_aggregates();
            record.fit_slopes(&["final_gain_error", "final_policy_value_error"]);
        }
    }
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

fn push_oracle_row(record: &mut ResultRecord, label: &str, x_name: &str, x: f64, metric: &str, value: Result<f64>) {
    let seed = record.seed;
    match value {
        Ok(v) => record.rows.push(ResultRow {
            config_hash: record.config_hash.clone(),
            seed,
            algorithm: label.to_string(),
            repetition: 0,
            x_name: x_name.to_string(),
            x,
            metric: metric.to_string(),
            value: v,
        }),
        Err(e) => record.failures.push(Failure {
            algorithm: label.to_string(),
            repetition: 0,
            seed,
            x_name: x_name.to_string(),
            x,
            iteration: None,
            message: e.to_string(),
        }),
    }
}

/// Batch-size sweep: each size `D` uses `floor(D / p)` trajectories of `p`
/// recorded states for both the random-action and the policy batches.
/// Runs that fail (e.g. an underdetermined Galerkin system) are recorded
/// as failures.
pub fn batch_sweep(config: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let sweep = config
        .batch_sweep
        .as_ref()
        .ok_or_else(|| config_err("batch_sweep section is required"))?;
    let mut record = new_record(config, ExperimentKind::BatchSweep)?;
    let p = sweep.points_per_trajectory;
    for (i, &size) in sweep.sizes.iter().enumerate() {
        let plan = BatchPlan {
            q_trajectories: size / p,
            q_steps: p - 1,
            pi_trajectories: size / p,
            pi_steps: p - 1,
            ..config.plan.clone()
        };
        run_point(
            config,
            &prep,
            &mut record,
            config.dt,
            &plan,
            ("size", size as f64, i as u64 + 1),
            false,
        )?;
    }
    record.compute_aggregates();
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

fn atlas_system(base: (f64, f64, f64, f64, f64), param: AtlasParameter, v: f64) -> (f64, f64, f64, f64, f64) {
    let (a, b, q, r, beta) = base;
    match param {
        AtlasParameter::A => (v, b, q, r, beta),
        AtlasParameter::B => (a, v, q, r, beta),
        AtlasParameter::QOverR => (a, b, v * r, r, beta),
        AtlasParameter::Beta => (a, b, q, r, v),
        AtlasParameter::Dt => base,
    }
}

/// Analytic gain errors over one-dimensional parameter sweeps of the
/// configured deterministic LQR system, for every configured algorithm.
pub fn error_atlas(config: &ExperimentConfig) -> Result<ResultRecord> {
    let start = Instant::now();
    let prep = prepare(config)?;
    let atlas = config
        .atlas
        .as_ref()
        .ok_or_else(|| config_err("atlas section is required"))?;
    let sys = match &prep.env {
        Env::Lqr(s) if s.state_dim() == 1 && s.action_dim() == 1 => s,
        _ => return Err(config_err("the atlas needs a one-dimensional LQR environment")),
    };
    let base = (sys.a[(0, 0)], sys.b[(0, 0)], sys.q[(0, 0)], sys.r[(0, 0)], sys.beta);
    let mut record = new_record(config, ExperimentKind::Atlas)?;
    for panel in &atlas.panels {
        let per_value: Vec<Vec<(String, Result<f64>)>> = panel
            .values
            .par_iter()
            .map(|&v| {
                let (a, b, q, r, beta) = atlas_system(base, panel.parameter, v);
                let dt = if panel.parameter == AtlasParameter::Dt {
                    v
                } else {
                    config.dt
                };
                match LqrSystem::scalar(a, b, q, r, 0.0, beta) {
                    Ok(s) => scalar_oracle_errors(&s, dt, &config.algorithms, config.options.discount),
                    Err(e) => vec![("oracle".to_string(), Err(e))],
                }
            })
            .collect();
        for (&v, errs) in panel.values.iter().zip(per_value) {
            for (label, err) in errs {
                push_oracle_row(&mut record, &label, panel.parameter.name(), v, "gain_error", err);
            }
        }
    }
    record.compute_aggregates();
    record.wall_time = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Writes `results.csv`, `config.echo.json` and `summary.json` into `dir`.
pub fn write_outputs(record: &ResultRecord, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), record.to_csv()?)?;
    fs::write(dir.join("config.echo.json"), config.to_json()? + "\n")?;
    fs::write(dir.join("summary.json"), record.summary_json()? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            schema_version: 1,
            name: "unit".into(),
            env: EnvSpec::Lqr {
                a: vec![vec![-1.0]],
                b: vec![vec![0.5]],
                q: vec![vec![-1.0]],
                r: vec![vec![-1.0]],
                sigma: 0.0,
                beta: 1.0,
            },
            dt: 0.1,
            algorithms: vec![Algorithm::PhibePi { order: 1 }, Algorithm::BePi],
            plan: BatchPlan {
                q_trajectories: 16,
                q_steps: 5,
                q_hold_steps: None,
                pi_trajectories: 16,
                pi_steps: 5,
                pi_hold_steps: 1,
                init_box: vec![(-3.0, 3.0)],
                action_box: vec![(-3.0, 3.0)],
            },
            bases: BasisSpec::Quadratic { constant: false },
            iterations: 3,
            repetitions: 2,
            seed: 7,
            options: RunOptions::default(),
            dt_sweep: None,
            batch_sweep: None,
            atlas: None,
            output: None,
            notes: vec![],
        }
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = base_config();
        let text = cfg.to_json().unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["surprise"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.is_config());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["env"]["extra"] = serde_json::json!(0);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn inadmissible_env_is_config_error() {
        let mut cfg = base_config();
        cfg.env = EnvSpec::Lqr {
            a: vec![vec![-1.0]],
            b: vec![vec![0.5]],
            q: vec![vec![1.0]],
            r: vec![vec![-1.0]],
            sigma: 0.0,
            beta: 1.0,
        };
        assert!(run_case(&cfg).unwrap_err().is_config());
    }

    #[test]
    fn loglog_fit_recovers_power() {
        let pts: Vec<(f64, f64)> = [0.1, 0.2, 0.4].iter().map(|&x| (x, 3.0 * x * x)).collect();
        let (s, _, n) = loglog_fit(&pts).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && n == 3);
        assert!(loglog_fit(&pts[..1]).is_none());
    }

    #[test]
    fn single_dt_gives_table_without_fit() {
        let mut cfg = base_config();
        cfg.dt_sweep = Some(DtSweepSpec {
            dts: vec![0.1],
            mode: SweepMode::Oracle,
        });
        let rec = dt_sweep(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 2);
        assert!(rec.slopes.is_empty());
    }

    #[test]
    fn run_case_repeats_identically() {
        let cfg = base_config();
        let a = run_case(&cfg).unwrap();
        let b = run_case(&cfg).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        assert!(a.rows.iter().all(|r| r.config_hash == a.config_hash));
    }
}
