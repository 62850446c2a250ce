//! Seeded trajectory rollout shared by the LQR and Merton samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::batch::{BatchMeta, Trajectory, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::policy_iteration::LinearPolicy;

/// Closed interval `[lo, hi]` for one coordinate.
pub type Interval = (f64, f64);

/// Where actions come from during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum ActionSource<'a> {
    /// Uniform draws from `action_box`, each held for `hold_steps` steps.
    Uniform {
        action_box: &'a [Interval],
        hold_steps: usize,
    },
    /// `policy(s)` evaluated every `hold_steps` steps and held in between.
    Policy {
        policy: &'a LinearPolicy,
        hold_steps: usize,
    },
    /// A uniform first action, then the policy at every step.
    UniformThenPolicy {
        action_box: &'a [Interval],
        policy: &'a LinearPolicy,
    },
}

impl ActionSource<'_> {
    pub fn hold_steps(&self) -> usize {
        match self {
            ActionSource::Uniform { hold_steps, .. } | ActionSource::Policy { hold_steps, .. } => *hold_steps,
            ActionSource::UniformThenPolicy { .. } => 1,
        }
    }

    fn validate(&self, m: usize, d: usize) -> Result<()> {
        if self.hold_steps() == 0 {
            return Err(Error::invalid("hold_steps must be at least 1"));
        }
        let check_box = |b: &[Interval]| validate_box(b, m, "action box");
        let check_policy = |p: &LinearPolicy| {
            if p.state_dim() != d || p.action_dim() != m {
                Err(Error::invalid("policy dimensions do not match the environment"))
            } else {
                Ok(())
            }
        };
        match self {
            ActionSource::Uniform { action_box, .. } => check_box(action_box),
            ActionSource::Policy { policy, .. } => check_policy(policy),
            ActionSource::UniformThenPolicy { action_box, policy } => {
                check_box(action_box)?;
                check_policy(policy)
            }
        }
    }
}

/// Number of trajectories, steps per trajectory and initial-state box.
#[derive(Clone, Copy, Debug)]
pub struct RolloutPlan<'a> {
    pub num_traj: usize,
    pub steps: usize,
    pub init_box: &'a [Interval],
}

pub(crate) fn validate_box(b: &[Interval], dim: usize, name: &str) -> Result<()> {
    if b.len() != dim {
        return Err(Error::invalid(format!("{name} needs {dim} intervals, got {}", b.len())));
    }
    if b.iter()
        .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
    {
        return Err(Error::invalid(format!("{name} has an empty or non-finite interval")));
    }
    Ok(())
}

/// Independent stream for trajectory `index` under master `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) fn draw_box(rng: &mut ChaCha8Rng, b: &[Interval], out: &mut [f64]) {
    for (o, (lo, hi)) in out.iter_mut().zip(b) {
        *o = if lo == hi { *lo } else { rng.random_range(*lo..*hi) };
    }
}

/// Outcome of one transition.
pub(crate) enum Step {
    Next,
    /// Stop the trajectory before the new state, recording a warning.
    Truncate(String),
}

/// Environment-specific pieces of a rollout.
pub(crate) trait Stepper: Sync {
    fn dims(&self) -> (usize, usize);
    fn reward(&self, s: &[f64], a: &[f64]) -> f64;
    /// Writes the next state into `next`.
    fn advance(&self, s: &[f64], a: &[f64], rng: &mut ChaCha8Rng, next: &mut [f64]) -> Result<Step>;
    /// Largest admissible state magnitude for policy rollouts.
    fn blow_up_limit(&self) -> f64 {
        1e8
    }
}

pub(crate) fn rollout<S: Stepper>(
    stepper: &S,
    dt: f64,
    plan: &RolloutPlan<'_>,
    source: ActionSource<'_>,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let (d, m) = stepper.dims();
    validate_box(plan.init_box, d, "initial-state box")?;
    source.validate(m, d)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("dt must be positive"));
    }
    let follows_policy = !matches!(source, ActionSource::Uniform { .. });
    let results: Vec<Result<(Trajectory, Option<String>)>> = (0..plan.num_traj)
        .into_par_iter()
        .map(|l| {
            let mut rng = trajectory_rng(seed, l as u64);
            let mut states = vec![0.0; d];
            draw_box(&mut rng, plan.init_box, &mut states);
            let mut actions = Vec::with_capacity(plan.steps * m);
            let mut rewards = Vec::with_capacity(plan.steps);
            let mut a = vec![0.0; m];
            let mut next = vec![0.0; d];
            let mut warning = None;
            for j in 0..plan.steps {
                let s = &states[j * d..(j + 1) * d];
                match source {
                    ActionSource::Uniform { action_box, hold_steps } => {
                        if j % hold_steps == 0 {
                            draw_box(&mut rng, action_box, &mut a);
                        }
                    }
                    ActionSource::Policy { policy, hold_steps } => {
                        if j % hold_steps == 0 {
                            policy.act_into(s, &mut a);
                        }
                    }
                    ActionSource::UniformThenPolicy { action_box, policy } => {
                        if j == 0 {
                            draw_box(&mut rng, action_box, &mut a);
                        } else {
                            policy.act_into(s, &mut a);
                        }
                    }
                }
                let r = stepper.reward(s, &a);
                match stepper.advance(s, &a, &mut rng, &mut next)? {
                    Step::Next => {}
                    Step::Truncate(msg) => {
                        warning = Some(format!("trajectory {l} truncated at step {j}: {msg}"));
                        break;
                    }
                }
                if next.iter().any(|v| !v.is_finite())
                    || (follows_policy && next.iter().any(|v| v.abs() > stepper.blow_up_limit()))
                {
                    return Err(Error::BlowUp { trajectory: l });
                }
                actions.extend_from_slice(&a);
                rewards.push(r);
                states.extend_from_slice(&next);
            }
            Ok((
                Trajectory {
                    states,
                    actions,
                    rewards,
                },
                warning,
            ))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(plan.num_traj);
    let mut warnings = Vec::new();
    for r in results {
        let (t, w) = r?;
        trajectories.push(t);
        warnings.extend(w);
    }
    Ok(TrajectoryBatch {
        dt,
        state_dim: d,
        action_dim: m,
        trajectories,
        meta: BatchMeta {
            seed,
            hold_steps: source.hold_steps(),
            warnings,
        },
    })
}
