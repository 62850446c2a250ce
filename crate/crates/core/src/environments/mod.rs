//! Exact samplers for the LQR and Merton environments.

pub mod batch;
pub mod lqr;
pub mod merton;
pub mod sampling;

pub use batch::{BatchHeader, BatchMeta, Trajectory, TrajectoryBatch};
pub use lqr::{
    lqr_exact_transition, sample_lqr_batch, sample_lqr_batch_with, sample_policy_lqr_batch, LqrSystem, TransitionKernel,
};
pub use merton::{
    merton_step, sample_merton_batch, sample_merton_batch_with, sample_merton_policy_batch, MertonMarket,
};
pub use sampling::{trajectory_rng, ActionSource, Interval, RolloutPlan};
