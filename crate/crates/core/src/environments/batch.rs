//! Trajectory batches and their CSV/JSON persistence.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One discrete-time trajectory stored as flat row-major arrays:
/// `states` holds `I + 1` state vectors, `actions` and `rewards` hold `I` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

/// Provenance carried with every batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub seed: u64,
    pub hold_steps: usize,
    pub warnings: Vec<String>,
}

/// Discrete-time `(s, a, r)` sequences sampled at a fixed interval `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    pub dt: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub meta: BatchMeta,
}

/// JSON header written next to the CSV body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchHeader {
    pub dt: f64,
    pub seed: u64,
    pub hold_steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: usize,
    pub states_per_trajectory: Vec<usize>,
    pub warnings: Vec<String>,
}

impl TrajectoryBatch {
    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_states(&self, l: usize) -> usize {
        self.trajectories[l].states.len() / self.state_dim
    }

    pub fn state(&self, l: usize, j: usize) -> &[f64] {
        let d = self.state_dim;
        &self.trajectories[l].states[j * d..(j + 1) * d]
    }

    pub fn action(&self, l: usize, j: usize) -> &[f64] {
        let m = self.action_dim;
        &self.trajectories[l].actions[j * m..(j + 1) * m]
    }

    pub fn reward(&self, l: usize, j: usize) -> f64 {
        self.trajectories[l].rewards[j]
    }

    /// Total number of recorded states.
    pub fn total_states(&self) -> usize {
        (0..self.num_trajectories()).map(|l| self.num_states(l)).sum()
    }

    /// Checks shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.state_dim == 0 {
            return Err(Error::invalid("batch needs dt > 0 and a state dimension"));
        }
        for (l, t) in self.trajectories.iter().enumerate() {
            let n = t.states.len() / self.state_dim;
            let ok = t.states.len() % self.state_dim == 0
                && n >= 1
                && t.actions.len() == (n - 1) * self.action_dim
                && t.rewards.len() == n - 1;
            if !ok {
                return Err(Error::invalid(format!("trajectory {l} has inconsistent lengths")));
            }
            let finite = t
                .states
                .iter()
                .chain(&t.actions)
                .chain(&t.rewards)
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::invalid(format!("trajectory {l} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Trajectories of `self` followed by those of `other`.
    pub fn concat(&self, other: &TrajectoryBatch) -> Result<TrajectoryBatch> {
        if self.dt != other.dt || self.state_dim != other.state_dim || self.action_dim != other.action_dim {
            return Err(Error::invalid("batches differ in dt or dimensions"));
        }
        let mut out = self.clone();
        out.trajectories.extend(other.trajectories.iter().cloned());
        out.meta.warnings.extend(other.meta.warnings.iter().cloned());
        Ok(out)
    }

    pub fn header(&self) -> BatchHeader {
        BatchHeader {
            dt: self.dt,
            seed: self.meta.seed,
            hold_steps: self.meta.hold_steps,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            trajectories: self.num_trajectories(),
            states_per_trajectory: (0..self.num_trajectories()).map(|l| self.num_states(l)).collect(),
            warnings: self.meta.warnings.clone(),
        }
    }

    /// Writes the columnar body: `traj_id, step, s_1..s_d, a_1..a_m, reward`.
    /// The final state of each trajectory has empty action and reward cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut head = vec!["traj_id".to_string(), "step".to_string()];
        head.extend((1..=self.state_dim).map(|i| format!("s_{i}")));
        head.extend((1..=self.action_dim).map(|i| format!("a_{i}")));
        head.push("reward".into());
        wr.write_record(&head)?;
        for l in 0..self.num_trajectories() {
            let n = self.num_states(l);
            for j in 0..n {
                let mut row = vec![l.to_string(), j.to_string()];
                row.extend(self.state(l, j).iter().map(|v| v.to_string()));
                if j + 1 < n {
                    row.extend(self.action(l, j).iter().map(|v| v.to_string()));
                    row.push(self.reward(l, j).to_string());
                } else {
                    row.extend(std::iter::repeat_n(String::new(), self.action_dim + 1));
                }
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a body written by [`TrajectoryBatch::write_csv`].
    pub fn read_csv<R: Read>(header: &BatchHeader, r: R) -> Result<TrajectoryBatch> {
        let (d, m) = (header.state_dim, header.action_dim);
        let mut trajectories: Vec<Trajectory> = (0..header.trajectories)
            .map(|_| Trajectory {
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
            })
            .collect();
        let mut rd = csv::Reader::from_reader(r);
        for rec in rd.records() {
            let rec = rec?;
            if rec.len() != 3 + d + m {
                return Err(Error::invalid("CSV row width does not match the header"));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::invalid(format!("bad number {s:?}: {e}")))
            };
            let l: usize = rec[0]
                .parse()
                .map_err(|e| Error::invalid(format!("bad trajectory id: {e}")))?;
            let t = trajectories
                .get_mut(l)
                .ok_or_else(|| Error::invalid("trajectory id out of range"))?;
            for i in 0..d {
                t.states.push(parse(&rec[2 + i])?);
            }
            if !rec[2 + d + m].is_empty() {
                for k in 0..m {
                    t.actions.push(parse(&rec[2 + d + k])?);
                }
                t.rewards.push(parse(&rec[2 + d + m])?);
            }
        }
        let batch = TrajectoryBatch {
            dt: header.dt,
            state_dim: d,
            action_dim: m,
            trajectories,
            meta: BatchMeta {
                seed: header.seed,
                hold_steps: header.hold_steps,
                warnings: header.warnings.clone(),
            },
        };
        batch.validate()?;
        Ok(batch)
    }
}
