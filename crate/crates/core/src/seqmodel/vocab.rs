//! Mapping between trajectories and model token streams.

use serde::{Deserialize, Serialize};

use crate::coarse_grain::{run_length_decode, run_length_encode, RunToken};
use crate::error::{invalid, Result};
use crate::trajectory::Trajectory;

/// Token alphabet of a model.
///
/// `States` uses state indices directly. `RunLength` uses composite
/// `(state, run length)` tokens enumerated from training data, sorted, with
/// one extra id (the last) reserved for composites never seen in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Vocab {
    States { n_states: usize },
    RunLength { n_states: usize, max_run: usize, tokens: Vec<RunToken> },
}

impl Vocab {
    pub fn states(n_states: usize) -> Vocab {
        Vocab::States { n_states }
    }

    /// Enumerate the composites occurring in `trajs`.
    pub fn run_length(trajs: &[Trajectory], max_run: usize) -> Result<Vocab> {
        let n_states = match trajs.first() {
            Some(t) => t.n_states(),
            None => return invalid("run-length vocabulary needs at least one trajectory"),
        };
        let mut tokens = Vec::new();
        for t in trajs {
            if t.n_states() != n_states {
                return invalid("trajectories disagree on n_states");
            }
            tokens.extend(run_length_encode(t, max_run)?);
        }
        tokens.sort_unstable();
        tokens.dedup();
        Ok(Vocab::RunLength { n_states, max_run, tokens })
    }

    pub fn n_states(&self) -> usize {
        match self {
            Vocab::States { n_states } | Vocab::RunLength { n_states, .. } => *n_states,
        }
    }

    /// Number of token ids, including the unknown id.
    pub fn size(&self) -> usize {
        match self {
            Vocab::States { n_states } => *n_states,
            Vocab::RunLength { tokens, .. } => tokens.len() + 1,
        }
    }

    pub fn unknown(&self) -> Option<usize> {
        match self {
            Vocab::States { .. } => None,
            Vocab::RunLength { tokens, .. } => Some(tokens.len()),
        }
    }

    pub fn is_run_length(&self) -> bool {
        matches!(self, Vocab::RunLength { .. })
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<Vec<usize>> {
        if traj.n_states() != self.n_states() {
            return invalid(format!(
                "trajectory has {} states, vocabulary expects {}",
                traj.n_states(),
                self.n_states()
            ));
        }
        match self {
            Vocab::States { .. } => Ok(traj.states().to_vec()),
            Vocab::RunLength { max_run, tokens, .. } => Ok(run_length_encode(traj, *max_run)?
                .iter()
                .map(|tok| tokens.binary_search(tok).unwrap_or(tokens.len()))
                .collect()),
        }
    }

    /// Frames spanned by one token (1 for plain states).
    pub fn span(&self, id: usize) -> usize {
        match self {
            Vocab::States { .. } => 1,
            Vocab::RunLength { tokens, .. } => tokens.get(id).map_or(0, |t| t.length),
        }
    }

    pub fn decode(&self, ids: &[usize], dt: f64) -> Result<Trajectory> {
        match self {
            Vocab::States { n_states } => Trajectory::new(dt, *n_states, ids.to_vec()),
            Vocab::RunLength { n_states, tokens, .. } => {
                let runs = ids
                    .iter()
                    .map(|&id| match tokens.get(id) {
                        Some(t) => Ok(*t),
                        None => invalid(format!("token id {id} has no state/length meaning")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                run_length_decode(&runs, *n_states, dt)
            }
        }
    }
}
