use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A discrete state-index sequence with a physical time step (ps per frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    dt: f64,
    n_states: usize,
    states: Vec<usize>,
}

impl Trajectory {
    pub fn new(dt: f64, n_states: usize, states: Vec<usize>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("trajectory dt must be positive, got {dt}"));
        }
        if states.is_empty() {
            return invalid("trajectory must be non-empty");
        }
        if let Some((i, &s)) = states.iter().enumerate().find(|(_, &s)| s >= n_states) {
            return invalid(format!("state {s} at frame {i} is outside [0, {n_states})"));
        }
        Ok(Self { dt, n_states, states })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn into_states(self) -> Vec<usize> {
        self.states
    }

    /// Keep every `m`-th frame; the saving interval grows to `m * dt`.
    pub fn subsample(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return invalid("subsampling factor must be >= 1");
        }
        let states = self.states.iter().copied().step_by(m).collect();
        Self::new(self.dt * m as f64, self.n_states, states)
    }

    /// Same frames, reinterpreted over a larger alphabet.
    pub fn with_n_states(&self, n_states: usize) -> Result<Self> {
        Self::new(self.dt, n_states, self.states.clone())
    }

    /// Population histogram over `n_states`.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.n_states];
        for &s in &self.states {
            h[s] += 1;
        }
        h
    }
}

/// Continuous-coordinate snapshots stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries {
    dt: f64,
    dim: usize,
    data: Vec<f64>,
    pub seed: u64,
}

impl FrameSeries {
    pub fn new(dt: f64, dim: usize, data: Vec<f64>, seed: u64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("frame dt must be positive, got {dt}"));
        }
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return invalid(format!(
                "frame data of length {} is not a whole number of {dim}-dimensional frames",
                data.len()
            ));
        }
        Ok(Self { dt, dim, data, seed })
    }

    pub fn from_frames(dt: f64, frames: &[Vec<f64>], seed: u64) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if let Some(i) = frames.iter().position(|f| f.len() != dim) {
            return invalid(format!("frame {i} has dimension {} != {dim}", frames[i].len()));
        }
        Self::new(dt, dim, frames.concat(), seed)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// One coordinate across all frames.
    pub fn column(&self, c: usize) -> Vec<f64> {
        self.frames().map(|f| f[c]).collect()
    }

    pub fn subsample(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return invalid("subsampling factor must be >= 1");
        }
        let data = self.frames().step_by(m).flat_map(|f| f.iter().copied()).collect();
        Self::new(self.dt * m as f64, self.dim, data, self.seed)
    }
}
