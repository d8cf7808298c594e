//! Markov-state-model estimation and kinetic observables.
//!
//! Transition statistics are counted with a sliding window (every frame
//! starts a pair) and normalised row-wise, so `T[i][j]` is the probability
//! of being in `j` one lag after being in `i`. Logarithms are natural
//! throughout.

mod mfpt;
mod spectral;

pub use mfpt::{mfpt, mfpt_residual, MfptMatrix};
pub use spectral::{
    eigen_spectrum, implied_timescales, its_from_eigenvalue, ItsTable, SpectralSummary,
    Timescale,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::trajectory::Trajectory;

const ROW_SUM_TOL: f64 = 1e-10;
const DETAILED_BALANCE_TOL: f64 = 1e-10;

/// Transition counts at a fixed lag (in frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMatrix {
    lag: usize,
    dt: f64,
    n: usize,
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn from_counts(lag: usize, dt: f64, n: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n * n {
            return invalid(format!("count matrix needs {} entries, got {}", n * n, counts.len()));
        }
        if lag == 0 || !(dt > 0.0) {
            return invalid("count matrix needs lag >= 1 and dt > 0");
        }
        Ok(Self { lag, dt, n, counts })
    }

    pub fn lag(&self) -> usize {
        self.lag
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn lag_time(&self) -> f64 {
        self.lag as f64 * self.dt
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.n + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j) as f64)
    }

    /// Sum counts over blocks of a crisp micro→macro assignment.
    pub fn aggregate(&self, assignment: &[usize], n_macro: usize) -> Result<Self> {
        if assignment.len() != self.n {
            return invalid("assignment length must match the number of states");
        }
        let mut out = vec![0u64; n_macro * n_macro];
        for i in 0..self.n {
            for j in 0..self.n {
                let (a, b) = (assignment[i], assignment[j]);
                if a >= n_macro || b >= n_macro {
                    return invalid("assignment refers to a macro-state outside the range");
                }
                out[a * n_macro + b] += self.get(i, j);
            }
        }
        Self::from_counts(self.lag, self.dt, n_macro, out)
    }
}

fn same_dt(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// Sliding-window transition counts; no pairs straddle two trajectories.
pub fn count_transitions(trajs: &[Trajectory], lag: usize) -> Result<CountMatrix> {
    let first = trajs.first().ok_or_else(|| Error::InvalidInput("no trajectories".into()))?;
    if lag == 0 {
        return invalid("lag must be >= 1");
    }
    let (n, dt) = (first.n_states(), first.dt());
    let mut counts = vec![0u64; n * n];
    for (k, t) in trajs.iter().enumerate() {
        if t.n_states() != n {
            return invalid(format!(
                "trajectory {k} has {} states, expected {n}",
                t.n_states()
            ));
        }
        if !same_dt(t.dt(), dt) {
            return invalid(format!("trajectory {k} has dt {} ps, expected {dt} ps", t.dt()));
        }
        if lag >= t.len() {
            return invalid(format!(
                "lag {lag} is not shorter than trajectory {k} (length {})",
                t.len()
            ));
        }
        let s = t.states();
        for (a, b) in s.iter().zip(&s[lag..]) {
            counts[a * n + b] += 1;
        }
    }
    CountMatrix::from_counts(lag, dt, n, counts)
}

/// Row-stochastic transition matrix at a lag time, restricted to an active
/// subset of an `n_full`-state alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    matrix: DMatrix<f64>,
    lag_time: f64,
    reversible: bool,
    active: Vec<usize>,
    n_full: usize,
}

impl TransitionModel {
    /// Wraps a user-supplied matrix. Rows must sum to one within 1e-10 and
    /// are renormalised exactly; a `reversible` matrix must satisfy detailed
    /// balance.
    pub fn new(matrix: DMatrix<f64>, lag_time: f64, reversible: bool) -> Result<Self> {
        let n = matrix.nrows();
        Self::with_active(matrix, lag_time, reversible, (0..n).collect(), n)
    }

    pub fn from_rows(rows: &[Vec<f64>], lag_time: f64) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("transition matrix must be square");
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]), lag_time, false)
    }

    fn with_active(
        mut matrix: DMatrix<f64>,
        lag_time: f64,
        reversible: bool,
        active: Vec<usize>,
        n_full: usize,
    ) -> Result<Self> {
        let n = matrix.nrows();
        if n == 0 || matrix.ncols() != n {
            return invalid("transition matrix must be square and non-empty");
        }
        if !(lag_time > 0.0 && lag_time.is_finite()) {
            return invalid(format!("lag time must be positive, got {lag_time}"));
        }
        for i in 0..n {
            let mut row = matrix.row_mut(i);
            if row.iter().any(|&x| !(0.0..=1.0 + ROW_SUM_TOL).contains(&x)) {
                return invalid(format!("row {i} has entries outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NotStochastic { row: i, sum });
            }
            row /= sum;
        }
        let model = Self { matrix, lag_time, reversible, active, n_full };
        if reversible {
            let pi = model.stationary()?;
            let m = &model.matrix;
            for i in 0..n {
                for j in (i + 1)..n {
                    let gap = (pi[i] * m[(i, j)] - pi[j] * m[(j, i)]).abs();
                    if gap > DETAILED_BALANCE_TOL {
                        return invalid(format!(
                            "detailed balance violated between {i} and {j} by {gap:e}"
                        ));
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn n_states(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn lag_time(&self) -> f64 {
        self.lag_time
    }

    pub fn is_reversible(&self) -> bool {
        self.reversible
    }

    /// Original state index of each row.
    pub fn active_states(&self) -> &[usize] {
        &self.active
    }

    /// Alphabet size before unvisited states were dropped.
    pub fn n_full(&self) -> usize {
        self.n_full
    }

    /// Row index of an original state, if it was visited.
    pub fn local_index(&self, state: usize) -> Option<usize> {
        self.active.iter().position(|&s| s == state)
    }

    /// Stationary distribution: solves `pi (T - I) = 0` with `sum(pi) = 1`.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        let n = self.n_states();
        let mut a = (&self.matrix - DMatrix::identity(n, n)).transpose();
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Degenerate("stationary system is singular (reducible chain)".into()))?;
        let pi: Vec<f64> = pi.iter().map(|&p| p.max(0.0)).collect();
        let total: f64 = pi.iter().sum();
        Ok(pi.into_iter().map(|p| p / total).collect())
    }
}

/// Row-normalised transition matrix from counts. With `reversible`, counts
/// are symmetrised as `(C + C^T) / 2` first. States without outgoing counts
/// are dropped and recorded in [`TransitionModel::active_states`].
pub fn transition_matrix(c: &CountMatrix, reversible: bool) -> Result<TransitionModel> {
    if c.total() == 0 {
        return invalid("count matrix is empty");
    }
    let n = c.n_states();
    let mut m = c.to_matrix();
    if reversible {
        m = (&m + m.transpose()) * 0.5;
    }
    // Drop states with no outgoing counts, together with the columns leading
    // into them, until every remaining row has mass.
    let mut keep: Vec<bool> = vec![true; n];
    loop {
        let mut changed = false;
        for i in 0..n {
            if keep[i] {
                let s: f64 = (0..n).filter(|&j| keep[j]).map(|j| m[(i, j)]).sum();
                if s <= 0.0 {
                    keep[i] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let active: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if active.is_empty() {
        return invalid("no state has outgoing counts");
    }
    if active.len() < n {
        log::info!(
            "dropped {} unvisited states; active set {:?}",
            n - active.len(),
            active
        );
    }
    let k = active.len();
    let mut t = DMatrix::from_fn(k, k, |a, b| m[(active[a], active[b])]);
    for i in 0..k {
        let s: f64 = t.row(i).sum();
        t.row_mut(i).scale_mut(1.0 / s);
    }
    if reversible {
        // Symmetric counts give pi_i ~ row sum, and pi_i T_ij = C_ij / total
        // holds by construction.
        return Ok(TransitionModel {
            matrix: t,
            lag_time: c.lag_time(),
            reversible: true,
            active,
            n_full: n,
        });
    }
    TransitionModel::with_active(t, c.lag_time(), false, active, n)
}

/// `F_i = -ln p_i` after normalising; empty states get `+inf`.
pub fn free_energy(populations: &[f64]) -> Vec<f64> {
    let total: f64 = populations.iter().sum();
    populations
        .iter()
        .map(|&p| if p > 0.0 { -(p / total).ln() } else { f64::INFINITY })
        .collect()
}

pub fn free_energy_from_histogram(hist: &[u64]) -> Vec<f64> {
    free_energy(&hist.iter().map(|&h| h as f64).collect::<Vec<_>>())
}

/// Stationary distribution and free energy of a transition model.
pub fn stationary_and_free_energy(t: &TransitionModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let pi = t.stationary()?;
    let f = free_energy(&pi);
    Ok((pi, f))
}

/// Population histogram pooled over trajectories.
pub fn populations(trajs: &[Trajectory]) -> Vec<u64> {
    let n = trajs.iter().map(Trajectory::n_states).max().unwrap_or(0);
    let mut h = vec![0u64; n];
    for t in trajs {
        for &s in t.states() {
            h[s] += 1;
        }
    }
    h
}

/// Entropy rate `-sum_i pi_i sum_j T_ij ln T_ij` in nats per step.
pub fn entropy_rate(t: &TransitionModel) -> Result<f64> {
    let pi = t.stationary()?;
    let m = t.matrix();
    let mut h = 0.0;
    for i in 0..t.n_states() {
        for j in 0..t.n_states() {
            let p = m[(i, j)];
            if p > 0.0 {
                h -= pi[i] * p * p.ln();
            }
        }
    }
    Ok(h)
}
