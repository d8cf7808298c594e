//! Remedies for fast dynamics masking rare events: PCCA+ lumping of
//! micro-states into metastable macro-states, recrossing removal, and
//! run-length ("state-length") recoding.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::msm::{eigen_spectrum, TransitionModel};
use crate::trajectory::Trajectory;

/// Crisp micro → macro assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LumpingMap {
    n_macro: usize,
    assignment: Vec<usize>,
}

impl LumpingMap {
    pub fn new(n_macro: usize, assignment: Vec<usize>) -> Result<Self> {
        if n_macro == 0 || n_macro > assignment.len() {
            return invalid(format!(
                "{n_macro} macro-states for {} micro-states",
                assignment.len()
            ));
        }
        let mut seen = vec![false; n_macro];
        for (i, &a) in assignment.iter().enumerate() {
            if a >= n_macro {
                return invalid(format!("micro-state {i} maps to macro-state {a} >= {n_macro}"));
            }
            seen[a] = true;
        }
        if let Some(empty) = seen.iter().position(|&s| !s) {
            return invalid(format!("macro-state {empty} has no micro-states"));
        }
        Ok(Self { n_macro, assignment })
    }

    pub fn identity(n: usize) -> Self {
        Self { n_macro: n, assignment: (0..n).collect() }
    }

    pub fn n_micro(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_macro(&self) -> usize {
        self.n_macro
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn get(&self, micro: usize) -> usize {
        self.assignment[micro]
    }

    /// Relabel macro-states in order of first appearance over micro indices.
    fn canonical(n_macro: usize, raw: &[usize]) -> Result<Self> {
        let mut relabel = vec![usize::MAX; n_macro];
        let mut next = 0;
        let assignment = raw
            .iter()
            .map(|&a| {
                if relabel[a] == usize::MAX {
                    relabel[a] = next;
                    next += 1;
                }
                relabel[a]
            })
            .collect();
        Self::new(n_macro, assignment)
    }
}

/// Fuzzy memberships and the crisp map derived from them.
#[derive(Debug, Clone)]
pub struct PccaResult {
    pub map: LumpingMap,
    /// `n_micro x n_macro`, rows sum to one.
    pub memberships: DMatrix<f64>,
    /// Micro-states chosen as simplex vertices, in macro order.
    pub vertices: Vec<usize>,
}

/// PCCA+ via the inner-simplex algorithm on the dominant right
/// eigenvectors, followed by argmax crisp assignment.
pub fn pcca_plus(t: &TransitionModel, n_macro: usize) -> Result<LumpingMap> {
    pcca_plus_full(t, n_macro).map(|r| r.map)
}

pub fn pcca_plus_full(t: &TransitionModel, n_macro: usize) -> Result<PccaResult> {
    let n = t.n_states();
    if n_macro == 0 || n_macro > n {
        return invalid(format!("cannot lump {n} states into {n_macro}"));
    }
    if n_macro == n {
        return Ok(PccaResult {
            map: LumpingMap::identity(n),
            memberships: DMatrix::identity(n, n),
            vertices: (0..n).collect(),
        });
    }
    if !t.is_reversible() {
        log::warn!("PCCA+ on a non-reversible model; eigenvectors may be complex");
    }
    let spec = eigen_spectrum(t, n_macro)?;
    let mut x = DMatrix::zeros(n, n_macro);
    for (c, v) in spec.right.iter().enumerate() {
        let v = v.as_ref().ok_or_else(|| {
            Error::Degenerate(format!(
                "eigenvector {c} is complex; estimate the model reversibly or use fewer macro-states"
            ))
        })?;
        x.set_column(c, v);
    }
    let vertices = inner_simplex_vertices(&x)?;
    let corners = DMatrix::from_fn(n_macro, n_macro, |r, c| x[(vertices[r], c)]);
    let inv = corners.try_inverse().ok_or_else(|| {
        Error::Degenerate(format!("eigenvector simplex is rank deficient; try fewer than {n_macro} macro-states"))
    })?;
    let chi = &x * inv;
    let raw: Vec<usize> = (0..n)
        .map(|i| {
            let row = chi.row(i);
            (0..n_macro).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect();
    // Vertex rows are unit vectors, so every class keeps its vertex.
    let map = LumpingMap::canonical(n_macro, &raw)?;
    Ok(PccaResult { map, memberships: chi, vertices })
}

/// PCCA+ map over the model's full alphabet. States outside the active set
/// never occur in the estimation data; they are assigned to macro-state 0.
pub fn pcca_plus_full_alphabet(t: &TransitionModel, n_macro: usize) -> Result<LumpingMap> {
    let local = pcca_plus(t, n_macro)?;
    let mut assignment = vec![0; t.n_full()];
    for (i, &s) in t.active_states().iter().enumerate() {
        assignment[s] = local.get(i);
    }
    LumpingMap::new(n_macro, assignment)
}

/// Greedy farthest-vertex selection with Gram–Schmidt deflation.
fn inner_simplex_vertices(x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, k) = (x.nrows(), x.ncols());
    let row_norm = |m: &DMatrix<f64>, i: usize| m.row(i).norm();
    let mut ortho = x.clone();
    let first = (0..n).fold(0, |b, i| if row_norm(x, i) > row_norm(x, b) { i } else { b });
    let mut vertices = vec![first];
    let origin = x.row(first).clone_owned();
    for i in 0..n {
        let r = ortho.row(i) - &origin;
        ortho.set_row(i, &r);
    }
    for _ in 1..k {
        let last = *vertices.last().unwrap();
        let dir = ortho.row(last).clone_owned();
        for i in 0..n {
            let proj = ortho.row(i).dot(&dir);
            let r = ortho.row(i) - &dir * proj;
            ortho.set_row(i, &r);
        }
        let far = (0..n).fold(0, |b, i| if row_norm(&ortho, i) > row_norm(&ortho, b) { i } else { b });
        let dist = row_norm(&ortho, far);
        if dist < 1e-12 {
            return Err(Error::Degenerate(format!(
                "only {} independent directions in the eigenvector simplex; use fewer macro-states",
                vertices.len()
            )));
        }
        ortho /= dist;
        vertices.push(far);
    }
    Ok(vertices)
}

/// Number of macro-states at the largest gap among the leading (up to 10)
/// eigenvalues; at least two.
pub fn suggest_n_macro(t: &TransitionModel) -> Result<usize> {
    let k = t.n_states().min(10);
    if k < 2 {
        return invalid("need at least two states to choose a lumping");
    }
    let vals = eigen_spectrum(t, k)?.effective_eigenvalues();
    let best = (1..k - 1)
        .map(|i| (i + 1, vals[i] - vals[i + 1]))
        .fold((2, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
    Ok(best.0.min(k))
}

/// Pointwise relabeling through a lumping map.
pub fn lump_trajectory(traj: &Trajectory, map: &LumpingMap) -> Result<Trajectory> {
    if traj.n_states() > map.n_micro() {
        if let Some(&s) = traj.states().iter().find(|&&s| s >= map.n_micro()) {
            return invalid(format!("state {s} outside the {}-state lumping map", map.n_micro()));
        }
    }
    let states = traj.states().iter().map(|&s| map.get(s)).collect();
    Trajectory::new(traj.dt(), map.n_macro(), states)
}

/// Maximal runs as `(state, length)`.
fn runs(states: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &s in states {
        match out.last_mut() {
            Some((last, len)) if *last == s => *len += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Minimum-dwell filter. The first run is kept; every later run shorter
/// than `min_dwell` is reassigned to the most recently accepted state.
pub fn remove_recrossing(traj: &Trajectory, min_dwell: usize) -> Result<Trajectory> {
    if min_dwell == 0 {
        return invalid("min_dwell must be >= 1");
    }
    let mut out = Vec::with_capacity(traj.len());
    let mut accepted = None;
    for (s, len) in runs(traj.states()) {
        let label = match accepted {
            Some(a) if len < min_dwell => a,
            _ => {
                accepted = Some(s);
                s
            }
        };
        out.extend(std::iter::repeat_n(label, len));
    }
    Trajectory::new(traj.dt(), traj.n_states(), out)
}

/// One `(state, length)` token of the run-length encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunToken {
    pub state: usize,
    pub length: usize,
}

impl fmt::Display for RunToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.state, self.length)
    }
}

pub const DEFAULT_MAX_RUN: usize = 1000;

/// Run-length tokens; runs longer than `max_run` are split.
pub fn run_length_encode(traj: &Trajectory, max_run: usize) -> Result<Vec<RunToken>> {
    if max_run == 0 {
        return invalid("max_run must be >= 1");
    }
    let mut out = Vec::new();
    for (state, mut len) in runs(traj.states()) {
        while len > 0 {
            let take = len.min(max_run);
            out.push(RunToken { state, length: take });
            len -= take;
        }
    }
    Ok(out)
}

pub fn run_length_decode(tokens: &[RunToken], n_states: usize, dt: f64) -> Result<Trajectory> {
    let mut states = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.length == 0 {
            return invalid(format!("token {i} has zero length"));
        }
        if t.state >= n_states {
            return invalid(format!("token {i} has state {} >= {n_states}", t.state));
        }
        states.extend(std::iter::repeat_n(t.state, t.length));
    }
    Trajectory::new(dt, n_states, states)
}

/// `"4-5, 3-3, 2-4"`.
pub fn format_tokens(tokens: &[RunToken]) -> String {
    tokens.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

pub fn parse_tokens(s: &str) -> Result<Vec<RunToken>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| {
            let (a, b) = t
                .split_once('-')
                .ok_or_else(|| Error::Parse { line: i, msg: format!("token '{t}' is not state-length") })?;
            let parse = |x: &str| {
                x.trim().parse::<usize>().map_err(|e| Error::Parse { line: i, msg: format!("'{t}': {e}") })
            };
            Ok(RunToken { state: parse(a)?, length: parse(b)? })
        })
        .collect()
}
