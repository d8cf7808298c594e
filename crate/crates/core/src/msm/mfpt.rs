use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::TransitionModel;
use crate::error::{Error, Result};

/// Mean first-passage times `t[(i, j)]` in picoseconds between the active
/// states of a model. Pairs that do not reach the target with probability
/// one are `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct MfptMatrix {
    pub lag_time: f64,
    pub times: DMatrix<f64>,
}

impl MfptMatrix {
    pub fn infinite_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.times.nrows();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.times[(i, j)].is_infinite())
            .collect()
    }
}

fn predecessors(m: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let mut pred = vec![Vec::new(); n];
    for i in 0..n {
        for k in 0..n {
            if m[(i, k)] > 0.0 {
                pred[k].push(i);
            }
        }
    }
    pred
}

/// Reverse BFS from `seeds`, never expanding through `blocked`.
fn reverse_reach(pred: &[Vec<usize>], seeds: &[usize], blocked: Option<usize>) -> Vec<bool> {
    let mut seen = vec![false; pred.len()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &s in seeds {
        seen[s] = true;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &u in &pred[v] {
            if !seen[u] && Some(u) != blocked {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen
}

fn mfpt_to_target(m: &DMatrix<f64>, pred: &[Vec<usize>], tau: f64, j: usize) -> Result<Vec<f64>> {
    let n = m.nrows();
    let reaches_j = reverse_reach(pred, &[j], None);
    let stuck: Vec<usize> = (0..n).filter(|&i| !reaches_j[i]).collect();
    // States that can wander into `stuck` before hitting `j` never arrive
    // with probability one.
    let escapes = if stuck.is_empty() {
        vec![false; n]
    } else {
        reverse_reach(pred, &stuck, Some(j))
    };
    let finite: Vec<usize> = (0..n).filter(|&i| i != j && !escapes[i]).collect();
    let mut out = vec![f64::INFINITY; n];
    out[j] = 0.0;
    if finite.is_empty() {
        return Ok(out);
    }
    let f = finite.len();
    let a = DMatrix::from_fn(f, f, |r, c| {
        let delta = if r == c { 1.0 } else { 0.0 };
        delta - m[(finite[r], finite[c])]
    });
    let rhs = DVector::from_element(f, tau);
    let lu = a.clone().lu();
    let mut x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate(format!("first-passage system for target {j} is singular")))?;
    // one step of iterative refinement
    let resid = &rhs - &a * &x;
    if let Some(dx) = lu.solve(&resid) {
        x += dx;
    }
    for (r, &i) in finite.iter().enumerate() {
        out[i] = x[r];
    }
    Ok(out)
}

/// Solves `t_ij = tau + sum_k T_ik t_kj` with `t_jj = 0` for every target.
pub fn mfpt(t: &TransitionModel) -> Result<MfptMatrix> {
    let m = t.matrix();
    let n = t.n_states();
    let tau = t.lag_time();
    let pred = predecessors(m);
    let cols: Vec<Result<Vec<f64>>> =
        (0..n).into_par_iter().map(|j| mfpt_to_target(m, &pred, tau, j)).collect();
    let mut times = DMatrix::zeros(n, n);
    for (j, col) in cols.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            times[(i, j)] = v;
        }
    }
    Ok(MfptMatrix { lag_time: tau, times })
}

/// Largest absolute violation of `t_ij = tau + sum_k T_ik t_kj` over finite
/// off-diagonal entries.
pub fn mfpt_residual(t: &TransitionModel, times: &MfptMatrix) -> f64 {
    let m = t.matrix();
    let n = t.n_states();
    let tau = t.lag_time();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        for i in 0..n {
            let tij = times.times[(i, j)];
            if i == j || !tij.is_finite() {
                continue;
            }
            let mut rhs = tau;
            for k in 0..n {
                if m[(i, k)] > 0.0 {
                    rhs += m[(i, k)] * times.times[(k, j)];
                }
            }
            worst = worst.max((tij - rhs).abs());
        }
    }
    worst
}
