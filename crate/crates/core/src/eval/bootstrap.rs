//! Trajectory-level bootstrap.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::child_rng;
use crate::trajectory::Trajectory;

pub const DEFAULT_N_BOOT: usize = 50;

/// Per-component bootstrap summary of a vector-valued metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapStats {
    /// Mean over replicates with a finite value in that component.
    pub mean: Vec<f64>,
    /// Sample standard deviation over the same replicates (0 with fewer
    /// than two).
    pub std: Vec<f64>,
    /// Replicates with a finite value, per component.
    pub n_finite: Vec<usize>,
    pub n_ok: usize,
    /// Replicates whose metric returned an error; they are dropped.
    pub n_failed: usize,
}

/// Summaries of `values[r][c]` over replicates `r`, ignoring non-finite values.
pub fn summarize(values: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut mean = vec![f64::NAN; width];
    let mut std = vec![f64::NAN; width];
    let mut n_finite = vec![0; width];
    for c in 0..width {
        let xs: Vec<f64> = values.iter().map(|v| v[c]).filter(|x| x.is_finite()).collect();
        n_finite[c] = xs.len();
        if xs.is_empty() {
            continue;
        }
        if xs.iter().all(|&x| x == xs[0]) {
            mean[c] = xs[0];
            std[c] = 0.0;
            continue;
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        mean[c] = m;
        std[c] = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
        };
    }
    (mean, std, n_finite)
}

/// Resample whole trajectories with replacement `n_boot` times and
/// summarise `metric` over the replicates. Replicate `r` draws its indices
/// from `child_rng(seed, [r])`, so the result does not depend on thread
/// scheduling.
pub fn bootstrap_metric<F>(ensemble: &[Trajectory], metric: F, n_boot: usize, seed: u64) -> Result<BootstrapStats>
where
    F: Fn(&[Trajectory]) -> Result<Vec<f64>> + Sync,
{
    if ensemble.is_empty() {
        return invalid("bootstrap needs a non-empty ensemble");
    }
    if n_boot == 0 {
        return invalid("n_boot must be at least 1");
    }
    let n = ensemble.len();
    let results: Vec<Result<Vec<f64>>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = child_rng(seed, &[r as u64]);
            let sample: Vec<Trajectory> = (0..n).map(|_| ensemble[rng.random_range(0..n)].clone()).collect();
            metric(&sample)
        })
        .collect();
    let mut ok = Vec::new();
    let mut n_failed = 0;
    for r in results {
        match r {
            Ok(v) if ok.first().is_none_or(|f: &Vec<f64>| f.len() == v.len()) => ok.push(v),
            Ok(_) => n_failed += 1,
            Err(e) => {
                log::debug!("bootstrap replicate dropped: {e}");
                n_failed += 1;
            }
        }
    }
    if n_failed > 0 {
        log::warn!("{n_failed} of {n_boot} bootstrap replicates failed and were dropped");
    }
    let width = ok.first().map_or(0, Vec::len);
    let (mean, std, n_finite) = summarize(&ok, width);
    Ok(BootstrapStats { mean, std, n_finite, n_ok: ok.len(), n_failed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn ens(k: usize) -> Vec<Trajectory> {
        (0..k).map(|i| Trajectory::new(1.0, 3, vec![i % 3, (i + 1) % 3, 0]).unwrap()).collect()
    }

    #[test]
    fn constant_metric_has_zero_spread() {
        let s = bootstrap_metric(&ens(5), |_| Ok(vec![0.1, 7.0]), 50, 3).unwrap();
        assert_eq!(s.mean, vec![0.1, 7.0]);
        assert_eq!(s.std, vec![0.0, 0.0]);
        assert_eq!(s.n_ok, 50);
    }

    #[test]
    fn identical_members_have_zero_spread() {
        let one = Trajectory::new(1.0, 3, vec![0, 1, 1, 2]).unwrap();
        let e = vec![one; 6];
        let s = bootstrap_metric(&e, |t| Ok(vec![t.iter().map(|x| x.states()[1] as f64).sum::<f64>() / t.len() as f64]), 20, 0).unwrap();
        assert_eq!(s.std, vec![0.0]);
    }

    #[test]
    fn failures_are_counted() {
        let s = bootstrap_metric(
            &ens(4),
            |t| if t[0].states()[0] == 0 { Err(Error::InvalidInput("x".into())) } else { Ok(vec![1.0]) },
            40,
            1,
        )
        .unwrap();
        assert_eq!(s.n_ok + s.n_failed, 40);
        assert!(s.n_failed > 0);
    }

    #[test]
    fn deterministic_per_seed() {
        let f = |t: &[Trajectory]| Ok(vec![t.iter().map(|x| x.states()[0] as f64).sum()]);
        let a = bootstrap_metric(&ens(7), f, 30, 9).unwrap();
        let b = bootstrap_metric(&ens(7), f, 30, 9).unwrap();
        assert_eq!(a, b);
    }
}
