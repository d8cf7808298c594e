//! Continuous frames to discrete trajectories: periodic torsion binning and
//! k-center clustering under a pluggable metric.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::trajectory::{FrameSeries, Trajectory};

/// Uniform bins over a periodic angular range `[lo, hi)` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSpec {
    pub n_bins: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { n_bins: 20, lo: -180.0, hi: 180.0 }
    }
}

impl BinningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 || !(self.hi > self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return invalid(format!("invalid binning spec {self:?}"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    /// Bin of one angle; the angle is wrapped into the range first.
    pub fn bin(&self, theta: f64) -> usize {
        let period = self.hi - self.lo;
        let wrapped = (theta - self.lo).rem_euclid(period);
        ((wrapped / self.width()).floor() as usize).min(self.n_bins - 1)
    }

    pub fn midpoint(&self, state: usize) -> f64 {
        self.lo + (state as f64 + 0.5) * self.width()
    }
}

/// Bin a torsion-angle series into a trajectory with frame spacing `dt`.
pub fn bin_torsion(angles: &[f64], spec: &BinningSpec, dt: f64) -> Result<Trajectory> {
    spec.validate()?;
    if let Some(i) = angles.iter().position(|a| !a.is_finite()) {
        return invalid(format!("angle at index {i} is not finite"));
    }
    Trajectory::new(dt, spec.n_bins, angles.iter().map(|&a| spec.bin(a)).collect())
}

/// Distance between two frames given as flat coordinate slices.
pub trait Metric: Sync {
    fn id(&self) -> MetricId;
    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    Euclidean,
    MinRmsd,
}

impl MetricId {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::Euclidean => "euclidean",
            MetricId::MinRmsd => "min-rmsd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(MetricId::Euclidean),
            "min-rmsd" | "rmsd" => Ok(MetricId::MinRmsd),
            other => invalid(format!("unknown metric '{other}'")),
        }
    }

    pub fn metric(self) -> &'static dyn Metric {
        match self {
            MetricId::Euclidean => &Euclidean,
            MetricId::MinRmsd => &MinRmsd,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl Metric for Euclidean {
    fn id(&self) -> MetricId {
        MetricId::Euclidean
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return invalid(format!("frame dimensions differ: {} vs {}", a.len(), b.len()));
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    }
}

/// Minimal RMSD after optimal rigid superposition of `N x 3` frames.
#[derive(Debug, Clone, Copy, Default)]
pub struct MinRmsd;

impl Metric for MinRmsd {
    fn id(&self) -> MetricId {
        MetricId::MinRmsd
    }

    fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        rmsd(a, b)
    }
}

fn centered(x: &[f64]) -> Vec<Vector3<f64>> {
    let n = x.len() / 3;
    let pts: Vec<Vector3<f64>> =
        x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
    let com = pts.iter().sum::<Vector3<f64>>() / n as f64;
    pts.into_iter().map(|p| p - com).collect()
}

/// Optimal rotation taking `b` onto `a` (both already centred).
pub fn kabsch_rotation(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Matrix3<f64> {
    let h: Matrix3<f64> = b.iter().zip(a).map(|(p, q)| p * q.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    v_t.transpose() * fix * u.transpose()
}

/// Minimal RMSD between two frames of `N` atoms stored as `[x0, y0, z0, x1, ...]`.
pub fn rmsd(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("atom counts differ: {} vs {} coordinates", a.len(), b.len()));
    }
    if a.is_empty() || !a.len().is_multiple_of(3) {
        return invalid("frames must be non-empty N x 3 coordinate arrays");
    }
    let (ca, cb) = (centered(a), centered(b));
    let r = kabsch_rotation(&ca, &cb);
    let n = ca.len() as f64;
    let ss: f64 = ca.iter().zip(&cb).map(|(p, q)| (p - r * q).norm_squared()).sum();
    Ok((ss / n).max(0.0).sqrt())
}

/// Result of k-center clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub metric: MetricId,
    /// Frame indices of the centers in the source series, in pick order.
    pub center_indices: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    /// Largest distance from any source frame to its nearest center.
    pub radius: f64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Rebuild a model from center indices into a source series.
    pub fn from_indices(
        frames: &FrameSeries,
        metric: MetricId,
        center_indices: Vec<usize>,
        radius: f64,
    ) -> Result<Self> {
        if let Some(&i) = center_indices.iter().find(|&&i| i >= frames.len()) {
            return invalid(format!("center index {i} beyond {} frames", frames.len()));
        }
        let centers = center_indices.iter().map(|&i| frames.frame(i).to_vec()).collect();
        Ok(Self { metric, center_indices, centers, radius })
    }
}

/// Farthest-point (Gonzalez) traversal: a greedy 2-approximation of the
/// optimal k-center radius. The first center is frame 0 and ties go to the
/// lowest frame index, so the output is fully determined by the input; the
/// seed is accepted for randomised variants and currently unused.
pub fn k_center_cluster(
    frames: &FrameSeries,
    k: usize,
    metric: MetricId,
    _seed: u64,
) -> Result<ClusterModel> {
    let n = frames.len();
    if k == 0 || k > n {
        return invalid(format!("k = {k} must be in [1, {n}] (number of frames)"));
    }
    let m = metric.metric();
    let mut nearest = vec![f64::INFINITY; n];
    let mut centers = Vec::with_capacity(k);
    let mut next = 0usize;
    loop {
        centers.push(next);
        let c = frames.frame(next);
        let dists: Vec<Result<f64>> =
            (0..n).into_par_iter().map(|i| m.distance(frames.frame(i), c)).collect();
        for (slot, d) in nearest.iter_mut().zip(dists) {
            *slot = slot.min(d?);
        }
        // lowest index wins ties
        let (far, &radius) = nearest
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| if *cur.1 > *best.1 { cur } else { best });
        if centers.len() == k {
            return ClusterModel::from_indices(frames, metric, centers, radius.max(0.0));
        }
        if radius <= 0.0 {
            // every frame already coincides with a center; take unused indices in order
            let used: std::collections::HashSet<usize> = centers.iter().copied().collect();
            next = (0..n).find(|i| !used.contains(i)).expect("k <= n leaves an unused frame");
        } else {
            next = far;
        }
    }
}

/// Nearest-center assignment; ties go to the lowest center index.
pub fn assign(frames: &FrameSeries, model: &ClusterModel) -> Result<Trajectory> {
    let m = model.metric.metric();
    let states: Vec<Result<usize>> = (0..frames.len())
        .into_par_iter()
        .map(|i| {
            let f = frames.frame(i);
            let mut best = (0usize, f64::INFINITY);
            for (c, center) in model.centers.iter().enumerate() {
                let d = m.distance(f, center)?;
                if d < best.1 {
                    best = (c, d);
                }
            }
            Ok(best.0)
        })
        .collect();
    let states = states.into_iter().collect::<Result<Vec<_>>>()?;
    Trajectory::new(frames.dt(), model.k(), states)
}

/// Distance from every frame to its nearest center.
pub fn coverage_radius(frames: &FrameSeries, model: &ClusterModel) -> Result<f64> {
    let m = model.metric.metric();
    let mut worst: f64 = 0.0;
    for f in frames.frames() {
        let d = model
            .centers
            .iter()
            .map(|c| m.distance(f, c))
            .try_fold(f64::INFINITY, |acc, d| d.map(|d| acc.min(d)))?;
        worst = worst.max(d);
    }
    Ok(worst)
}
