//! Ground-truth dynamics: overdamped Langevin on a two-basin potential and
//! exact Markov-chain samplers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::msm::TransitionModel;
use crate::rng::{child_rng, rng_from_seed};
use crate::trajectory::{FrameSeries, Trajectory};

/// A closed-form potential energy surface with an analytic gradient.
pub trait Potential: Send + Sync {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn label(&self) -> String;
}

/// `U(x, y) = (x^2 - 1)^2 + a x + b y^2`.
///
/// `x` is the slow coordinate carrying the barrier, `y` a stiff harmonic
/// coordinate. With the built-in constants the left well is the deeper one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleWell {
    pub tilt: f64,
    pub stiffness: f64,
}

/// Default thermal energy; puts the barrier above the deeper well at
/// roughly 4.6 kT.
pub const DEFAULT_KT: f64 = 0.25;

impl DoubleWell {
    fn dudx(&self, x: f64) -> f64 {
        4.0 * x * (x * x - 1.0) + self.tilt
    }

    fn newton(&self, mut x: f64) -> f64 {
        for _ in 0..100 {
            let step = self.dudx(x) / (12.0 * x * x - 4.0);
            x -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        x
    }

    /// The two local minima `(x, 0)`, left first.
    pub fn minima(&self) -> [[f64; 2]; 2] {
        [[self.newton(-1.0), 0.0], [self.newton(1.0), 0.0]]
    }

    /// The saddle point between the wells.
    pub fn saddle(&self) -> [f64; 2] {
        [self.newton(0.0), 0.0]
    }

    /// Saddle energy minus the energy of the deeper minimum.
    pub fn barrier(&self) -> f64 {
        let [a, b] = self.minima();
        self.energy(&self.saddle()) - self.energy(&a).min(self.energy(&b))
    }

    /// Basin index of a point: 0 left of the saddle, 1 right of it.
    pub fn basin(&self, x: &[f64]) -> usize {
        usize::from(x[0] > self.saddle()[0])
    }
}

impl Potential for DoubleWell {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, p: &[f64]) -> f64 {
        let (x, y) = (p[0], p[1]);
        (x * x - 1.0).powi(2) + self.tilt * x + self.stiffness * y * y
    }

    fn gradient(&self, p: &[f64], out: &mut [f64]) {
        out[0] = self.dudx(p[0]);
        out[1] = 2.0 * self.stiffness * p[1];
    }

    fn label(&self) -> String {
        format!("double-well(a={}, b={})", self.tilt, self.stiffness)
    }
}

/// The asymmetric two-basin surface used throughout: `a = 0.15`, `b = 2`.
///
/// Minima at `x ~ -1.0185` (U ~ -0.151) and `x ~ 0.9810` (U ~ 0.149), saddle
/// at `x ~ 0.0375` (U ~ 1.003).
pub fn builtin_double_well() -> DoubleWell {
    DoubleWell { tilt: 0.15, stiffness: 2.0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub kt: f64,
    pub gamma: f64,
    pub seed: u64,
    pub start: Vec<f64>,
    /// Keep every `save_every`-th step as a frame.
    pub save_every: usize,
}

impl LangevinConfig {
    pub fn new(n_steps: usize, dt: f64, kt: f64, gamma: f64, seed: u64, start: Vec<f64>) -> Self {
        Self { n_steps, dt, kt, gamma, seed, start, save_every: 1 }
    }
}

/// Overdamped Euler–Maruyama:
/// `x <- x - grad U dt / gamma + sqrt(2 kT dt / gamma) eta`.
///
/// Records the position after every `save_every` steps, so the series holds
/// `n_steps / save_every` frames with spacing `dt * save_every`.
pub fn simulate_langevin(pot: &dyn Potential, cfg: &LangevinConfig) -> Result<FrameSeries> {
    let d = pot.dim();
    if cfg.n_steps == 0 || cfg.save_every == 0 {
        return invalid("n_steps and save_every must be >= 1");
    }
    if !(cfg.dt > 0.0 && cfg.gamma > 0.0 && cfg.kt >= 0.0) {
        return invalid("Langevin needs dt > 0, gamma > 0 and kT >= 0");
    }
    if cfg.start.len() != d {
        return invalid(format!("start point has dimension {}, expected {d}", cfg.start.len()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let drift = cfg.dt / cfg.gamma;
    let noise = (2.0 * cfg.kt * cfg.dt / cfg.gamma).sqrt();
    let mut x = cfg.start.clone();
    let mut g = vec![0.0; d];
    let mut data = Vec::with_capacity(cfg.n_steps / cfg.save_every * d);
    for step in 1..=cfg.n_steps {
        pot.gradient(&x, &mut g);
        for (xi, gi) in x.iter_mut().zip(&g) {
            let eta: f64 = rng.sample(StandardNormal);
            *xi += -gi * drift + noise * eta;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::TimestepTooLarge { step });
        }
        if step % cfg.save_every == 0 {
            data.extend_from_slice(&x);
        }
    }
    FrameSeries::new(cfg.dt * cfg.save_every as f64, d, data, cfg.seed)
}

fn sample_index<R: Rng>(rng: &mut R, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    let last = cumulative.len() - 1;
    cumulative.iter().position(|&c| u < c).unwrap_or(last)
}

fn cumulative(row: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = row
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(l) = out.last_mut() {
        *l = f64::INFINITY;
    }
    out
}

/// Exact sample of `n_steps` frames from a transition model. The initial
/// distribution is over the model's active states; emitted labels are in the
/// model's full alphabet and the frame spacing is the model's lag time.
pub fn sample_markov_chain(
    t: &TransitionModel,
    n_steps: usize,
    initial: &[f64],
    seed: u64,
) -> Result<Trajectory> {
    let n = t.n_states();
    if initial.len() != n {
        return invalid(format!("initial distribution has {} entries, expected {n}", initial.len()));
    }
    let total: f64 = initial.iter().sum();
    if initial.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return invalid("initial distribution must be non-negative and sum to one");
    }
    if n_steps == 0 {
        return invalid("n_steps must be >= 1");
    }
    let m = t.matrix();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cumulative(m.row(i).iter().copied())).collect();
    let mut rng = rng_from_seed(seed);
    let mut s = sample_index(&mut rng, &cumulative(initial.iter().copied()));
    let mut local = Vec::with_capacity(n_steps);
    local.push(s);
    for _ in 1..n_steps {
        s = sample_index(&mut rng, &rows[s]);
        local.push(s);
    }
    let active = t.active_states();
    Trajectory::new(t.lag_time(), t.n_full(), local.into_iter().map(|i| active[i]).collect())
}

/// Start in a single state.
pub fn point_mass(n: usize, state: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[state] = 1.0;
    v
}

/// Two metastable basins, each made of one core state and `jitter` fast
/// satellite states.
///
/// Inside a basin the core hops to a uniformly chosen satellite with
/// probability `hop`, and a satellite returns to its core (or, with
/// probability `hop`, jumps to another satellite). Every state of basin A
/// enters the core of basin B with probability `exit[0]` and vice versa, so
/// the basin indicator is an exactly lumpable two-state chain whose slow
/// eigenvalue is `1 - exit[0] - exit[1]`.
///
/// Observed frames may additionally flicker: with probability `flicker` a
/// frame is reported as the other basin's core while the underlying chain
/// stays put. These one-frame recrossings are observation noise, so the
/// ground-truth slow timescale is still [`JitterChain::slow_its`].
///
/// State layout: A core, A satellites, B core, B satellites.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterChain {
    pub jitter: usize,
    pub hop: f64,
    pub exit: [f64; 2],
    pub flicker: f64,
    pub dt: f64,
}

impl JitterChain {
    pub fn n_states(&self) -> usize {
        2 * (self.jitter + 1)
    }

    pub fn basin_of(&self, state: usize) -> usize {
        usize::from(state > self.jitter)
    }

    /// Crisp basin assignment of every micro-state.
    pub fn basins(&self) -> Vec<usize> {
        (0..self.n_states()).map(|s| self.basin_of(s)).collect()
    }

    pub fn slow_eigenvalue(&self) -> f64 {
        1.0 - self.exit[0] - self.exit[1]
    }

    /// Analytic first implied timescale in ps.
    pub fn slow_its(&self) -> f64 {
        -self.dt / self.slow_eigenvalue().ln()
    }

    /// Observed trajectory of `n_steps` frames starting in the A core.
    pub fn sample(&self, n_steps: usize, seed: u64) -> Result<Trajectory> {
        if !(0.0..0.5).contains(&self.flicker) {
            return invalid("flicker must lie in [0, 0.5)");
        }
        let t = self.transition_model()?;
        let hidden = sample_markov_chain(&t, n_steps, &point_mass(self.n_states(), 0), seed)?;
        if self.flicker == 0.0 {
            return Ok(hidden);
        }
        let mut rng = child_rng(seed, &[1]);
        let k = self.jitter;
        let states = hidden
            .states()
            .iter()
            .map(|&s| if rng.random::<f64>() < self.flicker { (1 - self.basin_of(s)) * (k + 1) } else { s })
            .collect();
        Trajectory::new(self.dt, self.n_states(), states)
    }

    pub fn transition_model(&self) -> Result<TransitionModel> {
        let k = self.jitter;
        if k == 0 || !(0.0..1.0).contains(&self.hop) {
            return invalid("jitter chain needs >= 1 satellite and hop in [0, 1)");
        }
        let n = self.n_states();
        let mut m = DMatrix::zeros(n, n);
        for basin in 0..2 {
            let core = basin * (k + 1);
            let other_core = (1 - basin) * (k + 1);
            let out = self.exit[basin];
            if !(out > 0.0 && out + self.hop < 1.0) {
                return invalid("exit probabilities must be positive and leave room to stay");
            }
            m[(core, other_core)] = out;
            m[(core, core)] = 1.0 - out - self.hop;
            for s in 1..=k {
                m[(core, core + s)] = self.hop / k as f64;
                m[(core + s, other_core)] = out;
                if k > 1 {
                    m[(core + s, core)] = 1.0 - out - self.hop;
                    for s2 in 1..=k {
                        if s2 != s {
                            m[(core + s, core + s2)] = self.hop / (k - 1) as f64;
                        }
                    }
                } else {
                    m[(core + s, core)] = 1.0 - out;
                }
            }
        }
        TransitionModel::new(m, self.dt, false)
    }
}
