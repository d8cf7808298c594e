//! One function per pipeline stage. Each reads its inputs, writes its
//! artifacts under `out` and returns what the next stage needs.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use slowdyn::coarse_grain::{lump_trajectory, pcca_plus_full_alphabet, remove_recrossing, LumpingMap};
use slowdyn::discretize::{assign, bin_torsion, k_center_cluster};
use slowdyn::eval::{build_report, generate, write_report, EvalReport, GenerationConfig, ReportConfig};
use slowdyn::io;
use slowdyn::msm::{count_transitions, transition_matrix};
use slowdyn::rng::derive_seed;
use slowdyn::seqmodel::train::history_csv;
use slowdyn::seqmodel::{Checkpoint, TrainConfig, Trainer};
use slowdyn::surrogate::{builtin_double_well, point_mass, sample_markov_chain, simulate_langevin, JitterChain, LangevinConfig};
use slowdyn::{FrameSeries, TransitionModel, Trajectory};

use crate::config::{CoarseGrainConfig, DiscretizeConfig, Order, SimulateConfig, Source};
use crate::error::{CliError, CliResult};

pub const FRAMES_DIR: &str = "frames";
pub const TRAJ_DIR: &str = "traj";
pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LAST_GOOD_NAME: &str = "last_good.ckpt";

/// Output of [`simulate`]: continuous frames or ready-made state sequences.
pub enum Simulated {
    Frames(Vec<FrameSeries>),
    States(Vec<Trajectory>),
}

fn write_err(e: slowdyn::Error, what: &Path) -> CliError {
    CliError::runtime(format!("writing {}: {e}", what.display()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// `dir/sub` if that is a directory, else `dir` itself, so a stage can be
/// pointed at either a previous stage's output or the data folder inside it.
pub fn data_dir(dir: &Path, sub: &str) -> CliResult<PathBuf> {
    if !dir.exists() {
        return Err(CliError::missing(format!("input {} does not exist", dir.display())));
    }
    let inner = dir.join(sub);
    Ok(if inner.is_dir() { inner } else { dir.to_path_buf() })
}

pub fn read_trajectories(dir: &Path) -> CliResult<Vec<Trajectory>> {
    let d = data_dir(dir, TRAJ_DIR)?;
    io::read_trajectory_dir(&d).map_err(|e| match e {
        slowdyn::Error::InvalidInput(m) if m.starts_with("no ") => CliError::missing(m),
        e => CliError::reading(e, d.display()),
    })
}

pub fn read_frames(dir: &Path) -> CliResult<Vec<FrameSeries>> {
    let d = data_dir(dir, FRAMES_DIR)?;
    io::read_frames_dir(&d).map_err(|e| match e {
        slowdyn::Error::InvalidInput(m) if m.starts_with("no ") => CliError::missing(m),
        e => CliError::reading(e, d.display()),
    })
}

pub fn write_trajectories(out: &Path, trajs: &[Trajectory]) -> CliResult<()> {
    let d = out.join(TRAJ_DIR);
    io::write_trajectory_dir(&d, trajs).map_err(|e| write_err(e, &d))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::reading(e, path.display()))
}

/// Trajectory `i` uses seed `derive_seed(seed, [i])`; Langevin runs start
/// alternately in the left and right minimum.
pub fn simulate(cfg: &SimulateConfig, seed: u64, out: &Path) -> CliResult<Simulated> {
    let n = cfg.n_trajectories;
    if n == 0 {
        return Err(CliError::config("simulate.n_trajectories must be positive"));
    }
    let seed_of = |i: usize| derive_seed(seed, &[i as u64]);
    let sim = match &cfg.source {
        &Source::DoubleWell { n_steps, dt, save_every, kt, gamma } => {
            let pot = builtin_double_well();
            let minima = pot.minima();
            let series = (0..n)
                .map(|i| {
                    let mut c = LangevinConfig::new(n_steps, dt, kt, gamma, seed_of(i), minima[i % 2].to_vec());
                    c.save_every = save_every;
                    simulate_langevin(&pot, &c)
                })
                .collect::<slowdyn::Result<Vec<_>>>()?;
            Simulated::Frames(series)
        }
        Source::Jitter { jitter, hop, exit, flicker, dt, length } => {
            let chain = JitterChain { jitter: *jitter, hop: *hop, exit: *exit, flicker: *flicker, dt: *dt };
            Simulated::States((0..n).map(|i| chain.sample(*length, seed_of(i))).collect::<slowdyn::Result<_>>()?)
        }
        Source::Chain { rows, dt, length } => {
            let t = TransitionModel::from_rows(rows, *dt)?;
            let k = t.n_states();
            let trajs = (0..n)
                .map(|i| sample_markov_chain(&t, *length, &point_mass(k, i % k), seed_of(i)))
                .collect::<slowdyn::Result<_>>()?;
            Simulated::States(trajs)
        }
    };
    match &sim {
        Simulated::Frames(series) => {
            let d = out.join(FRAMES_DIR);
            io::write_frames_dir(&d, series).map_err(|e| write_err(e, &d))?;
        }
        Simulated::States(trajs) => write_trajectories(out, trajs)?,
    }
    Ok(sim)
}

/// k-center is fitted on every `stride`-th frame of all series pooled;
/// `cluster_model.txt` indexes into that pooled subset and `centers.csv`
/// holds the center coordinates.
pub fn discretize(cfg: &DiscretizeConfig, frames: &[FrameSeries], seed: u64, out: &Path) -> CliResult<Vec<Trajectory>> {
    let Some(first) = frames.first() else {
        return Err(CliError::missing("no frames to discretize"));
    };
    let trajs = match cfg {
        &DiscretizeConfig::KCenter { k, metric, stride } => {
            if stride == 0 {
                return Err(CliError::config("discretize.stride must be positive"));
            }
            let pooled: Vec<Vec<f64>> =
                frames.iter().flat_map(|s| s.frames().step_by(stride).map(<[f64]>::to_vec)).collect();
            let fit = FrameSeries::from_frames(first.dt(), &pooled, seed)?;
            let model = k_center_cluster(&fit, k, metric, seed)?;
            log::info!("k-center: k={k} radius={}", model.radius);
            fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
            write_file(&out.join("cluster_model.txt"), &io::format_cluster_model(&model))?;
            let centers = FrameSeries::from_frames(first.dt(), &model.centers, seed)?;
            write_file(&out.join("centers.csv"), &io::format_frames(&centers))?;
            frames.iter().map(|s| assign(s, &model)).collect::<slowdyn::Result<Vec<_>>>()?
        }
        DiscretizeConfig::Torsion { column, bins } => {
            if let Some(s) = frames.iter().find(|s| *column >= s.dim()) {
                return Err(CliError::config(format!("discretize.column {column} out of range for {}-dimensional frames", s.dim())));
            }
            frames.iter().map(|s| bin_torsion(&s.column(*column), bins, s.dt())).collect::<slowdyn::Result<Vec<_>>>()?
        }
    };
    write_trajectories(out, &trajs)?;
    Ok(trajs)
}

/// Subsample, then lump and filter recrossings in the configured order.
/// PCCA+ runs on a model estimated from the subsampled data at `cfg.lag`.
pub fn coarsegrain(cfg: &CoarseGrainConfig, trajs: &[Trajectory], out: &Path) -> CliResult<(Vec<Trajectory>, Option<LumpingMap>)> {
    if cfg.subsample == 0 || cfg.lag == 0 {
        return Err(CliError::config("coarsegrain.subsample and coarsegrain.lag must be positive"));
    }
    let recross = |ts: Vec<Trajectory>| -> CliResult<Vec<Trajectory>> {
        match cfg.min_dwell {
            Some(d) => Ok(ts.iter().map(|t| remove_recrossing(t, d)).collect::<slowdyn::Result<_>>()?),
            None => Ok(ts),
        }
    };
    let mut data = trajs.iter().map(|t| t.subsample(cfg.subsample)).collect::<slowdyn::Result<Vec<_>>>()?;
    if cfg.order == Order::RecrossFirst {
        data = recross(data)?;
    }
    let mut map = None;
    if let Some(n_macro) = cfg.lump {
        let t = transition_matrix(&count_transitions(&data, cfg.lag)?, cfg.reversible)?;
        let m = pcca_plus_full_alphabet(&t, n_macro)?;
        data = data.iter().map(|t| lump_trajectory(t, &m)).collect::<slowdyn::Result<_>>()?;
        map = Some(m);
    }
    if cfg.order == Order::LumpFirst {
        data = recross(data)?;
    }
    write_trajectories(out, &data)?;
    if let Some(m) = &map {
        write_file(&out.join("lumping.txt"), &io::format_lumping(m))?;
    }
    Ok((data, map))
}

/// Train to completion. With `resume`, model, data and schedule come from
/// the checkpoint and only the stopping rule (`epochs`, `max_steps`) from
/// `cfg`. On divergence the state before the failing step is saved as
/// `last_good.ckpt`.
pub fn train(cfg: &TrainConfig, trajs: &[Trajectory], resume: Option<&Path>, out: &Path) -> CliResult<Checkpoint> {
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(trajs, &load_checkpoint(p)?)?;
            t.set_budget(cfg.epochs, cfg.max_steps)?;
            t
        }
        None => Trainer::new(trajs, cfg.clone())?,
    };
    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    match trainer.run(None) {
        Ok(()) => {}
        Err(slowdyn::Error::Diverged { step, reason, last_good }) => {
            let p = out.join(LAST_GOOD_NAME);
            last_good.save(&p).map_err(|e| write_err(e, &p))?;
            return Err(CliError::runtime(format!(
                "training diverged at step {step}: {reason}; last good state saved to {}",
                p.display()
            )));
        }
        Err(e) => return Err(e.into()),
    }
    let ckpt = trainer.checkpoint();
    let p = out.join(CHECKPOINT_NAME);
    ckpt.save(&p).map_err(|e| write_err(e, &p))?;
    write_file(&out.join("history.csv"), &history_csv(trainer.history()))?;
    Ok(ckpt)
}

pub fn generate_stage(cfg: &GenerationConfig, ckpt: &Checkpoint, reference: &[Trajectory], out: &Path) -> CliResult<Vec<Trajectory>> {
    let gen = generate(ckpt, reference, cfg)?;
    write_trajectories(out, &gen)?;
    Ok(gen)
}

/// Provenance holds hashes and configs only, never paths, so reports from
/// identical runs in different directories are identical.
pub fn evaluate(
    cfg: &ReportConfig,
    reference: &[Trajectory],
    generated: &[Trajectory],
    ckpt: Option<&Checkpoint>,
    extra: serde_json::Value,
    out: &Path,
) -> CliResult<EvalReport> {
    let mut prov = json!({ "extra": extra });
    if let Some(c) = ckpt {
        prov["checkpoint_hash"] = json!(c.content_hash()?);
        prov["train_config_hash"] = json!(c.meta.config_hash);
        prov["data_hash"] = json!(c.meta.data_hash);
    }
    let report = build_report(reference, generated, cfg, prov)?;
    write_report(out, &report).map_err(|e| write_err(e, out))?;
    Ok(report)
}
