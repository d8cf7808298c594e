//! Run configuration.
//!
//! A run is described by one JSON document. Values from a user file are
//! merged over the defaults of the chosen [`Scale`], command-line flags are
//! applied on top, and the result is written next to the outputs as
//! `resolved_config.json`. Feeding that file back through `--config`
//! reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use slowdyn::discretize::{BinningSpec, MetricId};
use slowdyn::eval::{GenerationConfig, ReportConfig};
use slowdyn::seqmodel::{LrSchedule, LstmConfig, ModelConfig, TrainConfig, TransformerConfig};

use crate::error::CliError;

pub const RESOLVED_NAME: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the simulation and the k-center fit; stages with their own
    /// `seed` field use that instead.
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimulateConfig,
    pub discretize: DiscretizeConfig,
    pub coarsegrain: CoarseGrainConfig,
    pub train: TrainConfig,
    pub generate: GenerationConfig,
    pub evaluate: ReportConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_scale(Scale::Desk)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_trajectories: usize,
    pub source: Source,
}

/// Ground-truth dynamics to sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// Overdamped Langevin on the built-in two-basin surface; writes frames.
    DoubleWell { n_steps: usize, dt: f64, save_every: usize, kt: f64, gamma: f64 },
    /// Two basins with fast satellites and optional one-frame flicker;
    /// writes state trajectories.
    Jitter { jitter: usize, hop: f64, exit: [f64; 2], flicker: f64, dt: f64, length: usize },
    /// An explicit transition matrix; writes state trajectories.
    Chain { rows: Vec<Vec<f64>>, dt: f64, length: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscretizeConfig {
    /// Farthest-point clustering fitted on every `stride`-th frame.
    KCenter { k: usize, metric: MetricId, stride: usize },
    /// Uniform bins of one coordinate, read as an angle in degrees.
    Torsion { column: usize, bins: BinningSpec },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    LumpFirst,
    RecrossFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseGrainConfig {
    /// Keep every `subsample`-th frame before anything else.
    pub subsample: usize,
    /// Number of PCCA+ macro-states; `None` keeps micro-states.
    pub lump: Option<usize>,
    /// Lag (frames) of the model PCCA+ is run on.
    pub lag: usize,
    pub reversible: bool,
    /// Minimum-dwell recrossing filter; `None` disables it.
    pub min_dwell: Option<usize>,
    pub order: Order,
}

impl Default for CoarseGrainConfig {
    fn default() -> Self {
        CoarseGrainConfig { subsample: 1, lump: None, lag: 1, reversible: true, min_dwell: None, order: Order::LumpFirst }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Saving interval, lumping, recrossing removal, stateful vs stateless,
    /// run-length tokens, and LSTM vs uni/bidirectional Transformer.
    #[serde(rename = "paper-ablation")]
    #[value(name = "paper-ablation")]
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// Seconds; for tests.
    Smoke,
    /// A few minutes on one laptop core.
    Desk,
    /// Full-size models and data.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Lstm,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub scale: Scale,
    /// Run only these cells (all when `None`).
    pub cells: Option<Vec<String>>,
    /// Macro-states for the lumped cells.
    pub n_macro: usize,
    /// Recrossing filter for the recrossing cells.
    pub min_dwell: usize,
    /// Run cap for the run-length cells.
    pub run_length_cap: usize,
    /// Training for Transformer cells; LSTM cells use `train`.
    pub transformer: TrainConfig,
    /// Generation for Transformer cells, which re-read a window per token
    /// and are far slower than the LSTM; LSTM cells use `generate`.
    pub transformer_generate: GenerationConfig,
}

impl Scale {
    pub fn simulate(self) -> SimulateConfig {
        let (n_trajectories, n_steps) = match self {
            Scale::Smoke => (4, 100_000),
            Scale::Desk => (4, 1_000_000),
            Scale::Full => (10, 10_000_000),
        };
        let source = Source::DoubleWell { n_steps, dt: 1e-3, save_every: 10, kt: slowdyn::surrogate::DEFAULT_KT, gamma: 1.0 };
        SimulateConfig { n_trajectories, source }
    }

    pub fn discretize(self) -> DiscretizeConfig {
        let k = match self {
            Scale::Smoke => 10,
            Scale::Desk => 20,
            Scale::Full => 100,
        };
        DiscretizeConfig::KCenter { k, metric: MetricId::Euclidean, stride: 10 }
    }

    /// Training preset for one architecture.
    pub fn train(self, model: ModelKind) -> TrainConfig {
        match (self, model) {
            (Scale::Smoke, ModelKind::Lstm) => TrainConfig {
                model: ModelConfig::Lstm(LstmConfig { vocab: 1, embed: 8, hidden: 16 }),
                seq_len: 20,
                batch_size: 8,
                epochs: 1000,
                max_steps: Some(10),
                ..TrainConfig::lstm()
            },
            (Scale::Smoke, ModelKind::Transformer) => TrainConfig {
                model: ModelConfig::Transformer(TransformerConfig {
                    d_model: 16,
                    heads: 2,
                    stacks: 1,
                    d_ff: 32,
                    max_len: 32,
                    ..TransformerConfig::new(1)
                }),
                seq_len: 16,
                batch_size: 4,
                epochs: 1000,
                max_steps: Some(5),
                schedule: LrSchedule::Noam { d_model: 16, warmup: 10 },
                ..TrainConfig::transformer()
            },
            (Scale::Desk, ModelKind::Lstm) => TrainConfig { epochs: 1000, max_steps: Some(100), ..TrainConfig::desk_lstm() },
            (Scale::Desk, ModelKind::Transformer) => {
                let base = TrainConfig::desk_transformer();
                let ModelConfig::Transformer(t) = base.model else { unreachable!() };
                TrainConfig {
                    model: ModelConfig::Transformer(TransformerConfig { max_len: 64, ..t }),
                    seq_len: 32,
                    batch_size: 16,
                    epochs: 1000,
                    max_steps: Some(80),
                    ..base
                }
            }
            (Scale::Full, ModelKind::Lstm) => TrainConfig::lstm(),
            (Scale::Full, ModelKind::Transformer) => TrainConfig::transformer(),
        }
    }

    pub fn generate(self, model: ModelKind) -> GenerationConfig {
        let (n_trajectories, length) = match (self, model) {
            (Scale::Smoke, ModelKind::Lstm) => (4, 500),
            (Scale::Smoke, ModelKind::Transformer) => (2, 100),
            (Scale::Desk, ModelKind::Lstm) => (20, 5000),
            (Scale::Desk, ModelKind::Transformer) => (8, 1000),
            (Scale::Full, _) => (100, 10_000),
        };
        GenerationConfig { n_trajectories, length, ..GenerationConfig::default() }
    }

    pub fn evaluate(self) -> ReportConfig {
        match self {
            Scale::Smoke => ReportConfig { lags: vec![1, 2, 5], k_its: 2, n_boot: 5, ..ReportConfig::default() },
            Scale::Desk | Scale::Full => ReportConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for one scale.
    pub fn for_scale(scale: Scale) -> RunConfig {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            simulate: scale.simulate(),
            discretize: scale.discretize(),
            coarsegrain: CoarseGrainConfig::default(),
            train: scale.train(ModelKind::Lstm),
            generate: scale.generate(ModelKind::Lstm),
            evaluate: scale.evaluate(),
            pipeline: PipelineConfig {
                preset: Preset::Ablation,
                scale,
                cells: None,
                n_macro: 2,
                min_dwell: 3,
                run_length_cap: 200,
                transformer: scale.train(ModelKind::Transformer),
                transformer_generate: scale.generate(ModelKind::Transformer),
            },
        }
    }
}

/// Tagged-enum discriminators; objects whose tags differ are replaced
/// rather than merged.
const TAGS: [&str; 2] = ["kind", "method"];

fn tag_differs(a: &Map<String, Value>, b: &Map<String, Value>) -> bool {
    TAGS.iter().any(|t| matches!((a.get(*t), b.get(*t)), (Some(x), Some(y)) if x != y))
}

/// Reject keys that do not exist in the defaults, naming the full path.
fn check_keys(base: &Value, user: &Value, path: &str) -> Result<(), CliError> {
    let (Value::Object(b), Value::Object(u)) = (base, user) else {
        return Ok(());
    };
    if tag_differs(b, u) {
        return Ok(());
    }
    for (k, v) in u {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match b.get(k) {
            None => return Err(CliError::config(format!("unknown key `{here}`"))),
            Some(bv) => check_keys(bv, v, &here)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) if !tag_differs(b, &u) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Read a JSON config file.
pub fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::from_io(e, format!("config file {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("config file {}: {e}", path.display())))
}

/// Scale defaults overlaid with `user`. The scale is `scale` if given,
/// else `pipeline.scale` from `user`, else desk.
pub fn resolve(user: Option<Value>, scale: Option<Scale>) -> Result<RunConfig, CliError> {
    let user = user.unwrap_or_else(|| Value::Object(Map::new()));
    let scale = match scale {
        Some(s) => s,
        None => match user.pointer("/pipeline/scale") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::config(format!("pipeline.scale: {e}")))?,
            None => Scale::Desk,
        },
    };
    let mut base = serde_json::to_value(RunConfig::for_scale(scale)).expect("defaults serialize");
    check_keys(&base, &user, "")?;
    merge(&mut base, user);
    let mut cfg: RunConfig = serde_json::from_value(base).map_err(|e| CliError::config(format!("config: {e}")))?;
    cfg.pipeline.scale = scale;
    Ok(cfg)
}

/// Defaults overlaid with the JSON file at `path`, if any.
pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
    resolve(path.map(read_file).transpose()?, None)
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    let text = serde_json::to_string_pretty(cfg).expect("config serializes") + "\n";
    fs::write(dir.join(RESOLVED_NAME), text).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}
