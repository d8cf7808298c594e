//! Command-line front end: `simulate`, `discretize`, `coarsegrain`,
//! `train`, `generate`, `evaluate` and the one-shot `pipeline`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod stages;

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use slowdyn::discretize::BinningSpec;
use slowdyn::seqmodel::transformer::Directionality;
use slowdyn::seqmodel::{BatchMode, ModelConfig};

use config::{DiscretizeConfig, ModelKind, Order, Preset, RunConfig, Scale, Source};
use error::{CliError, CliResult, ErrorKind};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SLOWDYN_OUTPUT_ROOT";
pub const LOCK_NAME: &str = ".lock";

#[derive(Parser, Debug)]
#[command(name = "slowdyn", version, about = "Learn discrete stochastic dynamics with sequence models and check the slow kinetics")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; unspecified values take the scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: $SLOWDYN_OUTPUT_ROOT/<command> or runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets the global seed and every stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size preset for data, models and budgets.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample ground-truth trajectories.
    Simulate {
        #[arg(long)]
        n_trajectories: Option<usize>,
        /// Langevin steps, or frames for chain sources.
        #[arg(long)]
        n_steps: Option<usize>,
    },
    /// Turn frames into state trajectories.
    Discretize {
        /// Directory of frames_*.csv (or a simulate output).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<DiscretizePreset>,
        /// Number of k-center clusters.
        #[arg(long)]
        k: Option<usize>,
        /// Coordinate binned by the torsion method.
        #[arg(long)]
        column: Option<usize>,
    },
    /// Subsample, lump and remove recrossings.
    Coarsegrain {
        /// Directory of traj_*.txt (or a previous stage output).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        subsample: Option<usize>,
        /// Number of PCCA+ macro-states.
        #[arg(long)]
        lump: Option<usize>,
        /// Minimum dwell (frames) of the recrossing filter.
        #[arg(long)]
        min_dwell: Option<usize>,
        #[arg(long, value_enum)]
        order: Option<OrderArg>,
        /// Lag (frames) of the model used for lumping.
        #[arg(long)]
        lag: Option<usize>,
    },
    /// Fit a sequence model.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Replace the training block with this architecture's preset at the current scale.
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        batch_mode: Option<BatchModeArg>,
        #[arg(long, value_enum)]
        directionality: Option<DirectionalityArg>,
        /// Train on run-length tokens with this run cap.
        #[arg(long)]
        run_length: Option<usize>,
        /// Continue from a checkpoint; only epochs and max steps are taken from this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample trajectories from a trained model.
    Generate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trajectories that supply the starting contexts.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        n_trajectories: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Compare a generated ensemble against a reference.
    Evaluate {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Checkpoint to record in the report provenance.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// ITS lags in frames, comma separated.
        #[arg(long, value_delimiter = ',')]
        lags: Option<Vec<usize>>,
        #[arg(long)]
        n_boot: Option<usize>,
    },
    /// Run the whole ablation matrix.
    Pipeline {
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Only these cells, comma separated.
        #[arg(long, value_delimiter = ',')]
        cells: Option<Vec<String>>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DiscretizePreset {
    /// k-center with 100 clusters.
    Kcenter100,
    /// 20 uniform bins of one angle column.
    Torsion20,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OrderArg {
    LumpFirst,
    RecrossFirst,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BatchModeArg {
    Stateful,
    Stateless,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionalityArg {
    Uni,
    Bi,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Discretize { .. } => "discretize",
            Command::Coarsegrain { .. } => "coarsegrain",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Pipeline { .. } => "pipeline",
        }
    }
}

/// Holds `<dir>/.lock` for the lifetime of a run.
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<OutputLock> {
        fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(OutputLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                ErrorKind::Locked,
                format!("{} is in use by another run (remove {} if it is stale)", dir.display(), path.display()),
            )),
            Err(e) => Err(CliError::runtime(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn set_if<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn require(p: &Option<PathBuf>, flag: &str, cmd: &str) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| CliError::new(ErrorKind::Usage, format!("{cmd} needs --{flag} (or paths.{flag} in the config)")))
}

/// Apply command-line values over the merged configuration.
fn apply_flags(cfg: &mut RunConfig, g: &GlobalArgs, cmd: &Command) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.pipeline.transformer.seed = s;
        cfg.generate.seed = s;
        cfg.pipeline.transformer_generate.seed = s;
        cfg.evaluate.seed = s;
    }
    set_if(&mut cfg.paths.out, g.out.clone().map(Some));
    let scale = cfg.pipeline.scale;
    match cmd {
        Command::Simulate { n_trajectories, n_steps } => {
            set_if(&mut cfg.simulate.n_trajectories, *n_trajectories);
            if let Some(n) = *n_steps {
                match &mut cfg.simulate.source {
                    Source::DoubleWell { n_steps, .. } => *n_steps = n,
                    Source::Jitter { length, .. } | Source::Chain { length, .. } => *length = n,
                }
            }
        }
        Command::Discretize { input, preset, k, column } => {
            set_if(&mut cfg.paths.input, input.clone().map(Some));
            match preset {
                Some(DiscretizePreset::Kcenter100) => {
                    let metric = match cfg.discretize {
                        DiscretizeConfig::KCenter { metric, .. } => metric,
                        _ => slowdyn::discretize::MetricId::Euclidean,
                    };
                    cfg.discretize = DiscretizeConfig::KCenter { k: 100, metric, stride: 10 };
                }
                Some(DiscretizePreset::Torsion20) => {
                    cfg.discretize = DiscretizeConfig::Torsion { column: 0, bins: BinningSpec::default() };
                }
                None => {}
            }
            match &mut cfg.discretize {
                DiscretizeConfig::KCenter { k: kk, .. } => {
                    set_if(kk, *k);
                    if column.is_some() {
                        return Err(CliError::new(ErrorKind::Usage, "--column applies to the torsion method"));
                    }
                }
                DiscretizeConfig::Torsion { column: c, .. } => {
                    set_if(c, *column);
                    if k.is_some() {
                        return Err(CliError::new(ErrorKind::Usage, "--k applies to the k-center method"));
                    }
                }
            }
        }
        Command::Coarsegrain { input, subsample, lump, min_dwell, order, lag } => {
            set_if(&mut cfg.paths.input, input.clone().map(Some));
            let c = &mut cfg.coarsegrain;
            set_if(&mut c.subsample, *subsample);
            set_if(&mut c.lump, lump.map(Some));
            set_if(&mut c.min_dwell, min_dwell.map(Some));
            set_if(&mut c.lag, *lag);
            set_if(
                &mut c.order,
                order.map(|o| match o {
                    OrderArg::LumpFirst => Order::LumpFirst,
                    OrderArg::RecrossFirst => Order::RecrossFirst,
                }),
            );
        }
        Command::Train { input, model, epochs, max_steps, batch_mode, directionality, run_length, resume } => {
            set_if(&mut cfg.paths.input, input.clone().map(Some));
            set_if(&mut cfg.paths.checkpoint, resume.clone().map(Some));
            if let Some(m) = model {
                let seed = cfg.train.seed;
                cfg.train = scale.train(*m);
                cfg.train.seed = seed;
            }
            let t = &mut cfg.train;
            set_if(&mut t.epochs, *epochs);
            set_if(&mut t.max_steps, max_steps.map(Some));
            set_if(&mut t.run_length, run_length.map(Some));
            set_if(
                &mut t.batch_mode,
                batch_mode.map(|b| match b {
                    BatchModeArg::Stateful => BatchMode::Stateful,
                    BatchModeArg::Stateless => BatchMode::Stateless,
                }),
            );
            if let Some(d) = directionality {
                let ModelConfig::Transformer(tc) = &mut t.model else {
                    return Err(CliError::new(ErrorKind::Usage, "--directionality applies to the transformer"));
                };
                tc.directionality = match d {
                    DirectionalityArg::Uni => Directionality::Unidirectional,
                    DirectionalityArg::Bi => Directionality::Bidirectional,
                };
            }
        }
        Command::Generate { checkpoint, reference, n_trajectories, length, temperature } => {
            set_if(&mut cfg.paths.checkpoint, checkpoint.clone().map(Some));
            set_if(&mut cfg.paths.reference, reference.clone().map(Some));
            let gc = &mut cfg.generate;
            set_if(&mut gc.n_trajectories, *n_trajectories);
            set_if(&mut gc.length, *length);
            set_if(&mut gc.temperature, *temperature);
        }
        Command::Evaluate { reference, generated, checkpoint, lags, n_boot } => {
            set_if(&mut cfg.paths.reference, reference.clone().map(Some));
            set_if(&mut cfg.paths.generated, generated.clone().map(Some));
            set_if(&mut cfg.paths.checkpoint, checkpoint.clone().map(Some));
            set_if(&mut cfg.evaluate.lags, lags.clone());
            set_if(&mut cfg.evaluate.n_boot, *n_boot);
        }
        Command::Pipeline { preset, cells } => {
            set_if(&mut cfg.pipeline.preset, *preset);
            set_if(&mut cfg.pipeline.cells, cells.clone().map(Some));
        }
    }
    Ok(())
}

fn default_out(cmd: &str) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(cmd),
        _ => PathBuf::from("runs").join(cmd),
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    let user = cli.global.config.as_deref().map(config::read_file).transpose()?;
    let mut cfg = config::resolve(user, cli.global.scale)?;
    apply_flags(&mut cfg, &cli.global, &cli.command)?;
    let name = cli.command.name();
    let out = cfg.paths.out.clone().unwrap_or_else(|| default_out(name));
    cfg.paths.out = Some(out.clone());
    let _lock = OutputLock::acquire(&out)?;
    log::info!("{name}: writing to {}", out.display());
    if !matches!(cli.command, Command::Pipeline { .. }) {
        config::write_resolved(&out, &cfg)?;
    }
    match &cli.command {
        Command::Simulate { .. } => {
            stages::simulate(&cfg.simulate, cfg.seed, &out)?;
        }
        Command::Discretize { .. } => {
            let input = require(&cfg.paths.input, "input", name)?;
            let frames = stages::read_frames(&input)?;
            stages::discretize(&cfg.discretize, &frames, cfg.seed, &out)?;
        }
        Command::Coarsegrain { .. } => {
            let input = require(&cfg.paths.input, "input", name)?;
            let trajs = stages::read_trajectories(&input)?;
            stages::coarsegrain(&cfg.coarsegrain, &trajs, &out)?;
        }
        Command::Train { .. } => {
            let input = require(&cfg.paths.input, "input", name)?;
            let trajs = stages::read_trajectories(&input)?;
            stages::train(&cfg.train, &trajs, cfg.paths.checkpoint.as_deref(), &out)?;
        }
        Command::Generate { .. } => {
            let ckpt = stages::load_checkpoint(&require(&cfg.paths.checkpoint, "checkpoint", name)?)?;
            let reference = stages::read_trajectories(&require(&cfg.paths.reference, "reference", name)?)?;
            stages::generate_stage(&cfg.generate, &ckpt, &reference, &out)?;
        }
        Command::Evaluate { .. } => {
            let reference = stages::read_trajectories(&require(&cfg.paths.reference, "reference", name)?)?;
            let generated = stages::read_trajectories(&require(&cfg.paths.generated, "generated", name)?)?;
            let ckpt = cfg.paths.checkpoint.as_deref().map(stages::load_checkpoint).transpose()?;
            stages::evaluate(&cfg.evaluate, &reference, &generated, ckpt.as_ref(), serde_json::Value::Null, &out)?;
        }
        Command::Pipeline { .. } => pipeline::run(&cfg, &out)?,
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).try_init();
}

/// Parse `argv` (program name first), run, and return the exit code.
/// Failures print one JSON line `{"error": {"kind", "message"}}` to stderr;
/// usage errors print clap's text instead.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.global.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
