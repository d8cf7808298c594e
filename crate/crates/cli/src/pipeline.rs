//! The ablation matrix: shared simulated data, then one independent
//! coarse-grain / train / generate / evaluate chain per cell.
//!
//! Layout under the output directory:
//!
//! ```text
//! resolved_config.json
//! data/            simulated frames or states, micro-state trajectories
//! cells/<name>/    data/, model.ckpt, history.csv, generated/, report/,
//!                  resolved_config.json
//! summary.csv
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;
use slowdyn::seqmodel::transformer::Directionality;
use slowdyn::seqmodel::{BatchMode, ModelConfig};

use crate::config::{write_resolved, CoarseGrainConfig, Order, RunConfig};
use crate::error::{CliError, CliResult};
use crate::stages::{self, Simulated};

/// One cell of the matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub name: &'static str,
    pub subsample: usize,
    pub lump: bool,
    pub recross: bool,
    pub transformer: Option<Directionality>,
    pub stateless: bool,
    pub run_length: bool,
}

const fn lstm(name: &'static str, subsample: usize, lump: bool, recross: bool) -> Cell {
    Cell { name, subsample, lump, recross, transformer: None, stateless: false, run_length: false }
}

pub const CELLS: [Cell; 9] = [
    lstm("lstm-m1", 1, false, false),
    lstm("lstm-m10", 10, false, false),
    lstm("lstm-m1-lumped", 1, true, false),
    lstm("lstm-m1-recross", 1, false, true),
    lstm("lstm-m1-lumped-recross", 1, true, true),
    Cell { stateless: true, ..lstm("lstm-m1-stateless", 1, false, false) },
    Cell { run_length: true, ..lstm("lstm-m1-lumped-runlength", 1, true, false) },
    Cell { transformer: Some(Directionality::Unidirectional), ..lstm("transformer-uni-m10", 10, false, false) },
    Cell { transformer: Some(Directionality::Bidirectional), ..lstm("transformer-bi-m10", 10, false, false) },
];

/// Cells selected by `pipeline.cells`, in matrix order.
pub fn selected_cells(cfg: &RunConfig) -> CliResult<Vec<Cell>> {
    let Some(names) = &cfg.pipeline.cells else {
        return Ok(CELLS.to_vec());
    };
    if let Some(bad) = names.iter().find(|n| !CELLS.iter().any(|c| c.name == n.as_str())) {
        let known: Vec<&str> = CELLS.iter().map(|c| c.name).collect();
        return Err(CliError::config(format!("pipeline.cells: unknown cell `{bad}` (known: {})", known.join(", "))));
    }
    Ok(CELLS.iter().filter(|c| names.iter().any(|n| n == c.name)).copied().collect())
}

/// The configuration a cell runs with. It is itself a pipeline config
/// restricted to that cell, so re-running it rebuilds the shared data and
/// this cell in place.
pub fn cell_config(base: &RunConfig, cell: &Cell) -> RunConfig {
    let p = &base.pipeline;
    let mut cfg = base.clone();
    cfg.coarsegrain = CoarseGrainConfig {
        subsample: cell.subsample,
        lump: cell.lump.then_some(p.n_macro),
        min_dwell: cell.recross.then_some(p.min_dwell),
        order: Order::LumpFirst,
        ..base.coarsegrain.clone()
    };
    if let Some(dir) = cell.transformer {
        cfg.train = p.transformer.clone();
        if let ModelConfig::Transformer(t) = &mut cfg.train.model {
            t.directionality = dir;
        }
        cfg.generate = p.transformer_generate.clone();
    }
    if cell.stateless {
        cfg.train.batch_mode = BatchMode::Stateless;
    }
    if cell.run_length {
        // composite-token sequences are tens of times shorter than the data
        cfg.train.seq_len = cfg.train.seq_len.min(20);
        cfg.train.batch_size = cfg.train.batch_size.min(16);
        cfg.train.run_length = Some(p.run_length_cap);
        // a window of composite tokens spans far more frames than a
        // generated trajectory holds; the recurrent state carries context
        cfg.generate.context = Some(1);
    }
    cfg.pipeline.cells = Some(vec![cell.name.to_string()]);
    cfg
}

fn summary_row(s: &mut String, name: &str, r: &slowdyn::eval::EvalReport, val_loss: Option<f64>) {
    let its = |e: &slowdyn::eval::EnsembleSummary| e.its.first().and_then(|row| row.first()).map_or(f64::NAN, |s| s.value);
    let (a, b) = (its(&r.reference), its(&r.generated));
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    writeln!(s, "{name},{},{},{a},{b},{},{}", r.n_states, r.dt, (b - a) / a, fmt(val_loss)).unwrap();
}

pub fn run(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let cells = selected_cells(cfg)?;
    write_resolved(out, cfg)?;
    let data = out.join("data");
    log::info!("simulating into {}", data.display());
    let micro = match stages::simulate(&cfg.simulate, cfg.seed, &data)? {
        Simulated::Frames(frames) => stages::discretize(&cfg.discretize, &frames, cfg.seed, &data)?,
        Simulated::States(trajs) => trajs,
    };
    let mut summary = String::from("cell,n_states,dt_ps,reference_its1,generated_its1,its1_rel_error,final_val_loss\n");
    for cell in &cells {
        let cc = cell_config(cfg, cell);
        let dir = out.join("cells").join(cell.name);
        log::info!("cell {}", cell.name);
        write_resolved(&dir, &cc)?;
        let (trajs, _) = stages::coarsegrain(&cc.coarsegrain, &micro, &dir.join("data"))?;
        let ckpt = stages::train(&cc.train, &trajs, None, &dir)?;
        let gen = stages::generate_stage(&cc.generate, &ckpt, &trajs, &dir.join("generated"))?;
        let extra = json!({ "cell": cell.name, "coarsegrain": cc.coarsegrain, "generate": cc.generate });
        let report = stages::evaluate(&cc.evaluate, &trajs, &gen, Some(&ckpt), extra, &dir.join("report"))?;
        let val = ckpt.meta.history.last().and_then(|h| h.val_loss);
        summary_row(&mut summary, cell.name, &report, val);
    }
    fs::write(out.join("summary.csv"), summary).map_err(|e| CliError::runtime(format!("writing summary: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_names_are_unique() {
        let mut names: Vec<_> = CELLS.iter().map(|c| c.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CELLS.len());
    }

    #[test]
    fn unknown_cell_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.cells = Some(vec!["lstm-m7".into()]);
        let e = selected_cells(&cfg).unwrap_err();
        assert!(e.message.contains("lstm-m7"));
    }

    #[test]
    fn transformer_cells_take_the_transformer_block() {
        let cfg = RunConfig::default();
        let cell = CELLS.iter().find(|c| c.name == "transformer-bi-m10").unwrap();
        let cc = cell_config(&cfg, cell);
        assert_eq!(cc.generate, cfg.pipeline.transformer_generate);
        let ModelConfig::Transformer(t) = &cc.train.model else { panic!("expected a transformer") };
        assert_eq!(t.directionality, Directionality::Bidirectional);
        assert_eq!(cc.coarsegrain.subsample, 10);
    }

    #[test]
    fn cell_config_is_idempotent() {
        let cfg = RunConfig::default();
        for cell in &CELLS {
            let once = cell_config(&cfg, cell);
            assert_eq!(cell_config(&once, cell), once, "{}", cell.name);
        }
    }
}
