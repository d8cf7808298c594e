//! Generation from trained models and reference-vs-generated comparison.

pub mod bootstrap;
pub mod generate;
pub mod report;
pub mod svg;

pub use bootstrap::{bootstrap_metric, BootstrapStats, DEFAULT_N_BOOT};
pub use generate::{generate, predictive_rows, GenerationConfig};
pub use report::{build_report, read_report, write_report, EnsembleSummary, EvalReport, ReportConfig, Stat};
