//! Side-by-side kinetic and thermodynamic comparison of two ensembles.
//!
//! Both ensembles go through the same estimators and the same bootstrap.
//! The bootstrap seed of an ensemble is derived from the report seed and the
//! ensemble's content hash, so swapping reference and generated swaps the
//! two summaries and changes nothing else.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::bootstrap::{bootstrap_metric, DEFAULT_N_BOOT};
use super::svg::{bar_plot, line_plot, Series};
use crate::error::{invalid, Result};
use crate::msm::{count_transitions, free_energy_from_histogram, implied_timescales, mfpt, populations, transition_matrix};
use crate::rng::derive_seed;
use crate::seqmodel::checkpoint::sha256_hex;
use crate::trajectory::Trajectory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// ITS lags in frames.
    pub lags: Vec<usize>,
    pub k_its: usize,
    /// Lag (frames) of the transition matrix used for MFPTs.
    pub mfpt_lag: usize,
    pub n_boot: usize,
    pub reversible: bool,
    pub seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { lags: vec![1, 2, 5, 10, 20, 50], k_its: 3, mfpt_lag: 1, n_boot: DEFAULT_N_BOOT, reversible: false, seed: 0 }
    }
}

/// JSON has no infinities; non-finite values are written as the strings
/// "inf", "-inf" and "nan".
mod num {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(v) => Ok(v),
            Raw::S(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// A statistic: full-ensemble estimate plus bootstrap mean and std.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "num")]
    pub value: f64,
    #[serde(with = "num")]
    pub mean: f64,
    #[serde(with = "num")]
    pub std: f64,
}

impl PartialEq for Stat {
    fn eq(&self, o: &Self) -> bool {
        let same = |a: f64, b: f64| a == b || (a.is_nan() && b.is_nan());
        same(self.value, o.value) && same(self.mean, o.mean) && same(self.std, o.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_trajectories: usize,
    pub n_frames: usize,
    pub content_hash: String,
    pub bootstrap_seed: u64,
    pub n_boot_ok: usize,
    pub n_boot_failed: usize,
    /// Per state, `-ln(population)`.
    pub free_energy: Vec<Stat>,
    /// `its[l][i]`: timescale `i + 1` (ps) at lag `l`.
    pub its: Vec<Vec<Stat>>,
    /// `mfpt[i][j]` (ps); `inf` where `j` is never reached, `nan` where `i`
    /// is not in the estimated model.
    pub mfpt: Vec<Vec<Stat>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_states: usize,
    pub dt: f64,
    pub config: ReportConfig,
    pub lag_ps: Vec<f64>,
    pub mfpt_lag_ps: f64,
    pub reference: EnsembleSummary,
    pub generated: EnsembleSummary,
    /// Free-form provenance (checkpoint hash, configs).
    pub provenance: serde_json::Value,
}

impl EvalReport {
    /// The report with the two ensembles exchanged.
    pub fn swapped(&self) -> EvalReport {
        EvalReport { reference: self.generated.clone(), generated: self.reference.clone(), ..self.clone() }
    }
}

pub fn ensemble_hash(trajs: &[Trajectory]) -> String {
    let mut bytes = Vec::new();
    for t in trajs {
        bytes.extend_from_slice(&t.dt().to_le_bytes());
        bytes.extend_from_slice(&(t.n_states() as u64).to_le_bytes());
        bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for &s in t.states() {
            bytes.extend_from_slice(&(s as u32).to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// MFPT matrix (ps) over the full alphabet at `lag` frames.
pub fn mfpt_full(trajs: &[Trajectory], lag: usize, reversible: bool) -> Result<Vec<f64>> {
    let n = trajs.first().map_or(0, |t| t.n_states());
    let model = transition_matrix(&count_transitions(trajs, lag)?, reversible)?;
    let m = mfpt(&model)?;
    let mut out = vec![f64::NAN; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = match (model.local_index(i), model.local_index(j)) {
                _ if i == j => 0.0,
                (Some(a), Some(b)) => m.times[(a, b)],
                (Some(_), None) => f64::INFINITY,
                (None, _) => f64::NAN,
            };
        }
    }
    Ok(out)
}

/// The flattened metric vector: free energies, ITS (lag-major), MFPTs.
fn metric_vector(trajs: &[Trajectory], cfg: &ReportConfig) -> Result<Vec<f64>> {
    let mut v = free_energy_from_histogram(&populations(trajs));
    let its = implied_timescales(trajs, &cfg.lags, cfg.k_its, cfg.reversible)?;
    for row in &its.its {
        v.extend(row.iter().map(|t| t.as_f64()));
    }
    v.extend(mfpt_full(trajs, cfg.mfpt_lag, cfg.reversible)?);
    Ok(v)
}

fn summarize_ensemble(trajs: &[Trajectory], cfg: &ReportConfig) -> Result<EnsembleSummary> {
    let n = trajs[0].n_states();
    let hash = ensemble_hash(trajs);
    let tag = u64::from_str_radix(&hash[..16], 16).expect("hex digest");
    let seed = derive_seed(cfg.seed, &[tag]);
    let point = metric_vector(trajs, cfg)?;
    let boot = bootstrap_metric(trajs, |t| metric_vector(t, cfg), cfg.n_boot, seed)?;
    let stat = |k: usize| Stat {
        value: point[k],
        mean: boot.mean.get(k).copied().unwrap_or(f64::NAN),
        std: boot.std.get(k).copied().unwrap_or(f64::NAN),
    };
    let k = cfg.k_its;
    let its_off = n;
    let mfpt_off = n + cfg.lags.len() * k;
    Ok(EnsembleSummary {
        n_trajectories: trajs.len(),
        n_frames: trajs.iter().map(Trajectory::len).sum(),
        content_hash: hash,
        bootstrap_seed: seed,
        n_boot_ok: boot.n_ok,
        n_boot_failed: boot.n_failed,
        free_energy: (0..n).map(stat).collect(),
        its: (0..cfg.lags.len()).map(|l| (0..k).map(|i| stat(its_off + l * k + i)).collect()).collect(),
        mfpt: (0..n).map(|i| (0..n).map(|j| stat(mfpt_off + i * n + j)).collect()).collect(),
    })
}

/// Compare two ensembles with identical estimators, lags and bootstrap.
pub fn build_report(
    reference: &[Trajectory],
    generated: &[Trajectory],
    cfg: &ReportConfig,
    provenance: serde_json::Value,
) -> Result<EvalReport> {
    let (Some(r0), Some(g0)) = (reference.first(), generated.first()) else {
        return invalid("both ensembles must be non-empty");
    };
    let n = r0.n_states();
    let dt = r0.dt();
    if reference.iter().chain(generated).any(|t| t.n_states() != n) {
        return invalid("reference and generated ensembles use different alphabets");
    }
    if reference.iter().chain(generated).any(|t| t.dt() != dt) {
        return invalid(format!("reference and generated ensembles disagree on dt ({dt} vs {})", g0.dt()));
    }
    if cfg.lags.is_empty() || cfg.lags.contains(&0) || cfg.mfpt_lag == 0 {
        return invalid("lags must be non-empty and positive");
    }
    Ok(EvalReport {
        n_states: n,
        dt,
        config: cfg.clone(),
        lag_ps: cfg.lags.iter().map(|&l| l as f64 * dt).collect(),
        mfpt_lag_ps: cfg.mfpt_lag as f64 * dt,
        reference: summarize_ensemble(reference, cfg)?,
        generated: summarize_ensemble(generated, cfg)?,
        provenance,
    })
}

pub fn free_energy_csv(r: &EvalReport) -> String {
    let mut s = String::from("state,reference,reference_std,generated,generated_std\n");
    for i in 0..r.n_states {
        let (a, b) = (&r.reference.free_energy[i], &r.generated.free_energy[i]);
        writeln!(s, "{i},{},{},{},{}", a.value, a.std, b.value, b.std).unwrap();
    }
    s
}

pub fn its_csv(r: &EvalReport) -> String {
    let k = r.config.k_its;
    let mut s = String::from("ensemble,lag_ps");
    for i in 1..=k {
        write!(s, ",its_{i}").unwrap();
    }
    for i in 1..=k {
        write!(s, ",its_{i}_std").unwrap();
    }
    s.push('\n');
    for (name, e) in [("reference", &r.reference), ("generated", &r.generated)] {
        for (l, row) in e.its.iter().enumerate() {
            write!(s, "{name},{}", r.lag_ps[l]).unwrap();
            for st in row {
                write!(s, ",{}", st.value).unwrap();
            }
            for st in row {
                write!(s, ",{}", st.std).unwrap();
            }
            s.push('\n');
        }
    }
    s
}

pub fn mfpt_csv(r: &EvalReport) -> String {
    let mut s = String::from("ensemble,from_state,to_state,mfpt_ps,std\n");
    for (name, e) in [("reference", &r.reference), ("generated", &r.generated)] {
        for (i, row) in e.mfpt.iter().enumerate() {
            for (j, st) in row.iter().enumerate() {
                if i != j {
                    writeln!(s, "{name},{i},{j},{},{}", st.value, st.std).unwrap();
                }
            }
        }
    }
    s
}

/// Write `report.json`, the three CSV tables and `plots/*.svg` into `dir`.
pub fn write_report(dir: &Path, r: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir.join("plots"))?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)? + "\n")?;
    fs::write(dir.join("free_energy.csv"), free_energy_csv(r))?;
    fs::write(dir.join("its.csv"), its_csv(r))?;
    fs::write(dir.join("mfpt.csv"), mfpt_csv(r))?;
    for i in 0..r.config.k_its {
        let series = |name: &'static str, e: &EnsembleSummary| Series {
            name,
            points: r.lag_ps.iter().zip(&e.its).map(|(&x, row)| (x, row[i].value)).collect(),
            err: e.its.iter().map(|row| row[i].std).collect(),
        };
        let svg = line_plot(
            &format!("Implied timescale {}", i + 1),
            "lag (ps)",
            "ITS (ps)",
            &[series("reference", &r.reference), series("generated", &r.generated)],
        );
        fs::write(dir.join("plots").join(format!("its_{}.svg", i + 1)), svg)?;
    }
    let fe = |e: &EnsembleSummary| e.free_energy.iter().map(|s| s.value).collect::<Vec<_>>();
    let svg = bar_plot(
        "Free energy per state",
        "state",
        "-ln(population)",
        &[("reference", fe(&r.reference)), ("generated", fe(&r.generated))],
    );
    fs::write(dir.join("plots").join("free_energy.svg"), svg)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?)
}
