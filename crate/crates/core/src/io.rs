//! Plain-text file formats.
//!
//! * Frame series: `# dt_ps=<f64> dim=<int> seed=<int>`, then one
//!   comma-separated frame per row.
//! * Trajectory: `# dt_ps=<f64> n_states=<int>`, then one state per line.
//! * Cluster model: `# metric=<id> k=<int> radius=<f64>`, then one center
//!   frame index per line.
//! * Lumping map: `# n_micro=<int> n_macro=<int>`, then one macro index per
//!   micro-state line.
//!
//! Floats are written in Rust's shortest round-trip form.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coarse_grain::LumpingMap;
use crate::discretize::{ClusterModel, MetricId};
use crate::error::{Error, Result};
use crate::trajectory::{FrameSeries, Trajectory};

fn parse_header(line: Option<&str>) -> Result<HashMap<String, String>> {
    let line = line.ok_or(Error::Parse { line: 1, msg: "missing header".into() })?;
    let body = line
        .strip_prefix('#')
        .ok_or(Error::Parse { line: 1, msg: format!("header must start with '#': {line}") })?;
    body.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or(Error::Parse { line: 1, msg: format!("bad header field '{kv}'") })
        })
        .collect()
}

fn field<T: std::str::FromStr>(h: &HashMap<String, String>, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let v = h
        .get(key)
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("header lacks '{key}'") })?;
    v.parse().map_err(|e| Error::Parse { line: 1, msg: format!("header field {key}={v}: {e}") })
}

fn body_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e| Error::Parse { line, msg: format!("'{s}': {e}") })
}

pub fn format_trajectory(t: &Trajectory) -> String {
    let mut s = format!("# dt_ps={} n_states={}\n", t.dt(), t.n_states());
    for st in t.states() {
        writeln!(s, "{st}").unwrap();
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let h = parse_header(text.lines().next())?;
    let states = body_lines(text)
        .map(|(i, l)| parse_num::<usize>(i, l))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(field(&h, "dt_ps")?, field(&h, "n_states")?, states)
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    Ok(fs::write(path, format_trajectory(t))?)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&fs::read_to_string(path)?)
}

pub fn format_frames(f: &FrameSeries) -> String {
    let mut s = format!("# dt_ps={} dim={} seed={}\n", f.dt(), f.dim(), f.seed);
    for frame in f.frames() {
        let row: Vec<String> = frame.iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn parse_frames(text: &str) -> Result<FrameSeries> {
    let h = parse_header(text.lines().next())?;
    let dim: usize = field(&h, "dim")?;
    let mut data = Vec::new();
    for (i, l) in body_lines(text) {
        let before = data.len();
        for v in l.split(',') {
            data.push(parse_num::<f64>(i, v)?);
        }
        if data.len() - before != dim {
            return Err(Error::Parse { line: i, msg: format!("expected {dim} columns") });
        }
    }
    FrameSeries::new(field(&h, "dt_ps")?, dim, data, field(&h, "seed")?)
}

pub fn write_frames(path: &Path, f: &FrameSeries) -> Result<()> {
    Ok(fs::write(path, format_frames(f))?)
}

pub fn read_frames(path: &Path) -> Result<FrameSeries> {
    parse_frames(&fs::read_to_string(path)?)
}

pub fn format_cluster_model(m: &ClusterModel) -> String {
    let mut s = format!("# metric={} k={} radius={}\n", m.metric.as_str(), m.k(), m.radius);
    for c in &m.center_indices {
        writeln!(s, "{c}").unwrap();
    }
    s
}

/// Reads a cluster model; center coordinates come from the source frames.
pub fn parse_cluster_model(text: &str, source: &FrameSeries) -> Result<ClusterModel> {
    let h = parse_header(text.lines().next())?;
    let metric = MetricId::parse(h.get("metric").map(String::as_str).unwrap_or(""))?;
    let k: usize = field(&h, "k")?;
    let idx = body_lines(text)
        .map(|(i, l)| parse_num::<usize>(i, l))
        .collect::<Result<Vec<_>>>()?;
    if idx.len() != k {
        return Err(Error::Parse { line: 1, msg: format!("header says k={k}, found {}", idx.len()) });
    }
    ClusterModel::from_indices(source, metric, idx, field(&h, "radius")?)
}

pub fn format_lumping(m: &LumpingMap) -> String {
    let mut s = format!("# n_micro={} n_macro={}\n", m.n_micro(), m.n_macro());
    for a in m.assignment() {
        writeln!(s, "{a}").unwrap();
    }
    s
}

pub fn parse_lumping(text: &str) -> Result<LumpingMap> {
    let h = parse_header(text.lines().next())?;
    let n_micro: usize = field(&h, "n_micro")?;
    let a = body_lines(text)
        .map(|(i, l)| parse_num::<usize>(i, l))
        .collect::<Result<Vec<_>>>()?;
    if a.len() != n_micro {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header says n_micro={n_micro}, found {}", a.len()),
        });
    }
    LumpingMap::new(field(&h, "n_macro")?, a)
}

fn write_numbered<T>(
    dir: &Path,
    items: &[T],
    prefix: &str,
    ext: &str,
    write: impl Fn(&Path, &T) -> Result<()>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    items
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let p = dir.join(format!("{prefix}{i:04}{ext}"));
            write(&p, t)?;
            Ok(p)
        })
        .collect()
}

fn read_numbered<T>(dir: &Path, prefix: &str, ext: &str, read: impl Fn(&Path) -> Result<T>) -> Result<Vec<T>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(ext))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!("no {prefix}*{ext} files in {}", dir.display())));
    }
    paths.iter().map(|p| read(p)).collect()
}

/// Writes `traj_0000.txt`, `traj_0001.txt`, ... into `dir`.
pub fn write_trajectory_dir(dir: &Path, trajs: &[Trajectory]) -> Result<Vec<PathBuf>> {
    write_numbered(dir, trajs, "traj_", ".txt", write_trajectory)
}

/// Reads every `traj_*.txt` in `dir`, sorted by name.
pub fn read_trajectory_dir(dir: &Path) -> Result<Vec<Trajectory>> {
    read_numbered(dir, "traj_", ".txt", read_trajectory)
}

/// Writes `frames_0000.csv`, ... into `dir`.
pub fn write_frames_dir(dir: &Path, series: &[FrameSeries]) -> Result<Vec<PathBuf>> {
    write_numbered(dir, series, "frames_", ".csv", write_frames)
}

pub fn read_frames_dir(dir: &Path) -> Result<Vec<FrameSeries>> {
    read_numbered(dir, "frames_", ".csv", read_frames)
}
