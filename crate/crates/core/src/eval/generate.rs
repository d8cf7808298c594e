//! Autoregressive trajectory generation.

use nalgebra::DMatrix;
use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{child_rng, ChaCha8Rng};
use crate::seqmodel::lstm::{lstm_forward_batch, lstm_next_logits};
use crate::seqmodel::{softmax, transformer_forward, Checkpoint, LstmState, ModelParams, Vocab};
use crate::trajectory::Trajectory;

const TAG_CONTEXT: u64 = 11;
const TAG_SAMPLE: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_trajectories: usize,
    /// Frames per generated trajectory, context included.
    pub length: usize,
    /// Softmax temperature; 0 selects the most likely token (lowest id on ties).
    pub temperature: f64,
    pub seed: u64,
    /// Context tokens taken from the start of a reference trajectory;
    /// defaults to the training window length.
    #[serde(default)]
    pub context: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { n_trajectories: 100, length: 10_000, temperature: 1.0, seed: 0, context: None }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return invalid("n_trajectories must be at least 1");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature must be finite and >= 0, got {}", self.temperature));
        }
        if self.context == Some(0) {
            return invalid("context must hold at least one token");
        }
        Ok(())
    }
}

/// Choose the next token from logits. The unknown token (if any) is never
/// emitted.
fn pick(logits: ArrayView1<'_, f64>, temperature: f64, unknown: Option<usize>, rng: &mut ChaCha8Rng) -> usize {
    let mut z: Array1<f64> = logits.to_owned();
    if let Some(u) = unknown {
        z[u] = f64::NEG_INFINITY;
    }
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        return best;
    }
    let p = softmax((z / temperature).view());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            last = i;
        }
        acc += pi;
        if u < acc {
            return i;
        }
    }
    last
}

/// Per-lane output state during generation.
struct Lane {
    tokens: Vec<usize>,
    frames: usize,
    rng: ChaCha8Rng,
}

fn frames_of(vocab: &Vocab, tokens: &[usize]) -> usize {
    tokens.iter().map(|&t| vocab.span(t)).sum()
}

/// Generate `cfg.n_trajectories` trajectories of `cfg.length` frames.
///
/// Trajectory `k` starts from the first `context` tokens of a reference
/// trajectory picked with a seeded draw, then samples one token at a time.
/// The LSTM threads its hidden state; the Transformer re-reads a sliding
/// window of the last `seq_len - 1` tokens.
pub fn generate(ckpt: &Checkpoint, reference: &[Trajectory], cfg: &GenerationConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let vocab = &ckpt.meta.vocab;
    let seq_len = ckpt.meta.train.seq_len;
    let ctx_len = cfg.context.unwrap_or(seq_len);
    let dt = ckpt.meta.dt;
    let encoded = reference.iter().map(|t| vocab.encode(t)).collect::<Result<Vec<_>>>()?;
    let eligible: Vec<usize> = (0..encoded.len()).filter(|&i| encoded[i].len() >= ctx_len).collect();
    if eligible.is_empty() {
        return invalid(format!("no reference trajectory has the {ctx_len} tokens needed for a context"));
    }
    let mut lanes: Vec<Lane> = (0..cfg.n_trajectories)
        .map(|k| {
            let mut pick_rng = child_rng(cfg.seed, &[TAG_CONTEXT, k as u64]);
            let src = eligible[pick_rng.random_range(0..eligible.len())];
            let tokens = encoded[src][..ctx_len].to_vec();
            Lane { frames: frames_of(vocab, &tokens), tokens, rng: child_rng(cfg.seed, &[TAG_SAMPLE, k as u64]) }
        })
        .collect();
    if lanes.iter().any(|l| l.frames > cfg.length) {
        return invalid(format!("context spans more than the requested {} frames", cfg.length));
    }
    let unknown = vocab.unknown();
    match &ckpt.params {
        ModelParams::Lstm(p) => {
            let b = lanes.len();
            let ctx = ndarray::Array2::from_shape_fn((b, ctx_len - 1), |(r, t)| lanes[r].tokens[t]);
            let mut state = LstmState::zeros(b, p.hidden());
            if ctx_len > 1 {
                state = lstm_forward_batch(p, ctx.view(), &state)?.1;
            }
            let mut feed: Vec<usize> = lanes.iter().map(|l| l.tokens[ctx_len - 1]).collect();
            while lanes.iter().any(|l| l.frames < cfg.length) {
                let logits = lstm_next_logits(p, &feed, &mut state)?;
                for (r, lane) in lanes.iter_mut().enumerate() {
                    if lane.frames >= cfg.length {
                        continue;
                    }
                    let next = pick(logits.row(r), cfg.temperature, unknown, &mut lane.rng);
                    lane.tokens.push(next);
                    lane.frames += vocab.span(next);
                    feed[r] = next;
                }
            }
        }
        ModelParams::Transformer(p) => {
            let window = seq_len.saturating_sub(1).max(1);
            let dir = p.config.directionality;
            lanes.par_iter_mut().try_for_each(|lane| -> Result<()> {
                while lane.frames < cfg.length {
                    let start = lane.tokens.len().saturating_sub(window);
                    let logits = transformer_forward(&lane.tokens[start..], p, dir)?;
                    let next = pick(logits.row(logits.nrows() - 1), cfg.temperature, unknown, &mut lane.rng);
                    lane.tokens.push(next);
                    lane.frames += vocab.span(next);
                }
                Ok(())
            })?;
        }
    }
    lanes
        .into_iter()
        .map(|lane| {
            let t = vocab.decode(&lane.tokens, dt)?;
            let mut states = t.into_states();
            states.truncate(cfg.length);
            Trajectory::new(dt, vocab.n_states(), states)
        })
        .collect()
}

/// Average predicted next-state distribution conditioned on the current
/// state, measured along `trajs` with the model's own recurrent context
/// (plain state vocabularies only). Row `i` is NaN if state `i` never occurs.
pub fn predictive_rows(ckpt: &Checkpoint, trajs: &[Trajectory]) -> Result<DMatrix<f64>> {
    let vocab = &ckpt.meta.vocab;
    if vocab.is_run_length() {
        return invalid("predictive rows need a plain state vocabulary");
    }
    let n = vocab.n_states();
    let mut sums = DMatrix::<f64>::zeros(n, n);
    let mut counts = vec![0usize; n];
    let seq_len = ckpt.meta.train.seq_len;
    for traj in trajs {
        let toks = vocab.encode(traj)?;
        match &ckpt.params {
            ModelParams::Lstm(p) => {
                let mut state = LstmState::zeros(1, p.hidden());
                for &t in &toks {
                    let logits = lstm_next_logits(p, &[t], &mut state)?;
                    let probs = softmax(logits.row(0));
                    for j in 0..n {
                        sums[(t, j)] += probs[j];
                    }
                    counts[t] += 1;
                }
            }
            ModelParams::Transformer(p) => {
                let window = seq_len.saturating_sub(1).max(1);
                for chunk in toks.chunks(window) {
                    let logits = transformer_forward(chunk, p, p.config.directionality)?;
                    for (r, &t) in chunk.iter().enumerate() {
                        let probs = softmax(logits.row(r));
                        for j in 0..n {
                            sums[(t, j)] += probs[j];
                        }
                        counts[t] += 1;
                    }
                }
            }
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        for j in 0..n {
            sums[(i, j)] = if c == 0 { f64::NAN } else { sums[(i, j)] / c as f64 };
        }
    }
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_temperature_is_argmax_lowest_on_ties() {
        let mut rng = child_rng(0, &[]);
        assert_eq!(pick(array![0.1, 2.0, 2.0, -1.0].view(), 0.0, None, &mut rng), 1);
        assert_eq!(pick(array![5.0, 2.0].view(), 0.0, Some(0), &mut rng), 1);
    }

    #[test]
    fn degenerate_distribution_is_deterministic() {
        let mut rng = child_rng(1, &[]);
        for _ in 0..100 {
            assert_eq!(pick(array![0.0, 800.0, 0.0].view(), 1.0, None, &mut rng), 1);
        }
    }
}
