//! Splitting token streams into training batches.
//!
//! Every sequence is cut into non-overlapping chunks of `seq_len` tokens (a
//! trailing remainder is dropped). In stateful mode the chunk list, in
//! sequence order, is divided into `batch_size` contiguous lanes of
//! `n = chunks / batch_size` chunks each; batch `s` holds chunk `s` of every
//! lane, so row `b` of consecutive batches continues the same stream and the
//! recurrent state can be carried across batches. A lane's state is reset
//! where its next chunk starts a new sequence. Stateless mode draws `n`
//! batches of independent random windows with the state reset every batch.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Stateful,
    Stateless,
}

/// `tokens` is batch x seq_len. `reset[b]` asks for a zero initial state in
/// lane `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Array2<usize>,
    pub reset: Vec<bool>,
}

/// Location of one chunk: (sequence index, start offset).
type Chunk = (usize, usize);

fn chunks(seqs: &[Vec<usize>], seq_len: usize) -> Vec<Chunk> {
    seqs.iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.len() / seq_len).map(move |k| (i, k * seq_len)))
        .collect()
}

/// Number of batches one pass over `seqs` yields (identical in both modes).
pub fn batches_per_epoch(seqs: &[Vec<usize>], seq_len: usize, batch_size: usize) -> usize {
    if seq_len == 0 || batch_size == 0 {
        return 0;
    }
    chunks(seqs, seq_len).len() / batch_size
}

/// Build one epoch of batches. `seed` only affects stateless mode.
pub fn make_stateful_batches(
    seqs: &[Vec<usize>],
    seq_len: usize,
    batch_size: usize,
    mode: BatchMode,
    seed: u64,
) -> Result<Vec<Batch>> {
    if seq_len < 2 || batch_size == 0 {
        return Err(Error::InvalidInput(format!(
            "seq_len must be >= 2 and batch_size >= 1 (got {seq_len}, {batch_size})"
        )));
    }
    let all = chunks(seqs, seq_len);
    let n = all.len() / batch_size;
    if n == 0 {
        return Err(Error::InsufficientData(format!(
            "{} chunks of {seq_len} tokens available; one batch needs {batch_size}, i.e. at least {} tokens split into whole chunks",
            all.len(),
            batch_size * seq_len
        )));
    }
    let mut out = Vec::with_capacity(n);
    match mode {
        BatchMode::Stateful => {
            for s in 0..n {
                let mut tokens = Array2::zeros((batch_size, seq_len));
                let mut reset = vec![false; batch_size];
                for b in 0..batch_size {
                    let k = b * n + s;
                    let (seq, start) = all[k];
                    tokens.row_mut(b).iter_mut().zip(&seqs[seq][start..start + seq_len]).for_each(|(d, &v)| *d = v);
                    reset[b] = s == 0 || all[k - 1].0 != seq;
                }
                out.push(Batch { tokens, reset });
            }
        }
        BatchMode::Stateless => {
            let starts: Vec<usize> = seqs.iter().map(|s| (s.len() + 1).saturating_sub(seq_len)).collect();
            let total: usize = starts.iter().sum();
            let mut rng = rng_from_seed(seed);
            for _ in 0..n {
                let mut tokens = Array2::zeros((batch_size, seq_len));
                for b in 0..batch_size {
                    let mut r = rng.random_range(0..total);
                    let seq = starts
                        .iter()
                        .position(|&c| {
                            if r < c {
                                true
                            } else {
                                r -= c;
                                false
                            }
                        })
                        .expect("r < total");
                    tokens.row_mut(b).iter_mut().zip(&seqs[seq][r..r + seq_len]).for_each(|(d, &v)| *d = v);
                }
                out.push(Batch { tokens, reset: vec![true; batch_size] });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_201_gives_two_batches() {
        let seq: Vec<usize> = (0..201).collect();
        let b = make_stateful_batches(&[seq], 100, 1, BatchMode::Stateful, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].tokens[[0, 0]], 0);
        assert_eq!(b[1].tokens[[0, 99]], 199);
        assert_eq!(b[0].reset, vec![true]);
        assert_eq!(b[1].reset, vec![false]);
    }

    #[test]
    fn lanes_are_contiguous_and_reset_at_boundaries() {
        let seqs: Vec<Vec<usize>> = (0..3).map(|i| (0..47).map(|k| i * 1000 + k).collect()).collect();
        let b = make_stateful_batches(&seqs, 5, 4, BatchMode::Stateful, 0).unwrap();
        // 3 * 9 = 27 chunks, 4 lanes -> 6 steps
        assert_eq!(b.len(), 6);
        for lane in 0..4 {
            let mut prev: Option<usize> = None;
            for batch in &b {
                let row = batch.tokens.row(lane);
                assert!(row.windows(2).into_iter().all(|w| w[1] == w[0] + 1));
                if let (Some(p), false) = (prev, batch.reset[lane]) {
                    assert_eq!(row[0], p + 1);
                }
                prev = Some(row[4]);
            }
        }
    }

    #[test]
    fn insufficient_data_names_minimum() {
        let e = make_stateful_batches(&[vec![0; 150]], 100, 2, BatchMode::Stateful, 0).unwrap_err();
        assert!(e.to_string().contains("200"));
    }

    #[test]
    fn stateless_is_reproducible_and_count_matches() {
        let seqs = vec![(0..500).collect::<Vec<usize>>(), (1000..1300).collect()];
        let a = make_stateful_batches(&seqs, 20, 8, BatchMode::Stateless, 42).unwrap();
        let b = make_stateful_batches(&seqs, 20, 8, BatchMode::Stateless, 42).unwrap();
        let c = make_stateful_batches(&seqs, 20, 8, BatchMode::Stateless, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), batches_per_epoch(&seqs, 20, 8));
        for batch in &a {
            for row in batch.tokens.rows() {
                assert!(row.windows(2).into_iter().all(|w| w[1] == w[0] + 1));
            }
        }
    }
}
