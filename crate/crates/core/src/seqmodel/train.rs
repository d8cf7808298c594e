//! Training loop.
//!
//! Every random choice is derived from the base seed and a counter: epoch
//! `e` draws its stateless windows from `derive_seed(seed, [EPOCH, e])` and
//! optimizer step `s` its dropout masks from `derive_seed(seed, [DROPOUT, s])`.
//! A checkpoint therefore only needs the counters to resume bit-identically.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::batch::{make_stateful_batches, Batch, BatchMode};
use super::checkpoint::{sha256_hex, Checkpoint, CheckpointMeta};
use super::lstm::{LstmConfig, LstmState};
use super::optim::{Adam, LrSchedule};
use super::transformer::TransformerConfig;
use super::{Model, ModelConfig, ParamTensors, Vocab};
use crate::error::{invalid, Error, Result};
use crate::rng::derive_seed;
use crate::trajectory::Trajectory;

const TAG_EPOCH: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_INIT: u64 = 3;
/// Cap on validation windows evaluated per epoch.
const MAX_VAL_WINDOWS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture; its vocabulary size is overwritten from the data.
    pub model: ModelConfig,
    pub seq_len: usize,
    pub batch_size: usize,
    pub batch_mode: BatchMode,
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Tail fraction of every token sequence held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
    /// Train on run-length composite tokens with this run cap.
    #[serde(default)]
    pub run_length: Option<usize>,
    /// Stop after this many optimizer updates even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    /// Full-size LSTM settings: E 128, H 1024, windows of 100, batch 64,
    /// stateful, Adam at constant 1e-3.
    pub fn lstm() -> Self {
        TrainConfig {
            model: ModelConfig::Lstm(LstmConfig::new(1)),
            seq_len: 100,
            batch_size: 64,
            batch_mode: BatchMode::Stateful,
            epochs: 10,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            val_fraction: 0.1,
            seed: 0,
            run_length: None,
            max_steps: None,
        }
    }

    /// Full-size Transformer settings with the 4000-step warmup schedule.
    pub fn transformer() -> Self {
        TrainConfig {
            model: ModelConfig::Transformer(TransformerConfig::new(1)),
            batch_mode: BatchMode::Stateless,
            schedule: LrSchedule::Noam { d_model: 512, warmup: 4000 },
            ..Self::lstm()
        }
    }

    /// Laptop-sized LSTM: E 32, H 64.
    pub fn desk_lstm() -> Self {
        TrainConfig { model: ModelConfig::Lstm(LstmConfig::desk(1)), ..Self::lstm() }
    }

    /// Laptop-sized Transformer: d_model 64, 2 heads, d_ff 128, with the
    /// warmup shortened to 400 steps to match the smaller step budget.
    pub fn desk_transformer() -> Self {
        TrainConfig {
            model: ModelConfig::Transformer(TransformerConfig::desk(1)),
            schedule: LrSchedule::Noam { d_model: 64, warmup: 400 },
            ..Self::transformer()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.seq_len < 2 {
            return invalid(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return invalid("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if let ModelConfig::Transformer(c) = &self.model {
            if self.seq_len > c.max_len {
                return invalid(format!("seq_len {} exceeds Transformer max_len {}", self.seq_len, c.max_len));
            }
        }
        if self.run_length == Some(0) {
            return invalid("run_length cap must be positive");
        }
        if self.max_steps == Some(0) {
            return invalid("max_steps must be positive");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// One row of the loss history, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Loss history as CSV with header `step,lr,train_loss,val_loss`.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,train_loss,val_loss\n");
    for r in history {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.train_loss, val));
    }
    s
}

fn data_hash(seqs: &[Vec<usize>]) -> String {
    let mut bytes = Vec::new();
    for s in seqs {
        bytes.extend_from_slice(&(s.len() as u64).to_le_bytes());
        for &t in s {
            bytes.extend_from_slice(&(t as u64).to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Incremental trainer; drive it with [`Trainer::step`] or [`Trainer::run`].
pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    dt: f64,
    model: Model,
    opt: Adam,
    epoch: usize,
    batch_in_epoch: usize,
    epoch_loss_sum: f64,
    epoch_loss_count: usize,
    carry: Option<LstmState>,
    history: Vec<LossRecord>,
    train_seqs: Vec<Vec<usize>>,
    val: Option<Batch>,
    data_hash: String,
    batches: Option<Vec<Batch>>,
}

impl Trainer {
    pub fn new(trajs: &[Trajectory], config: TrainConfig) -> Result<Trainer> {
        let vocab = match config.run_length {
            Some(cap) => Vocab::run_length(trajs, cap)?,
            None => match trajs.first() {
                Some(t) => Vocab::states(t.n_states()),
                None => return invalid("no training trajectories"),
            },
        };
        let mut config = config;
        config.model = config.model.with_vocab(vocab.size());
        config.validate()?;
        let model = Model::new(config.model.clone(), derive_seed(config.seed, &[TAG_INIT]))?;
        let opt = Adam::new(&model.params);
        Self::assemble(trajs, config, vocab, model, opt)
    }

    fn assemble(trajs: &[Trajectory], config: TrainConfig, vocab: Vocab, model: Model, opt: Adam) -> Result<Trainer> {
        let dt = trajs[0].dt();
        if trajs.iter().any(|t| t.dt() != dt) {
            return invalid("training trajectories disagree on dt");
        }
        let mut train_seqs = Vec::with_capacity(trajs.len());
        let mut val_seqs = Vec::new();
        for t in trajs {
            let mut seq = vocab.encode(t)?;
            let n_val = (seq.len() as f64 * config.val_fraction).floor() as usize;
            if n_val >= config.seq_len {
                val_seqs.push(seq.split_off(seq.len() - n_val));
            }
            train_seqs.push(seq);
        }
        let val = val_batch(&val_seqs, config.seq_len);
        // Fail early if the data cannot fill one batch.
        make_stateful_batches(&train_seqs, config.seq_len, config.batch_size, BatchMode::Stateful, 0)?;
        let data_hash = data_hash(&train_seqs);
        Ok(Trainer {
            dt,
            vocab,
            model,
            opt,
            epoch: 0,
            batch_in_epoch: 0,
            epoch_loss_sum: 0.0,
            epoch_loss_count: 0,
            carry: None,
            history: Vec::new(),
            train_seqs,
            val,
            data_hash,
            batches: None,
            config,
        })
    }

    /// Continue from a checkpoint on the same training data.
    pub fn resume(trajs: &[Trajectory], ckpt: &Checkpoint) -> Result<Trainer> {
        let m = &ckpt.meta;
        let mut t = Self::assemble(trajs, m.train.clone(), m.vocab.clone(), ckpt.model(), ckpt.adam.clone())?;
        if t.data_hash != m.data_hash {
            return invalid("checkpoint was trained on different data");
        }
        t.epoch = m.epoch;
        t.batch_in_epoch = m.batch_in_epoch;
        t.epoch_loss_sum = m.epoch_loss_sum;
        t.epoch_loss_count = m.epoch_loss_count;
        t.history = m.history.clone();
        t.carry = ckpt.carry.clone();
        Ok(t)
    }

    /// Replace the stopping rule. Everything else about the run stays as
    /// checkpointed.
    pub fn set_budget(&mut self, epochs: usize, max_steps: Option<u64>) -> Result<()> {
        let config = TrainConfig { epochs, max_steps, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn steps_done(&self) -> u64 {
        self.opt.step
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.opt.step >= m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                train: self.config.clone(),
                vocab: self.vocab.clone(),
                dt: self.dt,
                config_hash: self.config.hash(),
                data_hash: self.data_hash.clone(),
                step: self.opt.step,
                epoch: self.epoch,
                batch_in_epoch: self.batch_in_epoch,
                epoch_loss_sum: self.epoch_loss_sum,
                epoch_loss_count: self.epoch_loss_count,
                rng_seed: self.config.seed,
                history: self.history.clone(),
            },
            params: self.model.params.clone(),
            adam: self.opt.clone(),
            carry: if self.batch_in_epoch > 0 { self.carry.clone() } else { None },
        }
    }

    fn diverged(&self, reason: String) -> Error {
        Error::Diverged { step: self.opt.step + 1, reason, last_good: Box::new(self.checkpoint()) }
    }

    /// One optimizer update. Returns the batch loss, or `None` once every
    /// epoch is done.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.is_finished() {
            return Ok(None);
        }
        if self.batches.is_none() {
            let seed = derive_seed(self.config.seed, &[TAG_EPOCH, self.epoch as u64]);
            self.batches = Some(make_stateful_batches(
                &self.train_seqs,
                self.config.seq_len,
                self.config.batch_size,
                self.config.batch_mode,
                seed,
            )?);
        }
        if self.batch_in_epoch == 0 {
            self.carry = None;
        }
        let step_no = self.opt.step + 1;
        let batches = self.batches.as_ref().expect("built above");
        let batch = &batches[self.batch_in_epoch];
        let n_batches = batches.len();
        let dropout_seed = derive_seed(self.config.seed, &[TAG_DROPOUT, step_no]);
        let lg = match self.model.loss_and_grad(batch, self.carry.as_ref(), Some(dropout_seed)) {
            Ok(lg) => lg,
            Err(Error::NonFinite(msg)) => return Err(self.diverged(msg)),
            Err(e) => return Err(e),
        };
        if !lg.grads.all_finite() {
            return Err(self.diverged("non-finite gradient".into()));
        }
        let lr = self.config.schedule.lr(step_no);
        self.opt.update(&mut self.model.params, &lg.grads, lr)?;
        self.carry = match self.config.batch_mode {
            BatchMode::Stateful => lg.carry,
            BatchMode::Stateless => None,
        };
        self.epoch_loss_sum += lg.loss;
        self.epoch_loss_count += 1;
        self.batch_in_epoch += 1;
        let budget_spent = self.config.max_steps.is_some_and(|m| self.opt.step >= m);
        if self.batch_in_epoch == n_batches || budget_spent {
            self.close_epoch(lr)?;
        }
        Ok(Some(lg.loss))
    }

    /// Record the (possibly partial) epoch and start the next one.
    fn close_epoch(&mut self, lr: f64) -> Result<()> {
        let val_loss = match &self.val {
            Some(v) => Some(self.model.loss(v, None)?),
            None => None,
        };
        let train_loss = self.epoch_loss_sum / self.epoch_loss_count as f64;
        self.history.push(LossRecord { step: self.opt.step, lr, train_loss, val_loss });
        log::info!("epoch {} step {} train_loss {train_loss:.5} val_loss {val_loss:?}", self.epoch, self.opt.step);
        self.epoch += 1;
        self.batch_in_epoch = 0;
        self.epoch_loss_sum = 0.0;
        self.epoch_loss_count = 0;
        self.batches = None;
        self.carry = None;
        Ok(())
    }

    /// Run up to `max_steps` updates (all remaining if `None`).
    pub fn run(&mut self, max_steps: Option<u64>) -> Result<()> {
        let mut done = 0;
        while max_steps.is_none_or(|m| done < m) {
            if self.step()?.is_none() {
                break;
            }
            done += 1;
        }
        Ok(())
    }

    /// Mean loss on the held-out windows, if any.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        self.val.as_ref().map(|v| self.model.loss(v, None)).transpose()
    }
}

fn val_batch(seqs: &[Vec<usize>], seq_len: usize) -> Option<Batch> {
    let windows: Vec<&[usize]> = seqs.iter().flat_map(|s| s.chunks_exact(seq_len)).collect();
    if windows.is_empty() {
        return None;
    }
    let stride = windows.len().div_ceil(MAX_VAL_WINDOWS);
    let picked: Vec<&[usize]> = windows.into_iter().step_by(stride).collect();
    let tokens = Array2::from_shape_fn((picked.len(), seq_len), |(b, t)| picked[b][t]);
    Some(Batch { reset: vec![true; picked.len()], tokens })
}

/// Train to completion and return the final checkpoint.
pub fn train(trajs: &[Trajectory], config: TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(trajs, config)?;
    t.run(None)?;
    Ok(t.checkpoint())
}
