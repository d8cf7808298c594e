//! Next-state language models over discrete alphabets: a stacked-gate LSTM
//! and an encoder-decoder Transformer, both with hand-written reverse-mode
//! gradients, plus Adam, batching, training and checkpoints.
//!
//! Conventions shared by both models:
//!
//! * A window of `L` tokens produces `L` rows of logits; row `t` predicts
//!   token `t + 1`. The loss is the mean cross-entropy over the `L - 1`
//!   positions that have a target.
//! * Weight matrices are initialised uniformly in `±1/sqrt(fan_in)`, biases at
//!   zero. Embedding tables count as fan-in 1 (a one-hot lookup).

pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod optim;
pub mod train;
pub mod transformer;
pub mod vocab;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use batch::{batches_per_epoch, make_stateful_batches, Batch, BatchMode};
pub use checkpoint::Checkpoint;
pub use lstm::{lstm_forward, lstm_step, LstmConfig, LstmParams, LstmState};
pub use optim::{adam_step, noam_lr, Adam, LrSchedule};
pub use train::{train, TrainConfig, Trainer};
pub use transformer::{
    ffn, scaled_attention, transformer_forward, Directionality, TransformerConfig,
    TransformerParams,
};
pub use vocab::Vocab;

/// Uniform access to the named tensors of a parameter set. The order of
/// `named` and `named_mut` is fixed and identical.
pub trait ParamTensors {
    fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Sum of squares over every entry.
    fn sq_norm(&self) -> f64 {
        self.named().iter().map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut t) in self.named_mut() {
            t.fill(0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    fn add_assign(&mut self, other: &dyn ParamTensors) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a += &b;
        }
    }
}

pub(crate) fn init_uniform<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Array2<f64> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..=a))
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - m).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean next-token cross-entropy over rows of `logits` that have a target.
/// `targets[r] = None` marks rows without one. Returns the loss and
/// d(loss)/d(logits).
pub(crate) fn cross_entropy(
    logits: ArrayView2<'_, f64>,
    targets: &[Option<usize>],
) -> Result<(f64, Array2<f64>)> {
    let n = targets.iter().filter(|t| t.is_some()).count();
    if n == 0 {
        return invalid("no positions with a next-token target (window shorter than 2)");
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (r, tgt) in targets.iter().enumerate() {
        let Some(tgt) = *tgt else { continue };
        let p = softmax(logits.row(r));
        loss -= p[tgt].ln();
        let mut g = grad.row_mut(r);
        g.assign(&p);
        g[tgt] -= 1.0;
    }
    grad /= n as f64;
    Ok((loss / n as f64, grad))
}

/// Architecture choice plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Lstm(LstmConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    pub fn vocab(&self) -> usize {
        match self {
            ModelConfig::Lstm(c) => c.vocab,
            ModelConfig::Transformer(c) => c.vocab,
        }
    }

    pub fn with_vocab(&self, vocab: usize) -> ModelConfig {
        match self {
            ModelConfig::Lstm(c) => ModelConfig::Lstm(LstmConfig { vocab, ..*c }),
            ModelConfig::Transformer(c) => {
                ModelConfig::Transformer(TransformerConfig { vocab, ..c.clone() })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Lstm(c) => c.validate(),
            ModelConfig::Transformer(c) => c.validate(),
        }
    }

    pub fn is_lstm(&self) -> bool {
        matches!(self, ModelConfig::Lstm(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Lstm(LstmParams),
    Transformer(TransformerParams),
}

impl ParamTensors for ModelParams {
    fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        match self {
            ModelParams::Lstm(p) => p.named(),
            ModelParams::Transformer(p) => p.named(),
        }
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        match self {
            ModelParams::Lstm(p) => p.named_mut(),
            ModelParams::Transformer(p) => p.named_mut(),
        }
    }
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Result of one loss/gradient evaluation on a batch.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: ModelParams,
    /// Final recurrent state per batch row (LSTM only).
    pub carry: Option<LstmState>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = crate::rng::rng_from_seed(seed);
        let params = match &config {
            ModelConfig::Lstm(c) => ModelParams::Lstm(LstmParams::init(c, &mut rng)),
            ModelConfig::Transformer(c) => {
                ModelParams::Transformer(TransformerParams::init(c, &mut rng))
            }
        };
        Ok(Model { config, params })
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab()
    }

    /// Mean next-token cross-entropy and exact gradients on a batch of
    /// windows. `carry` seeds the LSTM state (rows flagged in `batch.reset`
    /// start from zero). `dropout_seed = None` disables dropout.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        carry: Option<&LstmState>,
        dropout_seed: Option<u64>,
    ) -> Result<LossGrad> {
        match (&self.config, &self.params) {
            (ModelConfig::Lstm(c), ModelParams::Lstm(p)) => {
                let b = batch.tokens.nrows();
                let mut init = match carry {
                    Some(s) if s.batch() == b => s.clone(),
                    _ => LstmState::zeros(b, c.hidden),
                };
                init.reset_rows(&batch.reset);
                let (loss, grads, fin) = lstm::lstm_loss_and_grad(p, batch.tokens.view(), &init)?;
                Ok(LossGrad { loss, grads: ModelParams::Lstm(grads), carry: Some(fin) })
            }
            (ModelConfig::Transformer(c), ModelParams::Transformer(p)) => {
                let (loss, grads) =
                    transformer::batch_loss_and_grad(c, p, batch.tokens.view(), dropout_seed)?;
                Ok(LossGrad { loss, grads: ModelParams::Transformer(grads), carry: None })
            }
            _ => invalid("model config and parameters disagree"),
        }
    }

    /// Mean next-token cross-entropy without gradients or dropout.
    pub fn loss(&self, batch: &Batch, carry: Option<&LstmState>) -> Result<f64> {
        match (&self.config, &self.params) {
            (ModelConfig::Lstm(c), ModelParams::Lstm(p)) => {
                let b = batch.tokens.nrows();
                let mut init = match carry {
                    Some(s) if s.batch() == b => s.clone(),
                    _ => LstmState::zeros(b, c.hidden),
                };
                init.reset_rows(&batch.reset);
                lstm::lstm_loss(p, batch.tokens.view(), &init)
            }
            (ModelConfig::Transformer(c), ModelParams::Transformer(p)) => {
                transformer::batch_loss(c, p, batch.tokens.view())
            }
            _ => invalid("model config and parameters disagree"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(array![1000.0, 1000.0, -1000.0].view());
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Array2::zeros((4, 7));
        let (loss, _) = cross_entropy(logits.view(), &[Some(1), Some(3), None, Some(6)]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }
}
