//! LSTM language model with stacked gates.
//!
//! Gate pre-activations for a batch `x` (B x E) and previous hidden state
//! `h` (B x H) are `z = x W_inᵀ + h W_recᵀ + b`, a B x 4H block whose column
//! quarters hold, in order, the forget, input and output gates and the
//! candidate cell. Then
//!
//! ```text
//! f, i, o = sigmoid(z_f), sigmoid(z_i), sigmoid(z_o)
//! c~      = tanh(z_c)
//! c       = f * c_prev + i * c~
//! h       = o * tanh(c)
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, init_uniform, ParamTensors};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmConfig {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl LstmConfig {
    /// Full-size defaults: E = 128, H = 1024.
    pub fn new(vocab: usize) -> Self {
        LstmConfig { vocab, embed: 128, hidden: 1024 }
    }

    /// Laptop-sized preset: E = 32, H = 64.
    pub fn desk(vocab: usize) -> Self {
        LstmConfig { vocab, embed: 32, hidden: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed == 0 || self.hidden == 0 {
            return invalid(format!("LSTM dimensions must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// vocab x E
    pub embedding: Array2<f64>,
    /// 4H x E
    pub w_input: Array2<f64>,
    /// 4H x H
    pub w_recurrent: Array2<f64>,
    /// 4H
    pub bias: Array1<f64>,
    /// vocab x H
    pub w_out: Array2<f64>,
    /// vocab
    pub b_out: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(cfg: &LstmConfig) -> Self {
        let (v, e, h) = (cfg.vocab, cfg.embed, cfg.hidden);
        LstmParams {
            embedding: Array2::zeros((v, e)),
            w_input: Array2::zeros((4 * h, e)),
            w_recurrent: Array2::zeros((4 * h, h)),
            bias: Array1::zeros(4 * h),
            w_out: Array2::zeros((v, h)),
            b_out: Array1::zeros(v),
        }
    }

    pub fn init<R: Rng + ?Sized>(cfg: &LstmConfig, rng: &mut R) -> Self {
        let (v, e, h) = (cfg.vocab, cfg.embed, cfg.hidden);
        LstmParams {
            embedding: init_uniform(rng, v, e, 1),
            w_input: init_uniform(rng, 4 * h, e, e),
            w_recurrent: init_uniform(rng, 4 * h, h, h),
            bias: Array1::zeros(4 * h),
            w_out: init_uniform(rng, v, h, h),
            b_out: Array1::zeros(v),
        }
    }

    pub fn config(&self) -> LstmConfig {
        LstmConfig { vocab: self.embedding.nrows(), embed: self.embedding.ncols(), hidden: self.hidden() }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let e = self.embedding.ncols();
        Array2::from_shape_fn((tokens.len(), e), |(b, j)| self.embedding[[tokens[b], j]])
    }
}

impl ParamTensors for LstmParams {
    fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![
            ("embedding".into(), self.embedding.view().into_dyn()),
            ("lstm.w_input".into(), self.w_input.view().into_dyn()),
            ("lstm.w_recurrent".into(), self.w_recurrent.view().into_dyn()),
            ("lstm.bias".into(), self.bias.view().into_dyn()),
            ("output.weight".into(), self.w_out.view().into_dyn()),
            ("output.bias".into(), self.b_out.view().into_dyn()),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![
            ("embedding".into(), self.embedding.view_mut().into_dyn()),
            ("lstm.w_input".into(), self.w_input.view_mut().into_dyn()),
            ("lstm.w_recurrent".into(), self.w_recurrent.view_mut().into_dyn()),
            ("lstm.bias".into(), self.bias.view_mut().into_dyn()),
            ("output.weight".into(), self.w_out.view_mut().into_dyn()),
            ("output.bias".into(), self.b_out.view_mut().into_dyn()),
        ]
    }
}

/// Hidden and cell state, one row per batch lane.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Array2<f64>,
    pub c: Array2<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState { h: Array2::zeros((batch, hidden)), c: Array2::zeros((batch, hidden)) }
    }

    pub fn batch(&self) -> usize {
        self.h.nrows()
    }

    /// Zero the lanes whose flag is set.
    pub fn reset_rows(&mut self, flags: &[bool]) {
        for (b, &f) in flags.iter().enumerate() {
            if f && b < self.batch() {
                self.h.row_mut(b).fill(0.0);
                self.c.row_mut(b).fill(0.0);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates f, i, o, c~ (B x 4H).
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

fn step_inner(x: Array2<f64>, prev: &LstmState, p: &LstmParams) -> (LstmState, StepCache) {
    let hs = p.hidden();
    let mut z = x.dot(&p.w_input.t()) + prev.h.dot(&p.w_recurrent.t()) + &p.bias;
    z.slice_mut(s![.., ..3 * hs]).mapv_inplace(sigmoid);
    z.slice_mut(s![.., 3 * hs..]).mapv_inplace(f64::tanh);
    let f = z.slice(s![.., ..hs]);
    let i = z.slice(s![.., hs..2 * hs]);
    let o = z.slice(s![.., 2 * hs..3 * hs]);
    let g = z.slice(s![.., 3 * hs..]);
    let c = &f * &prev.c + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    let cache = StepCache { x, h_prev: prev.h.clone(), c_prev: prev.c.clone(), gates: z, tanh_c };
    (LstmState { h, c }, cache)
}

/// One LSTM update for a batch of embedded inputs (B x E).
pub fn lstm_step(x: ArrayView2<'_, f64>, prev: &LstmState, p: &LstmParams) -> Result<LstmState> {
    if x.ncols() != p.embedding.ncols() || x.nrows() != prev.batch() || prev.h.ncols() != p.hidden() {
        return invalid("lstm_step: inconsistent shapes");
    }
    let (next, _) = step_inner(x.to_owned(), prev, p);
    if !next.is_finite() {
        return Err(Error::NonFinite("LSTM activation at step 0".into()));
    }
    Ok(next)
}

fn check_tokens(tokens: ArrayView2<'_, usize>, vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(t) => invalid(format!("token {t} outside vocabulary of size {vocab}")),
        None => Ok(()),
    }
}

struct Trace {
    steps: Vec<StepCache>,
    /// Hidden states stacked time-major: row t * B + b.
    hidden: Array2<f64>,
    logits: Array2<f64>,
    last: LstmState,
}

fn forward_batch(p: &LstmParams, tokens: ArrayView2<'_, usize>, init: &LstmState) -> Result<Trace> {
    check_tokens(tokens, p.vocab())?;
    let (b, len) = tokens.dim();
    if init.batch() != b || init.h.ncols() != p.hidden() {
        return invalid("initial state does not match batch or hidden size");
    }
    let mut state = init.clone();
    let mut steps = Vec::with_capacity(len);
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let col: Vec<usize> = tokens.column(t).to_vec();
        let (next, cache) = step_inner(p.embed(&col), &state, p);
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("LSTM activation at step {t}")));
        }
        hs.push(next.h.clone());
        steps.push(cache);
        state = next;
    }
    let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
    let hidden = if views.is_empty() {
        Array2::zeros((0, p.hidden()))
    } else {
        concatenate(Axis(0), &views).expect("equal widths")
    };
    let logits = hidden.dot(&p.w_out.t()) + &p.b_out;
    Ok(Trace { steps, hidden, logits, last: state })
}

/// Run one sequence from `init` (batch 1). Returns L x vocab logits and the
/// final state.
pub fn lstm_forward(tokens: &[usize], init: &LstmState, p: &LstmParams) -> Result<(Array2<f64>, LstmState)> {
    let tok = Array2::from_shape_vec((1, tokens.len()), tokens.to_vec()).expect("shape");
    let tr = forward_batch(p, tok.view(), init)?;
    Ok((tr.logits, tr.last))
}

/// Batched forward: logits for every (t, b) in time-major row order.
pub fn lstm_forward_batch(
    p: &LstmParams,
    tokens: ArrayView2<'_, usize>,
    init: &LstmState,
) -> Result<(Array2<f64>, LstmState)> {
    let tr = forward_batch(p, tokens, init)?;
    Ok((tr.logits, tr.last))
}

/// Single generation step: embed one token per lane, advance the state and
/// return B x vocab logits.
pub fn lstm_next_logits(p: &LstmParams, tokens: &[usize], state: &mut LstmState) -> Result<Array2<f64>> {
    if let Some(t) = tokens.iter().find(|&&t| t >= p.vocab()) {
        return invalid(format!("token {t} outside vocabulary of size {}", p.vocab()));
    }
    let (next, _) = step_inner(p.embed(tokens), state, p);
    if !next.is_finite() {
        return Err(Error::NonFinite("LSTM activation during generation".into()));
    }
    *state = next;
    Ok(state.h.dot(&p.w_out.t()) + &p.b_out)
}

fn targets(tokens: ArrayView2<'_, usize>) -> Vec<Option<usize>> {
    let (b, len) = tokens.dim();
    (0..len * b)
        .map(|r| {
            let (t, lane) = (r / b, r % b);
            (t + 1 < len).then(|| tokens[[lane, t + 1]])
        })
        .collect()
}

pub(crate) fn lstm_loss(p: &LstmParams, tokens: ArrayView2<'_, usize>, init: &LstmState) -> Result<f64> {
    let tr = forward_batch(p, tokens, init)?;
    let (loss, _) = cross_entropy(tr.logits.view(), &targets(tokens))?;
    finite_loss(loss)
}

fn finite_loss(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("loss = {loss}")))
    }
}

/// Mean next-token cross-entropy over a B x L token batch and its exact
/// gradient (backpropagation through time within the window; `init` is
/// treated as a constant). Also returns the final state.
pub fn lstm_loss_and_grad(
    p: &LstmParams,
    tokens: ArrayView2<'_, usize>,
    init: &LstmState,
) -> Result<(f64, LstmParams, LstmState)> {
    let tr = forward_batch(p, tokens, init)?;
    let (loss, dlogits) = cross_entropy(tr.logits.view(), &targets(tokens))?;
    let loss = finite_loss(loss)?;

    let hs = p.hidden();
    let (b, len) = tokens.dim();
    let mut g = LstmParams::zeros(&p.config());
    g.w_out = dlogits.t().dot(&tr.hidden);
    g.b_out = dlogits.sum_axis(Axis(0));
    let dhidden = dlogits.dot(&p.w_out);

    let mut dh_next = Array2::<f64>::zeros((b, hs));
    let mut dc_next = Array2::<f64>::zeros((b, hs));
    let mut dz = Array2::<f64>::zeros((b, 4 * hs));
    for t in (0..len).rev() {
        let c = &tr.steps[t];
        let dh = &dhidden.slice(s![t * b..(t + 1) * b, ..]) + &dh_next;
        let f = c.gates.slice(s![.., ..hs]);
        let i = c.gates.slice(s![.., hs..2 * hs]);
        let o = c.gates.slice(s![.., 2 * hs..3 * hs]);
        let gg = c.gates.slice(s![.., 3 * hs..]);
        let dc = &dh * &o * &c.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
        dz.slice_mut(s![.., ..hs]).assign(&(&dc * &c.c_prev * f * &f.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![.., hs..2 * hs]).assign(&(&dc * &gg * i * &i.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![.., 2 * hs..3 * hs]).assign(&(&dh * &c.tanh_c * o * &o.mapv(|v| 1.0 - v)));
        dz.slice_mut(s![.., 3 * hs..]).assign(&(&dc * &i * &gg.mapv(|v| 1.0 - v * v)));

        g.w_input += &dz.t().dot(&c.x);
        g.w_recurrent += &dz.t().dot(&c.h_prev);
        g.bias += &dz.sum_axis(Axis(0));
        let dx = dz.dot(&p.w_input);
        for lane in 0..b {
            let tok = tokens[[lane, t]];
            let mut row = g.embedding.row_mut(tok);
            row += &dx.row(lane);
        }
        dh_next = dz.dot(&p.w_recurrent);
        dc_next = &dc * &f;
    }
    Ok((loss, g, tr.last))
}
