//! Encoder-decoder Transformer for next-token prediction.
//!
//! The encoder reads the window `x_0..x_{L-1}`; the decoder reads the
//! right-shifted window `BOS, x_0..x_{L-2}` with causal self-attention and
//! attends to the encoder output. Cross-attention is causal as well (decoder
//! position `t` sees encoder positions `<= t`), so in unidirectional mode
//! the logits at `t` depend only on `x_0..x_t`. Bidirectional mode removes the
//! mask from encoder self-attention only.
//!
//! Every sub-layer is wrapped as `LayerNorm(x + sublayer(x))`. Inputs are
//! token embeddings plus a sinusoidal position table. Attention projections
//! have no biases. Dropout acts on attention weights and FFN hidden units.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cross_entropy, init_uniform, softmax_rows, ParamTensors};
use crate::error::{invalid, Error, Result};
use crate::rng::{child_rng, ChaCha8Rng};

const LN_EPS: f64 = 1e-5;
/// Fixed number of gradient partial sums per batch, so the reduction order
/// does not depend on the thread pool size.
const REDUCE_CHUNKS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directionality {
    /// Triangular mask on encoder self-attention.
    Unidirectional,
    /// Unmasked encoder self-attention.
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Number of encoder layers, and of decoder layers.
    pub stacks: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Longest accepted window.
    pub max_len: usize,
    pub directionality: Directionality,
}

impl TransformerConfig {
    /// Full-size defaults: d_model 512, 8 heads, 2 stacks, d_ff 2048,
    /// dropout 0.1.
    pub fn new(vocab: usize) -> Self {
        TransformerConfig {
            vocab,
            d_model: 512,
            heads: 8,
            stacks: 2,
            d_ff: 2048,
            dropout: 0.1,
            max_len: 1024,
            directionality: Directionality::Bidirectional,
        }
    }

    /// Laptop-sized preset: d_model 64, 2 heads, d_ff 128.
    pub fn desk(vocab: usize) -> Self {
        TransformerConfig { d_model: 64, heads: 2, d_ff: 128, ..Self::new(vocab) }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 || self.stacks == 0 {
            return invalid(format!("Transformer dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Bias-free multi-head attention projections, all d_model x d_model,
/// applied as `x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    /// d_model x d_ff
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// d_ff x d_model
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FfnParams,
    pub norm3: LayerNormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    /// (vocab + 1) x d_model; the extra row is the begin-of-sequence token.
    pub embedding: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// vocab x d_model
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl AttentionParams {
    fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        AttentionParams {
            w_q: init_uniform(rng, d, d, d),
            w_k: init_uniform(rng, d, d, d),
            w_v: init_uniform(rng, d, d, d),
            w_o: init_uniform(rng, d, d, d),
        }
    }

    fn zeros(d: usize) -> Self {
        let z = Array2::zeros((d, d));
        AttentionParams { w_q: z.clone(), w_k: z.clone(), w_v: z.clone(), w_o: z }
    }

    fn push<'a>(&'a self, pre: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{pre}.w_q"), self.w_q.view().into_dyn()));
        out.push((format!("{pre}.w_k"), self.w_k.view().into_dyn()));
        out.push((format!("{pre}.w_v"), self.w_v.view().into_dyn()));
        out.push((format!("{pre}.w_o"), self.w_o.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{pre}.w_q"), self.w_q.view_mut().into_dyn()));
        out.push((format!("{pre}.w_k"), self.w_k.view_mut().into_dyn()));
        out.push((format!("{pre}.w_v"), self.w_v.view_mut().into_dyn()));
        out.push((format!("{pre}.w_o"), self.w_o.view_mut().into_dyn()));
    }
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        LayerNormParams { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        LayerNormParams { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }

    fn push<'a>(&'a self, pre: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{pre}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{pre}.beta"), self.beta.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{pre}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{pre}.beta"), self.beta.view_mut().into_dyn()));
    }
}

impl FfnParams {
    fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        FfnParams {
            w1: init_uniform(rng, d, d_ff, d),
            b1: Array1::zeros(d_ff),
            w2: init_uniform(rng, d_ff, d, d_ff),
            b2: Array1::zeros(d),
        }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        FfnParams {
            w1: Array2::zeros((d, d_ff)),
            b1: Array1::zeros(d_ff),
            w2: Array2::zeros((d_ff, d)),
            b2: Array1::zeros(d),
        }
    }

    fn push<'a>(&'a self, pre: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
        out.push((format!("{pre}.w1"), self.w1.view().into_dyn()));
        out.push((format!("{pre}.b1"), self.b1.view().into_dyn()));
        out.push((format!("{pre}.w2"), self.w2.view().into_dyn()));
        out.push((format!("{pre}.b2"), self.b2.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, pre: &str, out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>) {
        out.push((format!("{pre}.w1"), self.w1.view_mut().into_dyn()));
        out.push((format!("{pre}.b1"), self.b1.view_mut().into_dyn()));
        out.push((format!("{pre}.w2"), self.w2.view_mut().into_dyn()));
        out.push((format!("{pre}.b2"), self.b2.view_mut().into_dyn()));
    }
}

impl TransformerParams {
    pub fn init<R: Rng + ?Sized>(cfg: &TransformerConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let embedding = init_uniform(rng, cfg.vocab + 1, d, 1);
        let encoder = (0..cfg.stacks)
            .map(|_| EncoderLayer {
                attn: AttentionParams::init(d, rng),
                norm1: LayerNormParams::new(d),
                ffn: FfnParams::init(d, cfg.d_ff, rng),
                norm2: LayerNormParams::new(d),
            })
            .collect();
        let decoder = (0..cfg.stacks)
            .map(|_| DecoderLayer {
                self_attn: AttentionParams::init(d, rng),
                norm1: LayerNormParams::new(d),
                cross_attn: AttentionParams::init(d, rng),
                norm2: LayerNormParams::new(d),
                ffn: FfnParams::init(d, cfg.d_ff, rng),
                norm3: LayerNormParams::new(d),
            })
            .collect();
        TransformerParams {
            config: cfg.clone(),
            embedding,
            encoder,
            decoder,
            w_out: init_uniform(rng, cfg.vocab, d, d),
            b_out: Array1::zeros(cfg.vocab),
        }
    }

    pub fn zeros(cfg: &TransformerConfig) -> Self {
        let d = cfg.d_model;
        TransformerParams {
            config: cfg.clone(),
            embedding: Array2::zeros((cfg.vocab + 1, d)),
            encoder: (0..cfg.stacks)
                .map(|_| EncoderLayer {
                    attn: AttentionParams::zeros(d),
                    norm1: LayerNormParams::zeros(d),
                    ffn: FfnParams::zeros(d, cfg.d_ff),
                    norm2: LayerNormParams::zeros(d),
                })
                .collect(),
            decoder: (0..cfg.stacks)
                .map(|_| DecoderLayer {
                    self_attn: AttentionParams::zeros(d),
                    norm1: LayerNormParams::zeros(d),
                    cross_attn: AttentionParams::zeros(d),
                    norm2: LayerNormParams::zeros(d),
                    ffn: FfnParams::zeros(d, cfg.d_ff),
                    norm3: LayerNormParams::zeros(d),
                })
                .collect(),
            w_out: Array2::zeros((cfg.vocab, d)),
            b_out: Array1::zeros(cfg.vocab),
        }
    }

    /// Begin-of-sequence token id.
    pub fn bos(&self) -> usize {
        self.config.vocab
    }
}

impl ParamTensors for TransformerParams {
    fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view().into_dyn())];
        for (l, e) in self.encoder.iter().enumerate() {
            e.attn.push(&format!("encoder.{l}.attn"), &mut out);
            e.norm1.push(&format!("encoder.{l}.norm1"), &mut out);
            e.ffn.push(&format!("encoder.{l}.ffn"), &mut out);
            e.norm2.push(&format!("encoder.{l}.norm2"), &mut out);
        }
        for (l, d) in self.decoder.iter().enumerate() {
            d.self_attn.push(&format!("decoder.{l}.self_attn"), &mut out);
            d.norm1.push(&format!("decoder.{l}.norm1"), &mut out);
            d.cross_attn.push(&format!("decoder.{l}.cross_attn"), &mut out);
            d.norm2.push(&format!("decoder.{l}.norm2"), &mut out);
            d.ffn.push(&format!("decoder.{l}.ffn"), &mut out);
            d.norm3.push(&format!("decoder.{l}.norm3"), &mut out);
        }
        out.push(("output.weight".into(), self.w_out.view().into_dyn()));
        out.push(("output.bias".into(), self.b_out.view().into_dyn()));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.view_mut().into_dyn())];
        for (l, e) in self.encoder.iter_mut().enumerate() {
            e.attn.push_mut(&format!("encoder.{l}.attn"), &mut out);
            e.norm1.push_mut(&format!("encoder.{l}.norm1"), &mut out);
            e.ffn.push_mut(&format!("encoder.{l}.ffn"), &mut out);
            e.norm2.push_mut(&format!("encoder.{l}.norm2"), &mut out);
        }
        for (l, d) in self.decoder.iter_mut().enumerate() {
            d.self_attn.push_mut(&format!("decoder.{l}.self_attn"), &mut out);
            d.norm1.push_mut(&format!("decoder.{l}.norm1"), &mut out);
            d.cross_attn.push_mut(&format!("decoder.{l}.cross_attn"), &mut out);
            d.norm2.push_mut(&format!("decoder.{l}.norm2"), &mut out);
            d.ffn.push_mut(&format!("decoder.{l}.ffn"), &mut out);
            d.norm3.push_mut(&format!("decoder.{l}.norm3"), &mut out);
        }
        out.push(("output.weight".into(), self.w_out.view_mut().into_dyn()));
        out.push(("output.bias".into(), self.b_out.view_mut().into_dyn()));
        out
    }
}

/// Sinusoidal position table, `len x d`.
pub fn positional_table(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let freq = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let a = pos as f64 / freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

/// Inverted dropout source; a `None` generator disables it.
struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn mask(&mut self, shape: (usize, usize)) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut()?;
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Some(Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep }))
    }
}

fn mask_future(scores: &mut Array2<f64>) {
    for ((i, j), v) in scores.indexed_iter_mut() {
        if j > i {
            *v = f64::NEG_INFINITY;
        }
    }
}

/// Single-head scaled dot-product attention,
/// `softmax(Q Kᵀ / sqrt(d_k)) V`. `mask[i][j] = false` hides key `j` from
/// query `i`; a query that can see nothing is an error.
pub fn scaled_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    mask: Option<ArrayView2<'_, bool>>,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() {
        return invalid("scaled_attention: inner dimensions disagree");
    }
    let mut scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    if let Some(m) = mask {
        if m.dim() != scores.dim() {
            return invalid("scaled_attention: mask shape mismatch");
        }
        for (i, row) in m.rows().into_iter().enumerate() {
            if !row.iter().any(|&b| b) {
                return invalid(format!("scaled_attention: query {i} is fully masked"));
            }
        }
        scores.zip_mut_with(&m, |s, &keep| {
            if !keep {
                *s = f64::NEG_INFINITY
            }
        });
    }
    Ok(softmax_rows(scores.view()).dot(&v))
}

/// Lower-triangular (causal) mask of size `n`.
pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// Position-wise feed-forward block.
pub fn ffn(z: ArrayView2<'_, f64>, p: &FfnParams) -> Array2<f64> {
    (z.dot(&p.w1) + &p.b1).mapv(|v| v.max(0.0)).dot(&p.w2) + &p.b2
}

struct AttnCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    z: Array2<f64>,
}

impl AttentionParams {
    fn forward(
        &self,
        xq: &Array2<f64>,
        xkv: &Array2<f64>,
        heads: usize,
        causal: bool,
        drop: &mut Dropout,
    ) -> (Array2<f64>, AttnCache) {
        let q = xq.dot(&self.w_q);
        let k = xkv.dot(&self.w_k);
        let v = xkv.dot(&self.w_v);
        let dk = q.ncols() / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut z = Array2::zeros((xq.nrows(), q.ncols()));
        let mut probs = Vec::with_capacity(heads);
        let mut masks = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            if causal {
                mask_future(&mut sc);
            }
            let a = softmax_rows(sc.view());
            let m = drop.mask(a.dim());
            let zh = match &m {
                Some(m) => (&a * m).dot(&v.slice(cols)),
                None => a.dot(&v.slice(cols)),
            };
            z.slice_mut(cols).assign(&zh);
            probs.push(a);
            masks.push(m);
        }
        let out = z.dot(&self.w_o);
        let cache = AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, masks, z };
        (out, cache)
    }

    /// Returns gradients with respect to the query input and key/value input.
    fn backward(&self, c: &AttnCache, dout: &Array2<f64>, heads: usize, g: &mut AttentionParams) -> (Array2<f64>, Array2<f64>) {
        g.w_o += &c.z.t().dot(dout);
        let dz = dout.dot(&self.w_o.t());
        let dk_ = c.q.ncols() / heads;
        let scale = 1.0 / (dk_ as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dk_..(h + 1) * dk_];
            let a = &c.probs[h];
            let dzh = dz.slice(cols);
            let mut da = dzh.dot(&c.v.slice(cols).t());
            match &c.masks[h] {
                Some(m) => {
                    dv.slice_mut(cols).assign(&(a * m).t().dot(&dzh));
                    da *= m;
                }
                None => dv.slice_mut(cols).assign(&a.t().dot(&dzh)),
            }
            let rs = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (a * &(da - &rs)) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.w_q += &c.xq.t().dot(&dq);
        g.w_k += &c.xkv.t().dot(&dk);
        g.w_v += &c.xkv.t().dot(&dv);
        (dq.dot(&self.w_q.t()), dk.dot(&self.w_k.t()) + dv.dot(&self.w_v.t()))
    }
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNormParams {
    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    fn backward(&self, c: &NormCache, dy: &Array2<f64>, g: &mut LayerNormParams) -> Array2<f64> {
        g.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        g.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let d = dy.ncols() as f64;
        let m1 = dxhat.sum_axis(Axis(1)) / d;
        let m2 = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
        let inner = dxhat - &m1.insert_axis(Axis(1)) - &(&c.xhat * &m2.insert_axis(Axis(1)));
        inner * c.inv_std.view().insert_axis(Axis(1))
    }
}

struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl FfnParams {
    fn forward(&self, x: &Array2<f64>, drop: &mut Dropout) -> (Array2<f64>, FfnCache) {
        let pre = x.dot(&self.w1) + &self.b1;
        let mut act = pre.mapv(|v| v.max(0.0));
        let mask = drop.mask(act.dim());
        if let Some(m) = &mask {
            act *= m;
        }
        let y = act.dot(&self.w2) + &self.b2;
        (y, FfnCache { x: x.clone(), pre, act, mask })
    }

    fn backward(&self, c: &FfnCache, dy: &Array2<f64>, g: &mut FfnParams) -> Array2<f64> {
        g.w2 += &c.act.t().dot(dy);
        g.b2 += &dy.sum_axis(Axis(0));
        let mut dh = dy.dot(&self.w2.t());
        if let Some(m) = &c.mask {
            dh *= m;
        }
        dh.zip_mut_with(&c.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0
            }
        });
        g.w1 += &c.x.t().dot(&dh);
        g.b1 += &dh.sum_axis(Axis(0));
        dh.dot(&self.w1.t())
    }
}

struct EncCache {
    attn: AttnCache,
    n1: NormCache,
    ffn: FfnCache,
    n2: NormCache,
}

impl EncoderLayer {
    fn forward(&self, x: &Array2<f64>, heads: usize, causal: bool, drop: &mut Dropout) -> (Array2<f64>, EncCache) {
        let (a, attn) = self.attn.forward(x, x, heads, causal, drop);
        let (x1, n1) = self.norm1.forward(&(x + &a));
        let (f, ffn) = self.ffn.forward(&x1, drop);
        let (x2, n2) = self.norm2.forward(&(&x1 + &f));
        (x2, EncCache { attn, n1, ffn, n2 })
    }

    fn backward(&self, c: &EncCache, dout: &Array2<f64>, heads: usize, g: &mut EncoderLayer) -> Array2<f64> {
        let ds2 = self.norm2.backward(&c.n2, dout, &mut g.norm2);
        let dx1 = &ds2 + &self.ffn.backward(&c.ffn, &ds2, &mut g.ffn);
        let ds1 = self.norm1.backward(&c.n1, &dx1, &mut g.norm1);
        let (dq, dkv) = self.attn.backward(&c.attn, &ds1, heads, &mut g.attn);
        ds1 + dq + dkv
    }
}

struct DecCache {
    self_attn: AttnCache,
    n1: NormCache,
    cross: AttnCache,
    n2: NormCache,
    ffn: FfnCache,
    n3: NormCache,
}

impl DecoderLayer {
    fn forward(&self, y: &Array2<f64>, enc: &Array2<f64>, heads: usize, drop: &mut Dropout) -> (Array2<f64>, DecCache) {
        let (a, self_attn) = self.self_attn.forward(y, y, heads, true, drop);
        let (y1, n1) = self.norm1.forward(&(y + &a));
        let (c, cross) = self.cross_attn.forward(&y1, enc, heads, true, drop);
        let (y2, n2) = self.norm2.forward(&(&y1 + &c));
        let (f, ffn) = self.ffn.forward(&y2, drop);
        let (y3, n3) = self.norm3.forward(&(&y2 + &f));
        (y3, DecCache { self_attn, n1, cross, n2, ffn, n3 })
    }

    /// Returns gradients for the decoder input and for the encoder output.
    fn backward(&self, c: &DecCache, dout: &Array2<f64>, heads: usize, g: &mut DecoderLayer) -> (Array2<f64>, Array2<f64>) {
        let ds3 = self.norm3.backward(&c.n3, dout, &mut g.norm3);
        let dy2 = &ds3 + &self.ffn.backward(&c.ffn, &ds3, &mut g.ffn);
        let ds2 = self.norm2.backward(&c.n2, &dy2, &mut g.norm2);
        let (dq, denc) = self.cross_attn.backward(&c.cross, &ds2, heads, &mut g.cross_attn);
        let dy1 = ds2 + dq;
        let ds1 = self.norm1.backward(&c.n1, &dy1, &mut g.norm1);
        let (dq, dkv) = self.self_attn.backward(&c.self_attn, &ds1, heads, &mut g.self_attn);
        (ds1 + dq + dkv, denc)
    }
}

struct SeqCache {
    dec_tokens: Vec<usize>,
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    top: Array2<f64>,
}

fn embed(p: &TransformerParams, tokens: &[usize], pe: &Array2<f64>) -> Array2<f64> {
    let d = p.embedding.ncols();
    Array2::from_shape_fn((tokens.len(), d), |(t, j)| p.embedding[[tokens[t], j]] + pe[[t, j]])
}

fn check_window(p: &TransformerParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return invalid("empty token window");
    }
    if tokens.len() > p.config.max_len {
        return invalid(format!("window of {} tokens exceeds max_len {}", tokens.len(), p.config.max_len));
    }
    match tokens.iter().find(|&&t| t >= p.config.vocab) {
        Some(t) => invalid(format!("token {t} outside vocabulary of size {}", p.config.vocab)),
        None => Ok(()),
    }
}

fn forward_seq(p: &TransformerParams, tokens: &[usize], dir: Directionality, drop: &mut Dropout) -> Result<(Array2<f64>, SeqCache)> {
    check_window(p, tokens)?;
    let heads = p.config.heads;
    let pe = positional_table(tokens.len(), p.config.d_model);
    let mut dec_tokens = Vec::with_capacity(tokens.len());
    dec_tokens.push(p.bos());
    dec_tokens.extend_from_slice(&tokens[..tokens.len() - 1]);

    let causal = dir == Directionality::Unidirectional;
    let mut x = embed(p, tokens, &pe);
    let mut enc = Vec::with_capacity(p.encoder.len());
    for layer in &p.encoder {
        let (nx, c) = layer.forward(&x, heads, causal, drop);
        x = nx;
        enc.push(c);
    }
    let mut y = embed(p, &dec_tokens, &pe);
    let mut dec = Vec::with_capacity(p.decoder.len());
    for layer in &p.decoder {
        let (ny, c) = layer.forward(&y, &x, heads, drop);
        y = ny;
        dec.push(c);
    }
    let logits = y.dot(&p.w_out.t()) + &p.b_out;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Transformer logits".into()));
    }
    Ok((logits, SeqCache { dec_tokens, enc, dec, top: y }))
}

fn backward_seq(p: &TransformerParams, tokens: &[usize], c: &SeqCache, dlogits: &Array2<f64>, g: &mut TransformerParams) {
    let heads = p.config.heads;
    g.w_out += &dlogits.t().dot(&c.top);
    g.b_out += &dlogits.sum_axis(Axis(0));
    let mut dy = dlogits.dot(&p.w_out);
    let mut denc = Array2::zeros(dy.raw_dim());
    for (l, layer) in p.decoder.iter().enumerate().rev() {
        let (ndy, de) = layer.backward(&c.dec[l], &dy, heads, &mut g.decoder[l]);
        dy = ndy;
        denc += &de;
    }
    for (t, &tok) in c.dec_tokens.iter().enumerate() {
        let mut row = g.embedding.row_mut(tok);
        row += &dy.row(t);
    }
    for (l, layer) in p.encoder.iter().enumerate().rev() {
        denc = layer.backward(&c.enc[l], &denc, heads, &mut g.encoder[l]);
    }
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = g.embedding.row_mut(tok);
        row += &denc.row(t);
    }
}

/// Logits (L x vocab) for one window, dropout off.
pub fn transformer_forward(tokens: &[usize], p: &TransformerParams, dir: Directionality) -> Result<Array2<f64>> {
    Ok(forward_seq(p, tokens, dir, &mut Dropout::off())?.0)
}

fn seq_targets(tokens: &[usize]) -> Vec<Option<usize>> {
    (0..tokens.len()).map(|t| tokens.get(t + 1).copied()).collect()
}

/// Loss and gradient for a single window. `dropout_rng = None` disables
/// dropout.
pub fn sequence_loss_and_grad(
    p: &TransformerParams,
    tokens: &[usize],
    dropout_rng: Option<ChaCha8Rng>,
) -> Result<(f64, TransformerParams)> {
    let mut drop = Dropout { rate: p.config.dropout, rng: dropout_rng };
    let (logits, cache) = forward_seq(p, tokens, p.config.directionality, &mut drop)?;
    let (loss, dlogits) = cross_entropy(logits.view(), &seq_targets(tokens))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    let mut g = TransformerParams::zeros(&p.config);
    backward_seq(p, tokens, &cache, &dlogits, &mut g);
    Ok((loss, g))
}

/// Mean loss and gradient over a B x L batch. Sequences are processed in
/// parallel; partial sums are combined in a fixed order.
pub(crate) fn batch_loss_and_grad(
    cfg: &TransformerConfig,
    p: &TransformerParams,
    tokens: ArrayView2<'_, usize>,
    dropout_seed: Option<u64>,
) -> Result<(f64, TransformerParams)> {
    let b = tokens.nrows();
    if b == 0 {
        return invalid("empty batch");
    }
    debug_assert_eq!(cfg, &p.config);
    let chunk = b.div_ceil(REDUCE_CHUNKS);
    let partials: Vec<Result<(f64, TransformerParams)>> = (0..b.div_ceil(chunk))
        .into_par_iter()
        .map(|k| {
            let mut loss = 0.0;
            let mut acc = TransformerParams::zeros(&p.config);
            for lane in k * chunk..((k + 1) * chunk).min(b) {
                let row = tokens.row(lane).to_vec();
                let rng = dropout_seed.map(|s| child_rng(s, &[lane as u64]));
                let (l, g) = sequence_loss_and_grad(p, &row, rng)?;
                loss += l;
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = TransformerParams::zeros(&p.config);
    for part in partials {
        let (l, g) = part?;
        total += l;
        grads.add_assign(&g);
    }
    let scale = 1.0 / b as f64;
    for (_, mut t) in grads.named_mut() {
        t *= scale;
    }
    Ok((total * scale, grads))
}

pub(crate) fn batch_loss(cfg: &TransformerConfig, p: &TransformerParams, tokens: ArrayView2<'_, usize>) -> Result<f64> {
    let b = tokens.nrows();
    if b == 0 {
        return invalid("empty batch");
    }
    let losses: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|lane| {
            let row = tokens.row(lane).to_vec();
            let logits = transformer_forward(&row, p, cfg.directionality)?;
            Ok(cross_entropy(logits.view(), &seq_targets(&row))?.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / b as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::array;

    fn tiny(dir: Directionality) -> TransformerParams {
        let cfg = TransformerConfig {
            vocab: 6,
            d_model: 8,
            heads: 2,
            stacks: 2,
            d_ff: 12,
            dropout: 0.0,
            max_len: 32,
            directionality: dir,
        };
        TransformerParams::init(&cfg, &mut rng_from_seed(4))
    }

    #[test]
    fn singleton_attention_returns_v() {
        let q = array![[0.3, -1.0]];
        let k = array![[2.0, 0.5]];
        let v = array![[7.0, -3.0, 1.0]];
        let z = scaled_attention(q.view(), k.view(), v.view(), None).unwrap();
        assert_eq!(z, v);
    }

    #[test]
    fn equal_scores_average_values() {
        let q = Array2::zeros((2, 3));
        let k = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let v = Array2::from_shape_fn((4, 2), |(i, j)| (i * 3 + j) as f64);
        let z = scaled_attention(q.view(), k.view(), v.view(), None).unwrap();
        let mean = v.mean_axis(Axis(0)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((z[[r, c]] - mean[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_first_row_sees_itself() {
        let mut rng = rng_from_seed(1);
        let m = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0));
        let z = scaled_attention(m.view(), m.view(), m.view(), Some(causal_mask(3).view())).unwrap();
        assert_eq!(z.row(0), m.row(0));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let m = Array2::ones((2, 2));
        let mut mask = causal_mask(2);
        mask[[0, 0]] = false;
        assert!(scaled_attention(m.view(), m.view(), m.view(), Some(mask.view())).is_err());
    }

    #[test]
    fn ffn_with_zero_first_layer_is_bias() {
        let mut rng = rng_from_seed(2);
        let mut p = FfnParams::init(3, 5, &mut rng);
        p.w1.fill(0.0);
        p.b2 = array![1.0, -2.0, 0.5];
        let z = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let y = ffn(z.view(), &p);
        for row in y.rows() {
            assert_eq!(row, p.b2.view());
        }
    }

    #[test]
    fn ffn_matches_transcription() {
        let mut rng = rng_from_seed(5);
        let mut p = FfnParams::init(3, 4, &mut rng);
        p.b1 = array![0.1, -0.2, 0.3, 0.0];
        p.b2 = array![0.05, 0.0, -0.1];
        let z = Array2::from_shape_simple_fn((2, 3), || rng.random_range(-1.0..1.0));
        let y = ffn(z.view(), &p);
        for r in 0..2 {
            for o in 0..3 {
                let mut acc = p.b2[o];
                for h in 0..4 {
                    let mut pre = p.b1[h];
                    for i in 0..3 {
                        pre += z[[r, i]] * p.w1[[i, h]];
                    }
                    acc += pre.max(0.0) * p.w2[[h, o]];
                }
                assert!((y[[r, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unidirectional_is_causal_bidirectional_leaks() {
        let toks = [0, 1, 2, 3, 4, 5, 0, 1];
        let mut pert = toks;
        pert[5] = 2;
        let uni = tiny(Directionality::Unidirectional);
        let a = transformer_forward(&toks, &uni, Directionality::Unidirectional).unwrap();
        let b = transformer_forward(&pert, &uni, Directionality::Unidirectional).unwrap();
        for t in 0..5 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(5), b.row(5));

        let a = transformer_forward(&toks, &uni, Directionality::Bidirectional).unwrap();
        let b = transformer_forward(&pert, &uni, Directionality::Bidirectional).unwrap();
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn overlong_window_rejected() {
        let p = tiny(Directionality::Unidirectional);
        assert!(transformer_forward(&[0; 33], &p, Directionality::Unidirectional).is_err());
        assert!(transformer_forward(&[6], &p, Directionality::Unidirectional).is_err());
    }

    #[test]
    fn position_table_values() {
        let pe = positional_table(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[2, 2]] - (2.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
