//! Central finite-difference check of analytic gradients.

use super::batch::Batch;
use super::lstm::LstmState;
use super::{Model, ParamTensors};
use crate::error::Result;

/// Per-tensor comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    /// `|a - n| / (|a| + |n|)` over the whole tensor (0 when both vanish).
    pub rel_error: f64,
}

/// Compare `loss_and_grad` (dropout off) against central differences with
/// step `h` for every parameter entry.
pub fn gradient_check(model: &Model, batch: &Batch, carry: Option<&LstmState>, h: f64) -> Result<Vec<TensorCheck>> {
    let analytic = model.loss_and_grad(batch, carry, None)?.grads;
    let mut probe = model.clone();
    let names: Vec<(String, usize)> = model.params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let mut out = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(len);
        for k in 0..len {
            let orig = nudge(&mut probe, ti, k, None);
            nudge(&mut probe, ti, k, Some(orig + h));
            let up = probe.loss(batch, carry)?;
            nudge(&mut probe, ti, k, Some(orig - h));
            let down = probe.loss(batch, carry)?;
            nudge(&mut probe, ti, k, Some(orig));
            numeric.push((up - down) / (2.0 * h));
        }
        let a = analytic.named();
        let a: Vec<f64> = a[ti].1.iter().copied().collect();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push(TensorCheck { name, len, rel_error });
    }
    Ok(out)
}

/// Read entry `k` of tensor `ti`, optionally overwriting it. Returns the old value.
fn nudge(model: &mut Model, ti: usize, k: usize, set: Option<f64>) -> f64 {
    let mut tensors = model.params.named_mut();
    let slot = tensors[ti].1.iter_mut().nth(k).expect("index in range");
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
