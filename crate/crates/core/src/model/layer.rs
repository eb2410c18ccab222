use rand::RngCore;
use serde::Serialize;

use super::params::LayerSlots;
use crate::numerics::{Real, Tape, Tensor, Var, LN_EPS};
use crate::tokenizer::TokenMeta;

/// Dropout rate and the stream its masks are drawn from.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Head-averaged attention of one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub layer: usize,
    /// `[n_tokens × n_tokens]`, row `i` is where token `i` attends.
    pub weights: Tensor<f64>,
    pub meta: Vec<TokenMeta>,
}

/// One pre-norm layer on tokens stored as rows of `z` (`[n × d]`):
/// `y = z + Attn(LN₁(z))`, `z' = y + LN₂(FFN(y))`.
///
/// Returns the new tokens and, when `record` is set, the head-averaged
/// attention matrix.
pub fn tf_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    z: Var,
    vars: &[Var],
    slots: &LayerSlots,
    heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
    record: bool,
) -> (Var, Option<Tensor<f64>>) {
    let p = |i: usize| vars[i];
    let d = tape.value(z).cols();
    let n = tape.value(z).rows();
    let dh = d / heads;
    let h = tape.layer_norm(z, p(slots.ln1_gamma), p(slots.ln1_beta), T::lit(LN_EPS));
    let q = tape.linear(h, p(slots.wq), p(slots.bq));
    let k = tape.linear(h, p(slots.wk), p(slots.bk));
    let v = tape.linear(h, p(slots.wv), p(slots.bv));
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut avg = record.then(|| Tensor::<f64>::zeros(&[n, n]));
    for i in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, i * dh, dh),
                tape.slice_cols(k, i * dh, dh),
                tape.slice_cols(v, i * dh, dh),
            )
        };
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        if let Some(acc) = avg.as_mut() {
            for (a, &w) in acc.data_mut().iter_mut().zip(tape.value(weights).data()) {
                *a += w.as_f64() / heads as f64;
            }
        }
        outs.push(tape.matmul(weights, vh));
    }
    let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let mut attn = tape.linear(o, p(slots.wo), p(slots.bo));
    if let Some(dr) = dropout.as_deref_mut() {
        attn = tape.dropout(attn, dr.rate, dr.rng);
    }
    let y = tape.add(z, attn);
    let f = tape.linear(y, p(slots.ff1_w), p(slots.ff1_b));
    let mut f = tape.gelu(f);
    if let Some(dr) = dropout {
        f = tape.dropout(f, dr.rate, dr.rng);
    }
    let f = tape.linear(f, p(slots.ff2_w), p(slots.ff2_b));
    let f = tape.layer_norm(f, p(slots.ln2_gamma), p(slots.ln2_beta), T::lit(LN_EPS));
    (tape.add(y, f), avg)
}
