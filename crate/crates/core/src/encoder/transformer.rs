use alloc::format;
use alloc::vec::Vec;

use super::{EncoderConfig, Linear};
use crate::error::Result;
use crate::model::Ctx;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::TokenBatch;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Additive attention bias for padded key positions.
pub const MASK_BIAS: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_in: Linear,
    ffn_out: Linear,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Post-norm Transformer stack over layer-normalized embeddings:
/// attention, add, norm, GELU FFN, add, norm. The key projection has no
/// bias, since a per-query shift of the scores leaves the softmax unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    input_gain: ParamId,
    input_bias: ParamId,
    layers: Vec<Layer>,
    d: usize,
    n_heads: usize,
    dropout: f64,
}

fn split_heads_index(rows: usize, m: usize, heads: usize, dh: usize) -> Vec<usize> {
    let d = heads * dh;
    let mut src = Vec::with_capacity(rows * m * d);
    for r in 0..rows {
        for h in 0..heads {
            for t in 0..m {
                for j in 0..dh {
                    src.push((r * m + t) * d + h * dh + j);
                }
            }
        }
    }
    src
}

fn merge_heads_index(rows: usize, m: usize, heads: usize, dh: usize) -> Vec<usize> {
    let d = heads * dh;
    let mut src = Vec::with_capacity(rows * m * d);
    for r in 0..rows {
        for t in 0..m {
            for h in 0..heads {
                for j in 0..dh {
                    src.push(((r * heads + h) * m + t) * dh + j);
                }
            }
        }
    }
    src
}

impl TransformerEncoder {
    pub fn new<F: Real>(config: &EncoderConfig, params: &mut ParamStore<F>, rng: &mut Xoshiro256pp) -> Self {
        let d = config.d;
        let input_gain = params.add("encoder.input_ln.gain", Tensor::ones(&[d]));
        let input_bias = params.zeros("encoder.input_ln.bias", &[d]);
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                Layer {
                    query: Linear::new(params, &format!("{p}.attn.query"), d, d, rng),
                    key: Linear::without_bias(params, &format!("{p}.attn.key"), d, d, rng),
                    value: Linear::new(params, &format!("{p}.attn.value"), d, d, rng),
                    output: Linear::new(params, &format!("{p}.attn.output"), d, d, rng),
                    ln1_gain: params.add(format!("{p}.ln1.gain"), Tensor::ones(&[d])),
                    ln1_bias: params.zeros(format!("{p}.ln1.bias"), &[d]),
                    ffn_in: Linear::new(params, &format!("{p}.ffn.in"), d, config.ffn_dim, rng),
                    ffn_out: Linear::new(params, &format!("{p}.ffn.out"), config.ffn_dim, d, rng),
                    ln2_gain: params.add(format!("{p}.ln2.gain"), Tensor::ones(&[d])),
                    ln2_bias: params.zeros(format!("{p}.ln2.bias"), &[d]),
                }
            })
            .collect();
        Self {
            input_gain,
            input_bias,
            layers,
            d,
            n_heads: config.n_heads,
            dropout: config.dropout_prob,
        }
    }

    /// Returns the hidden states and, per layer, the `[rows·heads × m × m]`
    /// attention weights.
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        embeddings: Var,
        batch: &TokenBatch,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let (rows, m, heads) = (batch.rows, batch.seq_len, self.n_heads);
        let dh = self.d / heads;
        let split = split_heads_index(rows, m, heads, dh);
        let merge = merge_heads_index(rows, m, heads, dh);
        let mut bias = Tensor::<F>::zeros(&[rows * heads, m, m]);
        for r in 0..rows {
            let mask = batch.row_mask(r);
            for h in 0..heads {
                for q in 0..m {
                    let base = ((r * heads + h) * m + q) * m;
                    for (k, &mk) in mask.iter().enumerate() {
                        if mk == 0 {
                            bias.data_mut()[base + k] = F::lit(MASK_BIAS);
                        }
                    }
                }
            }
        }
        let scale = F::lit(1.0 / (dh as f64).sqrt());
        let eps = F::lit(LAYER_NORM_EPS);

        let g0 = params.on_tape(tape, self.input_gain);
        let b0 = params.on_tape(tape, self.input_bias);
        let x0 = tape.layer_norm(embeddings, g0, b0, eps)?;
        let mut x = tape.dropout(x0, self.dropout, ctx.rng())?;
        let mut attentions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.query.forward(tape, params, x)?;
            let k = layer.key.forward(tape, params, x)?;
            let v = layer.value.forward(tape, params, x)?;
            let q = tape.permute(q, &[rows * heads, m, dh], split.clone())?;
            let k = tape.permute(k, &[rows * heads, m, dh], split.clone())?;
            let v = tape.permute(v, &[rows * heads, m, dh], split.clone())?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.add_const(scores, &bias)?;
            let probs = tape.softmax(scores, 2)?;
            attentions.push(probs);
            let mixed = tape.batch_matmul(probs, v, false)?;
            let mixed = tape.permute(mixed, &[rows * m, self.d], merge.clone())?;
            let attn_out = layer.output.forward(tape, params, mixed)?;
            let attn_out = tape.dropout(attn_out, self.dropout, ctx.rng())?;
            let res = tape.add(x, attn_out)?;
            let g1 = params.on_tape(tape, layer.ln1_gain);
            let b1 = params.on_tape(tape, layer.ln1_bias);
            let h = tape.layer_norm(res, g1, b1, eps)?;

            let f = layer.ffn_in.forward(tape, params, h)?;
            let f = tape.gelu(f);
            let f = layer.ffn_out.forward(tape, params, f)?;
            let f = tape.dropout(f, self.dropout, ctx.rng())?;
            let res = tape.add(h, f)?;
            let g2 = params.on_tape(tape, layer.ln2_gain);
            let b2 = params.on_tape(tape, layer.ln2_bias);
            x = tape.layer_norm(res, g2, b2, eps)?;
        }
        Ok((x, attentions))
    }
}
