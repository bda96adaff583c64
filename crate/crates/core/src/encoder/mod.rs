//! Contextual encoders mapping lexicon embeddings to the shared matrix of
//! per-token vectors, plus the first-token pooler.

mod lstm;
mod transformer;

pub use lstm::LstmEncoder;
pub use transformer::TransformerEncoder;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Ctx;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Var};
use crate::vocab::TokenBatch;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Transformer,
    Lstm,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderKind::Transformer),
            "lstm" => Ok(EncoderKind::Lstm),
            other => Err(Error::config(format!(
                "unknown encoder kind {other:?}; valid values: transformer, lstm"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub n_layers: usize,
    /// Hidden width; even, and divisible by `n_heads` for Transformers.
    pub d: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout_prob: f64,
}

impl EncoderConfig {
    pub fn transformer(n_layers: usize, d: usize, n_heads: usize, ffn_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Transformer,
            n_layers,
            d,
            n_heads,
            ffn_dim,
            dropout_prob: 0.0,
        }
    }

    pub fn lstm(n_layers: usize, d: usize) -> Self {
        Self {
            kind: EncoderKind::Lstm,
            n_layers,
            d,
            n_heads: 1,
            ffn_dim: d,
            dropout_prob: 0.0,
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_prob = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.d % 2 != 0 {
            return Err(Error::config(format!("encoder width d={} must be even", self.d)));
        }
        if self.kind == EncoderKind::Transformer && self.d % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d={} is not divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::config(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        Ok(())
    }
}

/// Affine layer `x·W + b` with `W: [in × out]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Xavier-normal weights, zero bias.
    pub fn new<F: Real>(params: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Xoshiro256pp) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = params.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        let b = params.zeros(format!("{name}.bias"), &[fan_out]);
        Self { w, b: Some(b) }
    }

    /// Linear map `x·W` with no bias term.
    pub fn without_bias<F: Real>(params: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Xoshiro256pp) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = params.normal(format!("{name}.weight"), &[fan_in, fan_out], std, rng);
        Self { w, b: None }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, params: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = params.on_tape(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = params.on_tape(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Shared encoder output: `hidden` is `[rows·seq_len × d]` (one row per
/// token), `pooled` is `[rows × d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextualOutput {
    pub hidden: Var,
    pub pooled: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContextEncoder {
    Transformer(TransformerEncoder),
    Lstm(LstmEncoder),
}

impl ContextEncoder {
    pub fn new<F: Real>(config: &EncoderConfig, params: &mut ParamStore<F>, rng: &mut Xoshiro256pp) -> Result<Self> {
        config.validate()?;
        Ok(match config.kind {
            EncoderKind::Transformer => ContextEncoder::Transformer(TransformerEncoder::new(config, params, rng)),
            EncoderKind::Lstm => ContextEncoder::Lstm(LstmEncoder::new(config, params, rng)),
        })
    }

    /// Per-token contextual vectors for a padded batch.
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        embeddings: Var,
        batch: &TokenBatch,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let expected = batch.rows * batch.seq_len;
        if tape.value(embeddings).rows() != expected || batch.mask.len() != expected {
            return Err(Error::contract(format!(
                "mask length {} does not match {} embedding rows",
                batch.mask.len(),
                tape.value(embeddings).rows()
            )));
        }
        match self {
            ContextEncoder::Transformer(t) => Ok(t.encode(tape, params, embeddings, batch, ctx)?.0),
            ContextEncoder::Lstm(l) => l.encode(tape, params, embeddings, batch, ctx),
        }
    }
}

/// `tanh(W·hidden[CLS] + b)` per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pooler {
    pub dense: Linear,
}

impl Pooler {
    pub fn new<F: Real>(params: &mut ParamStore<F>, d: usize, rng: &mut Xoshiro256pp) -> Self {
        Self {
            dense: Linear::new(params, "pooler", d, d, rng),
        }
    }

    pub fn pool<F: Real>(&self, tape: &mut Tape<F>, params: &ParamStore<F>, hidden: Var, rows: usize, seq_len: usize) -> Result<Var> {
        let first: Vec<usize> = (0..rows).map(|r| r * seq_len).collect();
        let cls = tape.gather_rows(hidden, &first)?;
        let z = self.dense.forward(tape, params, cls)?;
        Ok(tape.tanh(z))
    }
}

/// Convenience for a single sequence: pools row 0 of an `[m × d]` matrix.
pub fn pool_first_token<F: Real>(tape: &mut Tape<F>, params: &ParamStore<F>, pooler: &Pooler, hidden: Var) -> Result<Var> {
    let m = tape.value(hidden).rows();
    pooler.pool(tape, params, hidden, 1, m)
}
