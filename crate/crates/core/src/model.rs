//! The shareable model: lexicon encoder, context encoder, pooler and one
//! head per task.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::{ContextEncoder, EncoderConfig, Pooler};
use crate::error::{Error, Result};
use crate::heads::{HeadOutput, Prepared, TaskHead};
use crate::lexicon::EmbeddingTables;
use crate::param::ParamStore;
use crate::real::Real;
use crate::rng::{Xoshiro256pp, STREAM_INIT};
use crate::tape::{Tape, Var};
use crate::task::TaskConfig;
use crate::tensor::Tensor;
use crate::vocab::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context. Dropout is active only when an RNG is present.
#[derive(Debug)]
pub struct Ctx<'a> {
    pub mode: Mode,
    rng: Option<&'a mut Xoshiro256pp>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, rng: None }
    }

    pub fn train(rng: &'a mut Xoshiro256pp) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
        }
    }

    /// Training mode with dropout disabled.
    pub fn train_deterministic() -> Self {
        Self {
            mode: Mode::Train,
            rng: None,
        }
    }

    pub fn rng(&mut self) -> Option<&mut Xoshiro256pp> {
        self.rng.as_deref_mut()
    }
}

/// Architecture of a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tasks: Vec<TaskConfig>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size <= crate::vocab::RESERVED.len() {
            return Err(Error::config("vocabulary holds no ordinary tokens"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config("max_seq_len must be at least 3"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::config(format!("task {} declared twice", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F> {
    pub spec: ModelSpec,
    pub params: ParamStore<F>,
    pub lexicon: EmbeddingTables,
    pub encoder: ContextEncoder,
    pub pooler: Pooler,
    pub heads: Vec<TaskHead>,
}

/// Output of the shared layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shared {
    pub embeddings: Var,
    pub hidden: Var,
    pub pooled: Var,
}

impl<F: Real> ModelBundle<F> {
    /// Builds and initializes every parameter from `seed`. Parameter order
    /// is lexicon, encoder, pooler, then heads in task order.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Xoshiro256pp::stream(seed, STREAM_INIT);
        let mut params = ParamStore::new();
        let d = spec.encoder.d;
        let lexicon = EmbeddingTables::new(&mut params, spec.vocab_size, spec.max_seq_len, d, &mut rng);
        let encoder = ContextEncoder::new(&spec.encoder, &mut params, &mut rng)?;
        let pooler = Pooler::new(&mut params, d, &mut rng);
        let heads = spec
            .tasks
            .iter()
            .map(|t| TaskHead::new(t, &mut params, d, spec.vocab_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            params,
            lexicon,
            encoder,
            pooler,
            heads,
        })
    }

    pub fn head(&self, task: &str) -> Result<&TaskHead> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or_else(|| Error::contract(format!("model has no head for task {task}")))
    }

    pub fn task_config(&self, task: &str) -> Result<&TaskConfig> {
        self.spec
            .tasks
            .iter()
            .find(|t| t.name == task)
            .ok_or_else(|| Error::contract(format!("model has no task {task}")))
    }

    /// Encoder and pooler over precomputed lexicon embeddings.
    pub fn contextualize(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        embeddings: Var,
        tokens: &TokenBatch,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Var, Var)> {
        let hidden = self.encoder.encode(tape, params, embeddings, tokens, ctx)?;
        let pooled = self.pooler.pool(tape, params, hidden, tokens.rows, tokens.seq_len)?;
        Ok((hidden, pooled))
    }

    /// Full forward pass with an explicit parameter store.
    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        head: &TaskHead,
        prep: &Prepared,
        ctx: &mut Ctx<'_>,
    ) -> Result<(Shared, HeadOutput)> {
        let embeddings = self.lexicon.embed(tape, params, &prep.tokens)?;
        let (hidden, pooled) = self.contextualize(tape, params, embeddings, &prep.tokens, ctx)?;
        let out = head.forward(tape, params, hidden, pooled, prep, ctx)?;
        Ok((
            Shared {
                embeddings,
                hidden,
                pooled,
            },
            out,
        ))
    }

    pub fn forward(&self, tape: &mut Tape<F>, head: &TaskHead, prep: &Prepared, ctx: &mut Ctx<'_>) -> Result<(Shared, HeadOutput)> {
        self.forward_with(tape, &self.params, head, prep, ctx)
    }

    /// Forward pass from `embeddings + delta`. Perturbations belong to
    /// training only, so an evaluation context is refused.
    pub fn forward_perturbed(
        &self,
        tape: &mut Tape<F>,
        head: &TaskHead,
        prep: &Prepared,
        embeddings: Var,
        delta: &Tensor<F>,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput> {
        if ctx.mode == Mode::Eval {
            return Err(Error::contract("embedding perturbation is not available in eval mode"));
        }
        let e = tape.add_const(embeddings, delta)?;
        let (hidden, pooled) = self.contextualize(tape, &self.params, e, &prep.tokens, ctx)?;
        head.forward(tape, &self.params, hidden, pooled, prep, ctx)
    }

    /// Same forward pass from an already-built embedding variable (used
    /// by the perturbation ascent, where the embedding input is a leaf).
    pub(crate) fn forward_from(
        &self,
        tape: &mut Tape<F>,
        head: &TaskHead,
        prep: &Prepared,
        embeddings: Var,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput> {
        if ctx.mode == Mode::Eval {
            return Err(Error::contract("embedding perturbation is not available in eval mode"));
        }
        let (hidden, pooled) = self.contextualize(tape, &self.params, embeddings, &prep.tokens, ctx)?;
        head.forward(tape, &self.params, hidden, pooled, prep, ctx)
    }

    /// Converts every parameter to another precision.
    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        let mut params = ParamStore::new();
        for e in self.params.entries() {
            params.add(e.name.clone(), e.value.cast());
        }
        ModelBundle {
            spec: self.spec.clone(),
            params,
            lexicon: self.lexicon.clone(),
            encoder: self.encoder.clone(),
            pooler: self.pooler.clone(),
            heads: self.heads.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Example, Label};
    use crate::task::{DataFormat, TaskType};
    use crate::vocab::frame_ids;

    fn spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig::transformer(1, 8, 2, 16),
            vocab_size: 20,
            max_seq_len: 16,
            tasks: alloc::vec![TaskConfig::new("a", DataFormat::PremiseOnly, TaskType::Classification).with_classes(3)],
        }
    }

    #[test]
    fn construction_is_seeded() {
        let a = ModelBundle::<f64>::new(spec(), 1).unwrap();
        let b = ModelBundle::<f64>::new(spec(), 1).unwrap();
        let c = ModelBundle::<f64>::new(spec(), 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert_eq!(a.params.name(crate::param::ParamId(0)), "lexicon.word");
    }

    #[test]
    fn eval_mode_refuses_perturbation() {
        let m = ModelBundle::<f64>::new(spec(), 1).unwrap();
        let seq = frame_ids(&[5, 6], None, 16).unwrap().seq;
        let ex = Example::new("u", seq, Label::Class(0));
        let batch = Batch::from_examples("a", &[&ex]).unwrap();
        let head = m.head("a").unwrap();
        let prep = head.prepare(&batch, None).unwrap();
        let mut tape = Tape::new();
        let (shared, _) = m.forward(&mut tape, head, &prep, &mut Ctx::eval()).unwrap();
        let delta = Tensor::zeros(tape.shape(shared.embeddings));
        let err = m
            .forward_perturbed(&mut tape, head, &prep, shared.embeddings, &delta, &mut Ctx::eval())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(m.head("missing").is_err());
    }
}
