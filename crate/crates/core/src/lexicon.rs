//! Summed word, position and segment embeddings.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Var};
use crate::vocab::{TokenBatch, TokenSequence};

pub const EMBEDDING_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub word: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d: usize,
}

impl EmbeddingTables {
    pub fn new<F: Real>(
        params: &mut ParamStore<F>,
        vocab_size: usize,
        max_seq_len: usize,
        d: usize,
        rng: &mut Xoshiro256pp,
    ) -> Self {
        let word = params.normal("lexicon.word", &[vocab_size, d], EMBEDDING_INIT_STD, rng);
        let position = params.normal("lexicon.position", &[max_seq_len, d], EMBEDDING_INIT_STD, rng);
        let segment = params.normal("lexicon.segment", &[2, d], EMBEDDING_INIT_STD, rng);
        Self {
            word,
            position,
            segment,
            vocab_size,
            max_seq_len,
            d,
        }
    }

    /// `[rows·seq_len × d]` embeddings; row `r·seq_len + i` is
    /// `word[tok] + position[i] + segment[seg]`.
    pub fn embed<F: Real>(&self, tape: &mut Tape<F>, params: &ParamStore<F>, batch: &TokenBatch) -> Result<Var> {
        if batch.seq_len > self.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len, self.max_seq_len
            )));
        }
        let word = params.on_tape(tape, self.word);
        let position = params.on_tape(tape, self.position);
        let segment = params.on_tape(tape, self.segment);
        let w = tape.embedding_gather(word, &batch.token_ids)?;
        let pos_ids: Vec<usize> = (0..batch.rows * batch.seq_len).map(|i| i % batch.seq_len).collect();
        let p = tape.embedding_gather(position, &pos_ids)?;
        let s = tape.embedding_gather(segment, &batch.segment_ids)?;
        let wp = tape.add(w, p)?;
        tape.add(wp, s)
    }
}

/// Embeds one sequence as an `[m × d]` matrix.
pub fn embed_sequence<F: Real>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    tables: &EmbeddingTables,
    seq: &TokenSequence,
) -> Result<Var> {
    let batch = TokenBatch::from_sequences(core::slice::from_ref(seq))?;
    tables.embed(tape, params, &batch)
}
