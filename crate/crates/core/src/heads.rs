//! Task-specific output layers, their losses and decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, Label};
use crate::encoder::Linear;
use crate::error::{Error, Result};
use crate::model::Ctx;
use crate::param::ParamStore;
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Targets, Var};
use crate::task::{TaskConfig, TaskType};
use crate::tensor::Tensor;
use crate::vocab::{TokenBatch, TokenSequence, MASK, RESERVED};

/// Additive logit bias at padded span positions.
pub const SPAN_MASK_BIAS: f64 = -1e9;
pub const DEFAULT_MAX_SPAN: usize = 30;
pub const MLM_MASK_PROB: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classification(usize),
    Regression,
    Ranking,
    Span,
    SequenceLabeling(usize),
    /// Vocabulary-sized output.
    MaskedLm(usize),
}

impl HeadKind {
    pub fn from_config(config: &TaskConfig, vocab_size: usize) -> Result<Self> {
        let classes = || -> Result<usize> {
            match config.classes() {
                Some(k) if k >= 2 => Ok(k),
                Some(k) => Err(Error::config(format!("task {}: n_class must be at least 2, got {k}", config.name))),
                None => Err(Error::config(format!("task {}: n_class is required for {}", config.name, config.task_type))),
            }
        };
        Ok(match config.task_type {
            TaskType::Classification => HeadKind::Classification(classes()?),
            TaskType::Regression => HeadKind::Regression,
            TaskType::Ranking => HeadKind::Ranking,
            TaskType::Span => HeadKind::Span,
            TaskType::SequenceLabeling => HeadKind::SequenceLabeling(classes()?),
            TaskType::MaskedLm => HeadKind::MaskedLm(vocab_size),
        })
    }

    /// Projection width.
    pub fn width(self) -> usize {
        match self {
            HeadKind::Classification(k) | HeadKind::SequenceLabeling(k) | HeadKind::MaskedLm(k) => k,
            HeadKind::Regression | HeadKind::Ranking => 1,
            HeadKind::Span => 2,
        }
    }

    pub fn token_level(self) -> bool {
        matches!(self, HeadKind::Span | HeadKind::SequenceLabeling(_) | HeadKind::MaskedLm(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub task: String,
    pub kind: HeadKind,
    pub proj: Linear,
    pub dropout: f64,
    pub max_span: usize,
    pub mask_prob: f64,
}

/// Gold targets of a prepared batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    Classes(Vec<usize>),
    Values(Vec<f64>),
    /// Positive index within each ranking group.
    Positives(Vec<usize>),
    Spans(Vec<(usize, usize)>),
    /// One target per entry of `Prepared::positions`.
    Tokens(Vec<usize>),
}

/// A batch ready for the forward pass: inputs after any corruption, the
/// flat token positions a token-level head reads, and gold targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub tokens: TokenBatch,
    pub groups: Vec<usize>,
    pub positions: Vec<usize>,
    pub gold: Gold,
}

impl Prepared {
    pub fn examples(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn group_ranges(&self) -> Vec<(usize, usize)> {
        let mut at = 0;
        self.groups
            .iter()
            .map(|&k| {
                let r = (at, k);
                at += k;
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    /// `[n × K]`.
    Classification(Var),
    /// `[n × 1]`.
    Regression(Var),
    /// `[Σk × 1]` candidate scores.
    Ranking(Var),
    /// Start and end logits, each `[n × m]`, padded positions masked.
    Span { start: Var, end: Var },
    /// Logits `[P × K]` at the prepared positions; `None` when there are none.
    Tokens(Option<Var>),
}

/// A (prediction, gold) pair scored by the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Class { pred: usize, gold: usize },
    Value { pred: f64, gold: f64 },
    Span { pred: (usize, usize), gold: (usize, usize) },
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Best `(s, e)` with `s ≤ e ≤ s + max_span`, both unmasked, by
/// `start[s] + end[e]`. Ties go to the smallest `s`, then the smallest `e`.
pub fn decode_span<F: Real>(start: &[F], end: &[F], mask: &[u8], max_span: usize) -> Result<(usize, usize)> {
    let m = start.len();
    if end.len() != m || mask.len() != m {
        return Err(Error::contract("span logits and mask differ in length"));
    }
    let mut best: Option<((usize, usize), F)> = None;
    for s in (0..m).filter(|&s| mask[s] != 0) {
        for e in (s..m.min(s + max_span + 1)).filter(|&e| mask[e] != 0) {
            let score = start[s] + end[e];
            if best.map_or(true, |(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    best.map(|(p, _)| p)
        .ok_or_else(|| Error::contract("cannot decode a span: every position is masked"))
}

/// Selects each non-special position with probability `mask_prob` and
/// applies the 80/10/10 replacement. Returns the corrupted sequence and the
/// `(position, original id)` pairs. Random replacements never draw reserved
/// ids.
pub fn mlm_corrupt(
    seq: &TokenSequence,
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut Xoshiro256pp,
) -> (TokenSequence, Vec<(usize, usize)>) {
    let mut out = seq.clone();
    let mut targets = Vec::new();
    for pos in 0..seq.len() {
        if seq.is_special(pos) {
            continue;
        }
        if rng.next_f64() >= mask_prob {
            continue;
        }
        targets.push((pos, seq.token_ids[pos]));
        let r = rng.next_f64();
        if r < 0.8 {
            out.token_ids[pos] = MASK;
        } else if r < 0.9 && vocab_size > RESERVED.len() {
            out.token_ids[pos] = RESERVED.len() + rng.below(vocab_size - RESERVED.len());
        }
    }
    (out, targets)
}

impl TaskHead {
    pub fn new<F: Real>(
        config: &TaskConfig,
        params: &mut ParamStore<F>,
        d: usize,
        vocab_size: usize,
        rng: &mut Xoshiro256pp,
    ) -> Result<Self> {
        if config.task_layer_type != "linear" {
            return Err(Error::config(format!(
                "task {}: unsupported task_layer_type {:?}; valid values: linear",
                config.name, config.task_layer_type
            )));
        }
        let kind = HeadKind::from_config(config, vocab_size)?;
        let proj = Linear::new(params, &format!("head.{}", config.name), d, kind.width(), rng);
        Ok(Self {
            task: config.name.clone(),
            kind,
            proj,
            dropout: config.dropout(),
            max_span: DEFAULT_MAX_SPAN,
            mask_prob: MLM_MASK_PROB,
        })
    }

    /// Builds the head's view of a batch. Masked-LM corruption draws from
    /// `rng`, which is required for that head only.
    pub fn prepare(&self, batch: &Batch, rng: Option<&mut Xoshiro256pp>) -> Result<Prepared> {
        if batch.task != self.task {
            return Err(Error::contract(format!(
                "batch of task {} routed to head {}",
                batch.task, self.task
            )));
        }
        let n = batch.len();
        let m = batch.tokens.seq_len;
        let wrong = |l: &Label| Error::data(format!("task {}: label {l:?} does not fit a {:?} head", self.task, self.kind));
        let mut tokens = batch.tokens.clone();
        let mut positions = Vec::new();
        let gold = match self.kind {
            HeadKind::Classification(k) => {
                let mut ids = Vec::with_capacity(n);
                for l in &batch.labels {
                    match l {
                        Label::Class(c) if *c < k => ids.push(*c),
                        other => return Err(wrong(other)),
                    }
                }
                Gold::Classes(ids)
            }
            HeadKind::Regression => {
                let mut vs = Vec::with_capacity(n);
                for l in &batch.labels {
                    match l {
                        Label::Value(v) => vs.push(*v),
                        other => return Err(wrong(other)),
                    }
                }
                Gold::Values(vs)
            }
            HeadKind::Ranking => {
                let mut ps = Vec::with_capacity(n);
                for (l, &k) in batch.labels.iter().zip(&batch.groups) {
                    match l {
                        Label::Positive(p) if *p < k && k >= 2 => ps.push(*p),
                        other => return Err(wrong(other)),
                    }
                }
                Gold::Positives(ps)
            }
            HeadKind::Span => {
                let mut spans = Vec::with_capacity(n);
                for (r, l) in batch.labels.iter().enumerate() {
                    match l {
                        Label::Span { start, end } if start <= end && *end < m && tokens.row_mask(r)[*end] == 1 => {
                            spans.push((*start, *end))
                        }
                        other => return Err(wrong(other)),
                    }
                }
                Gold::Spans(spans)
            }
            HeadKind::SequenceLabeling(k) => {
                let mut ids = Vec::new();
                for (r, l) in batch.labels.iter().enumerate() {
                    let Label::Tags(tags) = l else { return Err(wrong(l)) };
                    for (i, &t) in tags.iter().enumerate() {
                        let pos = i + 1;
                        if pos >= m || tokens.row_mask(r)[pos] == 0 {
                            return Err(Error::data(format!(
                                "task {}: uid {} has a label on a PAD position",
                                self.task, batch.uids[r]
                            )));
                        }
                        if t >= k {
                            return Err(Error::data(format!("task {}: tag id {t} ≥ n_class {k}", self.task)));
                        }
                        if !tokens.sequence(r).is_special(pos) {
                            positions.push(r * m + pos);
                            ids.push(t);
                        }
                    }
                }
                Gold::Tokens(ids)
            }
            HeadKind::MaskedLm(v) => {
                let rng = rng.ok_or_else(|| Error::contract("masked-LM batches need a corruption RNG"))?;
                let mut seqs = Vec::with_capacity(n);
                let mut ids = Vec::new();
                for r in 0..tokens.rows {
                    let (s, picked) = mlm_corrupt(&tokens.sequence(r), self.mask_prob, v, rng);
                    for (pos, id) in picked {
                        positions.push(r * m + pos);
                        ids.push(id);
                    }
                    seqs.push(s);
                }
                tokens = TokenBatch::from_sequences(&seqs)?;
                Gold::Tokens(ids)
            }
        };
        Ok(Prepared {
            tokens,
            groups: batch.groups.clone(),
            positions,
            gold,
        })
    }

    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        params: &ParamStore<F>,
        hidden: Var,
        pooled: Var,
        prep: &Prepared,
        ctx: &mut Ctx<'_>,
    ) -> Result<HeadOutput> {
        let (rows, m) = (prep.tokens.rows, prep.tokens.seq_len);
        Ok(match self.kind {
            HeadKind::Classification(_) | HeadKind::Regression | HeadKind::Ranking => {
                let x = tape.dropout(pooled, self.dropout, ctx.rng())?;
                let y = self.proj.forward(tape, params, x)?;
                match self.kind {
                    HeadKind::Classification(_) => HeadOutput::Classification(y),
                    HeadKind::Regression => HeadOutput::Regression(y),
                    _ => HeadOutput::Ranking(y),
                }
            }
            HeadKind::Span => {
                let x = tape.dropout(hidden, self.dropout, ctx.rng())?;
                let z = self.proj.forward(tape, params, x)?;
                let mut bias = Tensor::<F>::zeros(&[rows, m]);
                for (b, &mk) in bias.data_mut().iter_mut().zip(&prep.tokens.mask) {
                    if mk == 0 {
                        *b = F::lit(SPAN_MASK_BIAS);
                    }
                }
                let s = tape.slice_cols(z, 0, 1)?;
                let s = tape.reshape(s, &[rows, m])?;
                let start = tape.add_const(s, &bias)?;
                let e = tape.slice_cols(z, 1, 2)?;
                let e = tape.reshape(e, &[rows, m])?;
                let end = tape.add_const(e, &bias)?;
                HeadOutput::Span { start, end }
            }
            HeadKind::SequenceLabeling(_) | HeadKind::MaskedLm(_) => {
                if prep.positions.is_empty() {
                    HeadOutput::Tokens(None)
                } else {
                    let h = tape.gather_rows(hidden, &prep.positions)?;
                    let x = tape.dropout(h, self.dropout, ctx.rng())?;
                    HeadOutput::Tokens(Some(self.proj.forward(tape, params, x)?))
                }
            }
        })
    }

    /// The task loss over the whole batch.
    pub fn loss<F: Real>(&self, tape: &mut Tape<F>, out: &HeadOutput, prep: &Prepared) -> Result<Var> {
        match (out, &prep.gold) {
            (HeadOutput::Span { start, end }, Gold::Spans(spans)) => {
                let s: Vec<usize> = spans.iter().map(|p| p.0).collect();
                let e: Vec<usize> = spans.iter().map(|p| p.1).collect();
                let ls = tape.cross_entropy(*start, Targets::Hard(&s))?;
                let le = tape.cross_entropy(*end, Targets::Hard(&e))?;
                let sum = tape.add(ls, le)?;
                Ok(tape.scale(sum, F::lit(0.5)))
            }
            (HeadOutput::Tokens(None), Gold::Tokens(_)) => Ok(tape.constant(Tensor::scalar(F::zero()))),
            (HeadOutput::Tokens(Some(logits)), Gold::Tokens(ids)) => tape.cross_entropy(*logits, Targets::Hard(ids)),
            _ => {
                let all: Vec<usize> = (0..prep.examples()).collect();
                self.subset_loss(tape, out, prep, &all)
            }
        }
    }

    /// Mean hard loss over the listed examples (sequence-level heads).
    pub fn subset_loss<F: Real>(&self, tape: &mut Tape<F>, out: &HeadOutput, prep: &Prepared, rows: &[usize]) -> Result<Var> {
        let whole = rows.len() == prep.examples();
        match (out, &prep.gold) {
            (HeadOutput::Classification(logits), Gold::Classes(ids)) => {
                if whole {
                    return tape.cross_entropy(*logits, Targets::Hard(ids));
                }
                let z = tape.gather_rows(*logits, rows)?;
                let t: Vec<usize> = rows.iter().map(|&r| ids[r]).collect();
                tape.cross_entropy(z, Targets::Hard(&t))
            }
            (HeadOutput::Regression(pred), Gold::Values(vs)) => {
                let p = if whole { *pred } else { tape.gather_rows(*pred, rows)? };
                let t: Vec<f64> = rows.iter().map(|&r| vs[r]).collect();
                let t = tape.constant(Tensor::from_f64(&[rows.len(), 1], &t)?);
                tape.mse(p, t)
            }
            (HeadOutput::Ranking(scores), Gold::Positives(ps)) => {
                let ranges = prep.group_ranges();
                let mut total: Option<Var> = None;
                for &g in rows {
                    let z = group_row(tape, *scores, ranges[g])?;
                    let l = tape.cross_entropy(z, Targets::Hard(&[ps[g]]))?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.ok_or_else(|| Error::contract("empty ranking subset"))?;
                Ok(tape.scale(total, F::lit(1.0 / rows.len() as f64)))
            }
            _ => Err(Error::contract(format!(
                "per-example loss is not defined for a {:?} head",
                self.kind
            ))),
        }
    }

    /// Logit matrices whose rows are the head's predictive distributions
    /// (for regression, the raw predictions).
    pub fn views<F: Real>(&self, tape: &mut Tape<F>, out: &HeadOutput, prep: &Prepared) -> Result<Vec<Var>> {
        Ok(match out {
            HeadOutput::Classification(v) | HeadOutput::Regression(v) => vec![*v],
            HeadOutput::Ranking(scores) => {
                let mut vs = Vec::with_capacity(prep.examples());
                for r in prep.group_ranges() {
                    vs.push(group_row(tape, *scores, r)?);
                }
                vs
            }
            HeadOutput::Span { start, end } => vec![*start, *end],
            HeadOutput::Tokens(Some(v)) => vec![*v],
            HeadOutput::Tokens(None) => Vec::new(),
        })
    }

    /// Scored predictions for the metrics.
    pub fn outcomes<F: Real>(&self, tape: &Tape<F>, out: &HeadOutput, prep: &Prepared) -> Result<Vec<Outcome>> {
        let mut res = Vec::new();
        match (out, &prep.gold) {
            (HeadOutput::Classification(v), Gold::Classes(ids)) => {
                let t = tape.value(*v);
                for (r, &g) in ids.iter().enumerate() {
                    res.push(Outcome::Class { pred: argmax(t.row(r)), gold: g });
                }
            }
            (HeadOutput::Regression(v), Gold::Values(vs)) => {
                let t = tape.value(*v);
                for (r, &g) in vs.iter().enumerate() {
                    res.push(Outcome::Value {
                        pred: t.data()[r].as_f64(),
                        gold: g,
                    });
                }
            }
            (HeadOutput::Ranking(v), Gold::Positives(ps)) => {
                let t = tape.value(*v);
                for ((start, k), &g) in prep.group_ranges().into_iter().zip(ps) {
                    res.push(Outcome::Class {
                        pred: argmax(&t.data()[start..start + k]),
                        gold: g,
                    });
                }
            }
            (HeadOutput::Span { start, end }, Gold::Spans(spans)) => {
                let (ts, te) = (tape.value(*start), tape.value(*end));
                for (r, &g) in spans.iter().enumerate() {
                    let p = decode_span(ts.row(r), te.row(r), prep.tokens.row_mask(r), self.max_span)?;
                    res.push(Outcome::Span { pred: p, gold: g });
                }
            }
            (HeadOutput::Tokens(Some(v)), Gold::Tokens(ids)) => {
                let t = tape.value(*v);
                for (r, &g) in ids.iter().enumerate() {
                    res.push(Outcome::Class { pred: argmax(t.row(r)), gold: g });
                }
            }
            (HeadOutput::Tokens(None), _) => {}
            _ => return Err(Error::contract("head output does not match the prepared targets")),
        }
        Ok(res)
    }
}

/// Scores of one candidate group as a `[1 × k]` row.
pub(crate) fn group_row<F: Real>(tape: &mut Tape<F>, scores: Var, (start, k): (usize, usize)) -> Result<Var> {
    let ids: Vec<usize> = (start..start + k).collect();
    let g = tape.gather_rows(scores, &ids)?;
    tape.reshape(g, &[1, k])
}
