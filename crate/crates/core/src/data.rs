//! Encoded examples and task-homogeneous padded batches.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{splitmix64, Xoshiro256pp, STREAM_SHUFFLE};
use crate::vocab::{TokenBatch, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
    /// Index of the positive candidate within a ranking group.
    Positive(usize),
    /// Inclusive token positions in the framed sequence.
    Span { start: usize, end: usize },
    /// One label per real token, aligned with positions `1..=n`.
    Tags(Vec<usize>),
    /// Plain text (masked-LM targets come from corruption).
    None,
}

/// One encoded example. Ranking examples carry one sequence per candidate;
/// every other format carries exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub uid: String,
    pub inputs: Vec<TokenSequence>,
    pub label: Label,
}

impl Example {
    pub fn new(uid: impl Into<String>, input: TokenSequence, label: Label) -> Self {
        Self {
            uid: uid.into(),
            inputs: alloc::vec![input],
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub task: String,
    pub uids: Vec<String>,
    /// All sequences of the batch, candidates of a group adjacent.
    pub tokens: TokenBatch,
    /// Sequences per example (1 except for ranking).
    pub groups: Vec<usize>,
    pub labels: Vec<Label>,
}

impl Batch {
    pub fn from_examples(task: &str, examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("cannot build an empty batch"));
        }
        let seqs: Vec<TokenSequence> = examples.iter().flat_map(|e| e.inputs.iter().cloned()).collect();
        Ok(Self {
            task: String::from(task),
            uids: examples.iter().map(|e| e.uid.clone()).collect(),
            tokens: TokenBatch::from_sequences(&seqs)?,
            groups: examples.iter().map(|e| e.inputs.len()).collect(),
            labels: examples.iter().map(|e| e.label.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uids.is_empty()
    }

    /// First sequence row of each example.
    pub fn group_starts(&self) -> Vec<usize> {
        let mut at = 0;
        self.groups
            .iter()
            .map(|&k| {
                let s = at;
                at += k;
                s
            })
            .collect()
    }
}

/// Shuffle order for `(seed, epoch)`.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut key = seed ^ 0x6a09_e667_f3bc_c908;
    let key = splitmix64(&mut key) ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = Xoshiro256pp::stream(key, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
}

/// Deterministically shuffled batches; the last batch may be short.
pub fn make_batches(task: &str, examples: &[Example], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let order = shuffled_order(examples.len(), seed, epoch);
    batches_in_order(task, examples, &order, batch_size)
}

/// Batches in file order (evaluation).
pub fn sequential_batches(task: &str, examples: &[Example], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    batches_in_order(task, examples, &order, batch_size)
}

fn batches_in_order(task: &str, examples: &[Example], order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let picked: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(task, &picked)
        })
        .collect()
}

/// Checks uid uniqueness and that every label agrees with its input.
pub fn validate_examples(task: &str, examples: &[Example]) -> Result<()> {
    let mut seen = alloc::collections::BTreeSet::new();
    for e in examples {
        if !seen.insert(e.uid.as_str()) {
            return Err(Error::data(format!("task {task}: duplicate uid {:?}", e.uid)));
        }
        for s in &e.inputs {
            s.validate()?;
        }
        match &e.label {
            Label::Positive(p) if *p >= e.inputs.len() => {
                return Err(Error::data(format!("task {task}: uid {} positive index {p} out of range", e.uid)));
            }
            Label::Span { start, end } if start > end || *end >= e.inputs[0].real_len() => {
                return Err(Error::data(format!("task {task}: uid {} span out of range", e.uid)));
            }
            Label::Tags(tags) if tags.len() + 2 > e.inputs[0].real_len() => {
                return Err(Error::data(format!("task {task}: uid {} labels a PAD position", e.uid)));
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{frame_ids, CLS, PAD};

    fn ex(i: usize, len: usize) -> Example {
        let ids: Vec<usize> = (0..len).map(|j| 5 + j).collect();
        let seq = frame_ids(&ids, None, 64).unwrap().seq;
        Example::new(format!("u{i}"), seq, Label::Class(i % 2))
    }

    #[test]
    fn batch_sizes_keep_partial_tail() {
        let xs: Vec<Example> = (0..10).map(|i| ex(i, 2)).collect();
        let b = make_batches("t", &xs, 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Batch::len).collect::<Vec<_>>(), [4, 4, 2]);
    }

    #[test]
    fn order_is_deterministic_per_seed_and_epoch() {
        let xs: Vec<Example> = (0..20).map(|i| ex(i, 2)).collect();
        let a = make_batches("t", &xs, 3, 7, 1).unwrap();
        let b = make_batches("t", &xs, 3, 7, 1).unwrap();
        let c = make_batches("t", &xs, 3, 7, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn padding_to_batch_max() {
        let a = ex(0, 1);
        let b = ex(1, 3);
        let batch = Batch::from_examples("t", &[&a, &b]).unwrap();
        assert_eq!(batch.tokens.seq_len, 5);
        assert_eq!(batch.tokens.row_mask(0), &[1, 1, 1, 0, 0]);
        assert_eq!(batch.tokens.row_mask(1), &[1, 1, 1, 1, 1]);
        assert_eq!(batch.tokens.row_tokens(0)[0], CLS);
        assert_eq!(batch.tokens.row_tokens(0)[4], PAD);
    }

    #[test]
    fn ranking_groups_stay_whole() {
        let seq = ex(0, 2).inputs[0].clone();
        let xs: Vec<Example> = (0..5)
            .map(|i| Example {
                uid: format!("g{i}"),
                inputs: alloc::vec![seq.clone(); 3],
                label: Label::Positive(1),
            })
            .collect();
        for b in make_batches("r", &xs, 2, 1, 0).unwrap() {
            assert!(b.groups.iter().all(|&k| k == 3));
            assert_eq!(b.tokens.rows, 3 * b.len());
        }
    }

    #[test]
    fn duplicate_uid_rejected() {
        let xs = [ex(0, 2), ex(0, 2)];
        assert!(validate_examples("t", &xs).is_err());
    }
}
