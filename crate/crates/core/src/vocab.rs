//! Word-level vocabulary, sentence-pair framing and padding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Counts lowercased whitespace tokens and keeps those seen at least
    /// `min_count` times, most frequent first, ties broken lexicographically.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any_line = false;
        for line in lines {
            any_line = true;
            for tok in tokenize(line) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any_line || counts.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t).collect())
    }

    /// Builds from the non-reserved tokens in id order (first token gets id 5).
    pub fn from_tokens(words: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::data(format!("invalid vocabulary token {w:?}")));
            }
            if index.contains_key(&w) {
                return Err(Error::data(format!("duplicate vocabulary token {w:?}")));
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a token, `UNK` when absent. Lookup is case-insensitive.
    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.index.get(&token.to_lowercase()).copied().unwrap_or(UNK),
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// One framed input `[CLS] x1 [SEP] (x2 [SEP])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

/// Framing result with the number of tokens of each side that survived
/// truncation (needed to realign token-level labels).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Framed {
    pub seq: TokenSequence,
    pub kept_first: usize,
    pub kept_second: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn is_special(&self, pos: usize) -> bool {
        matches!(self.token_ids[pos], PAD | CLS | SEP)
    }

    /// Checks the framing invariants.
    pub fn validate(&self) -> Result<()> {
        let m = self.token_ids.len();
        if m == 0 || self.segment_ids.len() != m || self.attention_mask.len() != m {
            return Err(Error::contract("token sequence fields differ in length"));
        }
        if self.token_ids[0] != CLS {
            return Err(Error::contract("token sequence must start with CLS"));
        }
        for i in 0..m {
            if (self.attention_mask[i] == 0) != (self.token_ids[i] == PAD) {
                return Err(Error::contract(format!("mask disagrees with padding at {i}")));
            }
        }
        if self.segment_ids.windows(2).any(|w| w[0] > w[1]) || self.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::contract("segment ids must be 0s followed by 1s"));
        }
        Ok(())
    }

    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut s = self.clone();
        s.token_ids.resize(len, PAD);
        s.segment_ids.resize(len, 0);
        s.attention_mask.resize(len, 0);
        s
    }
}

/// Frames already-mapped ids, trimming the longer side from the right until
/// the result fits `max_seq_len` (ties trim the first side).
pub fn frame_ids(first: &[usize], second: Option<&[usize]>, max_seq_len: usize) -> Result<Framed> {
    if first.is_empty() {
        return Err(Error::data("first text is empty"));
    }
    let specials = if second.is_some() { 3 } else { 2 };
    let min_len = specials + if second.is_some() { 2 } else { 1 };
    if max_seq_len < min_len {
        return Err(Error::config(format!(
            "max_seq_len {max_seq_len} is too small; need at least {min_len}"
        )));
    }
    let (mut a, mut b) = (first.len(), second.map_or(0, <[usize]>::len));
    while a + b + specials > max_seq_len {
        if a >= b {
            a -= 1;
        } else {
            b -= 1;
        }
    }
    let mut token_ids = Vec::with_capacity(a + b + specials);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&first[..a]);
    token_ids.push(SEP);
    let first_len = token_ids.len();
    if let Some(second) = second {
        token_ids.extend_from_slice(&second[..b]);
        token_ids.push(SEP);
    }
    let m = token_ids.len();
    let mut segment_ids = vec![0; m];
    for s in segment_ids.iter_mut().skip(first_len) {
        *s = 1;
    }
    Ok(Framed {
        seq: TokenSequence {
            token_ids,
            segment_ids,
            attention_mask: vec![1; m],
        },
        kept_first: a,
        kept_second: b,
    })
}

/// Tokenizes and frames one input or a sentence pair.
pub fn encode_pair(x1: &str, x2: Option<&str>, vocab: &Vocabulary, max_seq_len: usize) -> Result<TokenSequence> {
    let first = vocab.encode_text(x1);
    let second = x2.map(|t| vocab.encode_text(t));
    Ok(frame_ids(&first, second.as_deref(), max_seq_len)?.seq)
}

/// Sequences right-padded to a common length, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub rows: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::contract("cannot batch zero sequences"));
        }
        let seq_len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut out = Self {
            rows: seqs.len(),
            seq_len,
            token_ids: Vec::with_capacity(seqs.len() * seq_len),
            segment_ids: Vec::with_capacity(seqs.len() * seq_len),
            mask: Vec::with_capacity(seqs.len() * seq_len),
        };
        for s in seqs {
            let p = s.padded(seq_len);
            out.token_ids.extend(p.token_ids);
            out.segment_ids.extend(p.segment_ids);
            out.mask.extend(p.attention_mask);
        }
        Ok(out)
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn row_tokens(&self, r: usize) -> &[usize] {
        &self.token_ids[r * self.seq_len..(r + 1) * self.seq_len]
    }

    pub fn real_len(&self, r: usize) -> usize {
        self.row_mask(r).iter().filter(|&&m| m == 1).count()
    }

    pub fn sequence(&self, r: usize) -> TokenSequence {
        let range = r * self.seq_len..(r + 1) * self.seq_len;
        TokenSequence {
            token_ids: self.token_ids[range.clone()].to_vec(),
            segment_ids: self.segment_ids[range.clone()].to_vec(),
            attention_mask: self.mask[range].to_vec(),
        }
    }
}
