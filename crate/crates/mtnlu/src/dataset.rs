//! Tab-separated datasets, one example per line.
//!
//! | data_format | columns |
//! |---|---|
//! | PremiseOnly | uid, label, text |
//! | PremiseAndOneHypothesis | uid, label, premise, hypothesis |
//! | PremiseAndMultiHypothesis | uid, positive index, premise, `hyp1\|hyp2\|…` |
//! | Sequence | uid, space-separated labels, space-separated tokens |
//! | MRC | uid, start char, end char, context, question |
//! | PlainText | the raw line |
//!
//! MRC character offsets are a half-open range `[start, end)` over the
//! characters of the context. They must fall exactly on whitespace-token
//! boundaries; otherwise the example is dropped and counted, as are
//! answers cut off by truncation.

use std::collections::HashSet;
use std::path::Path;

use mtnlu_core::data::{Example, Label};
use mtnlu_core::task::{DataFormat, LabelMap, TaskConfig, TaskType};
use mtnlu_core::vocab::{frame_ids, Vocabulary};

use crate::error::{read_to_string, CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum RawLabel {
    Text(String),
    Positive(usize),
    Tags(Vec<String>),
    Chars { start: usize, end: usize },
    None,
}

/// One parsed line before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub line: usize,
    pub uid: String,
    pub label: RawLabel,
    /// Text fields in framing order; ranking rows hold the premise followed
    /// by every candidate.
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub examples: Vec<Example>,
    /// MRC examples whose answer did not survive tokenization or truncation.
    pub dropped: usize,
}

fn columns(format: DataFormat) -> usize {
    match format {
        DataFormat::PremiseOnly | DataFormat::Sequence => 3,
        DataFormat::PremiseAndOneHypothesis | DataFormat::PremiseAndMultiHypothesis => 4,
        DataFormat::Mrc => 5,
        DataFormat::PlainText => 1,
    }
}

fn at(origin: &str, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::data(format!("{origin}, line {line}: {msg}"))
}

/// Splits a dataset into rows. `origin` names the source in errors.
pub fn parse_rows(text: &str, format: DataFormat, task: &str, origin: &str) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if format == DataFormat::PlainText {
            if raw.trim().is_empty() {
                continue;
            }
            rows.push(Row {
                line,
                uid: format!("{task}-{line}"),
                label: RawLabel::None,
                texts: vec![raw.to_string()],
            });
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        let want = columns(format);
        if cols.len() != want {
            return Err(at(origin, line, format!("expected {want} tab-separated columns, found {}", cols.len())));
        }
        let uid = cols[0].to_string();
        if uid.is_empty() || uid.starts_with('#') {
            return Err(at(origin, line, format!("invalid uid {uid:?}")));
        }
        if !seen.insert(uid.clone()) {
            return Err(at(origin, line, format!("duplicate uid {uid:?}")));
        }
        let (label, texts) = match format {
            DataFormat::PremiseOnly => (RawLabel::Text(cols[1].into()), vec![cols[2].into()]),
            DataFormat::PremiseAndOneHypothesis => {
                (RawLabel::Text(cols[1].into()), vec![cols[2].into(), cols[3].into()])
            }
            DataFormat::PremiseAndMultiHypothesis => {
                let p: usize = cols[1]
                    .trim()
                    .parse()
                    .map_err(|_| at(origin, line, format!("positive index {:?} is not a number", cols[1])))?;
                let mut texts = vec![cols[2].to_string()];
                texts.extend(cols[3].split('|').map(String::from));
                let k = texts.len() - 1;
                if k < 2 || p >= k {
                    return Err(at(origin, line, format!("positive index {p} with {k} candidates")));
                }
                (RawLabel::Positive(p), texts)
            }
            DataFormat::Sequence => {
                let labels: Vec<String> = cols[1].split_whitespace().map(String::from).collect();
                let n_tokens = cols[2].split_whitespace().count();
                if labels.len() != n_tokens {
                    return Err(at(
                        origin,
                        line,
                        format!("{} labels for {n_tokens} tokens; sequences must align", labels.len()),
                    ));
                }
                (RawLabel::Tags(labels), vec![cols[2].into()])
            }
            DataFormat::Mrc => {
                let num = |s: &str, what: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| at(origin, line, format!("{what} {s:?} is not a character offset")))
                };
                let (start, end) = (num(cols[1], "start")?, num(cols[2], "end")?);
                if start >= end {
                    return Err(at(origin, line, format!("empty answer range {start}..{end}")));
                }
                (RawLabel::Chars { start, end }, vec![cols[3].into(), cols[4].into()])
            }
            DataFormat::PlainText => unreachable!(),
        };
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(at(origin, line, "empty text field"));
        }
        rows.push(Row { line, uid, label, texts });
    }
    Ok(rows)
}

/// Character ranges `[start, end)` of the whitespace tokens of `text`.
pub fn token_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

fn class_label(map: Option<&LabelMap>, text: &str) -> mtnlu_core::Result<usize> {
    match map {
        Some(m) => m.label_to_id(text),
        None => Err(mtnlu_core::Error::config("task declares no classes")),
    }
}

/// Encodes parsed rows for one task.
pub fn encode_rows(
    rows: &[Row],
    config: &TaskConfig,
    vocab: &Vocabulary,
    max_seq_len: usize,
    origin: &str,
) -> Result<Loaded> {
    let map = if config.task_type.needs_classes() { Some(config.label_map()?) } else { None };
    let mut examples = Vec::with_capacity(rows.len());
    let mut dropped = 0;
    for row in rows {
        let err = |e: mtnlu_core::Error| at(origin, row.line, e);
        let ids: Vec<Vec<usize>> = row.texts.iter().map(|t| vocab.encode_text(t)).collect();
        let example = match (&row.label, config.task_type) {
            (RawLabel::Text(t), TaskType::Classification) => {
                let framed = frame_ids(&ids[0], ids.get(1).map(Vec::as_slice), max_seq_len).map_err(err)?;
                Example::new(&row.uid, framed.seq, Label::Class(class_label(map.as_ref(), t).map_err(err)?))
            }
            (RawLabel::Text(t), TaskType::Regression) => {
                let v: f64 = t
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| at(origin, row.line, format!("regression target {t:?} is not a finite number")))?;
                let framed = frame_ids(&ids[0], ids.get(1).map(Vec::as_slice), max_seq_len).map_err(err)?;
                Example::new(&row.uid, framed.seq, Label::Value(v))
            }
            (RawLabel::Positive(p), TaskType::Ranking) => {
                let inputs = ids[1..]
                    .iter()
                    .map(|h| frame_ids(&ids[0], Some(h), max_seq_len).map(|f| f.seq))
                    .collect::<mtnlu_core::Result<Vec<_>>>()
                    .map_err(err)?;
                Example {
                    uid: row.uid.clone(),
                    inputs,
                    label: Label::Positive(*p),
                }
            }
            (RawLabel::Tags(tags), TaskType::SequenceLabeling) => {
                let framed = frame_ids(&ids[0], None, max_seq_len).map_err(err)?;
                let tags = tags[..framed.kept_first]
                    .iter()
                    .map(|t| class_label(map.as_ref(), t))
                    .collect::<mtnlu_core::Result<Vec<_>>>()
                    .map_err(err)?;
                Example::new(&row.uid, framed.seq, Label::Tags(tags))
            }
            (RawLabel::Chars { start, end }, TaskType::Span) => {
                let offsets = token_offsets(&row.texts[0]);
                let first = offsets.iter().position(|&(s, _)| s == *start);
                let last = offsets.iter().position(|&(_, e)| e == *end);
                let framed = frame_ids(&ids[0], Some(&ids[1]), max_seq_len).map_err(err)?;
                match (first, last) {
                    (Some(a), Some(b)) if a <= b && b < framed.kept_first => Example::new(
                        &row.uid,
                        framed.seq,
                        Label::Span { start: a + 1, end: b + 1 },
                    ),
                    _ => {
                        dropped += 1;
                        continue;
                    }
                }
            }
            (RawLabel::None, TaskType::MaskedLm) => {
                let framed = frame_ids(&ids[0], None, max_seq_len).map_err(err)?;
                Example::new(&row.uid, framed.seq, Label::None)
            }
            _ => {
                return Err(CliError::config(format!(
                    "task {}: data_format {} cannot feed task_type {}",
                    config.name, config.data_format, config.task_type
                )))
            }
        };
        examples.push(example);
    }
    Ok(Loaded { examples, dropped })
}

pub fn read_rows(path: &Path, config: &TaskConfig) -> Result<Vec<Row>> {
    let text = read_to_string(path, CliError::Data)?;
    parse_rows(&text, config.data_format, &config.name, &path.display().to_string())
}

pub fn load_dataset(path: &Path, config: &TaskConfig, vocab: &Vocabulary, max_seq_len: usize) -> Result<Loaded> {
    let rows = read_rows(path, config)?;
    encode_rows(&rows, config, vocab, max_seq_len, &path.display().to_string())
}

/// Vocabulary over every text field of the given rows.
pub fn build_vocab<'a>(rows: impl IntoIterator<Item = &'a Row>, min_count: usize) -> Result<Vocabulary> {
    let texts: Vec<&str> = rows
        .into_iter()
        .flat_map(|r| r.texts.iter().map(String::as_str))
        .collect();
    Ok(Vocabulary::build(texts, min_count)?)
}

/// Vocabulary file: one ordinary token per line, in id order.
pub fn vocab_to_text(vocab: &Vocabulary) -> String {
    let mut s = String::new();
    for w in vocab.words() {
        s.push_str(w);
        s.push('\n');
    }
    s
}

pub fn vocab_from_text(text: &str) -> Result<Vocabulary> {
    Ok(Vocabulary::from_tokens(text.lines().map(String::from).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nli() -> TaskConfig {
        TaskConfig::new("nli", DataFormat::PremiseAndOneHypothesis, TaskType::Classification)
            .with_labels(&["contradiction", "neutral", "entailment"])
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a b c d e f g the cat sat on mat"], 1).unwrap()
    }

    #[test]
    fn three_nli_lines() {
        let text = "u1\tneutral\ta b\tc\nu2\tentailment\td\te f\nu3\tcontradiction\tg\ta\n";
        let rows = parse_rows(text, DataFormat::PremiseAndOneHypothesis, "nli", "f").unwrap();
        let loaded = encode_rows(&rows, &nli(), &vocab(), 16, "f").unwrap();
        let labels: Vec<_> = loaded.examples.iter().map(|e| e.label.clone()).collect();
        assert_eq!(labels, vec![Label::Class(1), Label::Class(2), Label::Class(0)]);
    }

    #[test]
    fn short_line_names_line_one() {
        let err = parse_rows("u1\tneutral\n", DataFormat::PremiseAndOneHypothesis, "nli", "f").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn sequence_alignment_error() {
        let err = parse_rows("u1\tO O B\ta b c d\n", DataFormat::Sequence, "ner", "f").unwrap_err();
        assert!(err.to_string().contains("align"), "{err}");
    }

    #[test]
    fn offsets_of_whitespace_tokens() {
        assert_eq!(token_offsets(" the  cat sat"), vec![(1, 4), (6, 9), (10, 13)]);
    }

    #[test]
    fn mrc_spans_map_to_framed_positions_or_drop() {
        let config = TaskConfig::new("qa", DataFormat::Mrc, TaskType::Span);
        let text = "q1\t4\t11\tthe cat sat on mat\twho sat\nq2\t5\t11\tthe cat sat on mat\twho\n";
        let rows = parse_rows(text, DataFormat::Mrc, "qa", "f").unwrap();
        let loaded = encode_rows(&rows, &config, &vocab(), 32, "f").unwrap();
        assert_eq!(loaded.dropped, 1);
        assert_eq!(loaded.examples.len(), 1);
        assert_eq!(loaded.examples[0].label, Label::Span { start: 2, end: 3 });
    }

    #[test]
    fn ranking_rows_frame_each_candidate() {
        let config = TaskConfig::new("rank", DataFormat::PremiseAndMultiHypothesis, TaskType::Ranking);
        let rows = parse_rows("r1\t1\ta b\tc|d e|f\n", config.data_format, "rank", "f").unwrap();
        let loaded = encode_rows(&rows, &config, &vocab(), 16, "f").unwrap();
        assert_eq!(loaded.examples[0].inputs.len(), 3);
        assert_eq!(loaded.examples[0].label, Label::Positive(1));
        let bad = parse_rows("r1\t3\ta\tc|d\n", config.data_format, "rank", "f").unwrap_err();
        assert!(bad.to_string().contains("line 1"));
    }

    #[test]
    fn truncated_tags_follow_kept_tokens() {
        let config = TaskConfig::new("ner", DataFormat::Sequence, TaskType::SequenceLabeling).with_labels(&["O", "B"]);
        let rows = parse_rows("s1\tO B O B O\ta b c d e\n", config.data_format, "ner", "f").unwrap();
        let loaded = encode_rows(&rows, &config, &vocab(), 5, "f").unwrap();
        assert_eq!(loaded.examples[0].label, Label::Tags(vec![0, 1, 0]));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab();
        assert_eq!(vocab_from_text(&vocab_to_text(&v)).unwrap(), v);
    }

    #[test]
    fn unknown_label_is_a_data_error() {
        let rows = parse_rows("u1\tmaybe\ta\tb\n", DataFormat::PremiseAndOneHypothesis, "nli", "f").unwrap();
        let err = encode_rows(&rows, &nli(), &vocab(), 16, "f").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("nli"), "{err}");
    }
}
