#![allow(dead_code)]

use std::ffi::OsStr;
use std::process::{Command, Output};

use mtnlu::dataset::{build_vocab, encode_rows, parse_rows};
use mtnlu::synthetic::{generate, to_tsv, SynthSpec};
use mtnlu_core::engine::TaskData;
use mtnlu_core::vocab::Vocabulary;

pub const MAX_LEN: usize = 16;

/// Synthetic tasks encoded in memory, with the vocabulary of their training rows.
pub fn synth_data(spec: &SynthSpec, seed: u64) -> (Vec<TaskData>, Vocabulary) {
    let tasks = generate(spec, seed);
    let parse = |t: &str, text: String| parse_rows(&text, mtnlu_core::task::DataFormat::PremiseOnly, t, t).unwrap();
    let rows: Vec<_> = tasks
        .iter()
        .map(|t| (parse(&t.name, to_tsv(&t.train)), parse(&t.name, to_tsv(&t.dev))))
        .collect();
    let vocab = build_vocab(rows.iter().flat_map(|r| r.0.iter()), 1).unwrap();
    let data = tasks
        .iter()
        .zip(&rows)
        .map(|(t, (train, dev))| {
            let config = t.config(spec.n_class);
            TaskData {
                train: encode_rows(train, &config, &vocab, MAX_LEN, "train").unwrap().examples,
                dev: encode_rows(dev, &config, &vocab, MAX_LEN, "dev").unwrap().examples,
                config,
                soft: None,
            }
        })
        .collect();
    (data, vocab)
}

/// Arguments of mixed string and path types.
#[macro_export]
macro_rules! argv {
    ($($a:expr),* $(,)?) => {
        vec![$(std::ffi::OsString::from($a)),*]
    };
}

pub fn mtnlu<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtnlu")).args(args).output().expect("binary runs")
}

/// A one-stage plan over the given tasks.
pub fn plan(seed: u64, encoder: &str, stage: &str) -> String {
    format!(
        "seed = {seed}\nmax_seq_len = {MAX_LEN}\neval_batch_size = 64\n\n[encoder]\n{encoder}\n\n[[stage]]\n{stage}\n"
    )
}
