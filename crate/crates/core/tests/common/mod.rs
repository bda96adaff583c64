#![allow(dead_code)]

use mtnlu_core::data::{Example, Label};
use mtnlu_core::encoder::EncoderConfig;
use mtnlu_core::model::{ModelBundle, ModelSpec};
use mtnlu_core::rng::Xoshiro256pp;
use mtnlu_core::task::{DataFormat, TaskConfig, TaskType};
use mtnlu_core::vocab::frame_ids;

pub const VOCAB: usize = 32;
pub const MAX_LEN: usize = 16;

/// Separable classification data: each example carries one marker token of
/// its class among filler tokens, with lengths between 3 and 8.
pub fn separable(task: &str, n: usize, classes: usize, seed: u64) -> Vec<Example> {
    let mut rng = Xoshiro256pp::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = rng.below(classes);
            let len = 3 + rng.below(6);
            let mut words: Vec<usize> = (0..len).map(|_| 20 + rng.below(VOCAB - 20)).collect();
            let at = rng.below(len);
            words[at] = 5 + label;
            let seq = frame_ids(&words, None, MAX_LEN).unwrap().seq;
            Example::new(format!("{task}-{i}"), seq, Label::Class(label))
        })
        .collect()
}

pub fn cls_task(name: &str, classes: usize) -> TaskConfig {
    TaskConfig::new(name, DataFormat::PremiseOnly, TaskType::Classification).with_classes(classes)
}

pub fn model(encoder: EncoderConfig, tasks: Vec<TaskConfig>, seed: u64) -> ModelBundle<f64> {
    let spec = ModelSpec {
        encoder,
        vocab_size: VOCAB,
        max_seq_len: MAX_LEN,
        tasks,
    };
    ModelBundle::new(spec, seed).unwrap()
}

pub fn small_transformer() -> EncoderConfig {
    EncoderConfig::transformer(1, 16, 2, 32)
}
