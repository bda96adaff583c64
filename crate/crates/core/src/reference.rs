//! A small fixed model with one task of every head kind, plus one batch per
//! task. Used to verify gradients end to end.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Batch, Example, Label};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::gradcheck::{check_model, gradient_check, GradCheckConfig, GradCheckReport};
use crate::heads::Prepared;
use crate::model::{Mode, ModelBundle, ModelSpec};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::task::{DataFormat, TaskConfig, TaskType};
use crate::vocab::{frame_ids, TokenBatch, TokenSequence};
use crate::encoder::ContextEncoder;
use crate::lexicon::EmbeddingTables;
use crate::model::Ctx;
use crate::param::ParamStore;
use crate::tape::{Divergence, Tape, Targets, Var};
use crate::tensor::Tensor;

pub const REFERENCE_VOCAB: usize = 40;
pub const REFERENCE_MAX_LEN: usize = 16;

pub fn reference_tasks() -> Vec<TaskConfig> {
    vec![
        TaskConfig::new("cls", DataFormat::PremiseAndOneHypothesis, TaskType::Classification).with_classes(3),
        TaskConfig::new("reg", DataFormat::PremiseOnly, TaskType::Regression),
        TaskConfig::new("rank", DataFormat::PremiseAndMultiHypothesis, TaskType::Ranking),
        TaskConfig::new("span", DataFormat::Mrc, TaskType::Span),
        TaskConfig::new("tag", DataFormat::Sequence, TaskType::SequenceLabeling).with_classes(4),
        TaskConfig::new("mlm", DataFormat::PlainText, TaskType::MaskedLm),
    ]
}

/// Two-layer, two-head Transformer with `d = 32`.
pub fn reference_spec(encoder: EncoderConfig) -> ModelSpec {
    ModelSpec {
        encoder,
        vocab_size: REFERENCE_VOCAB,
        max_seq_len: REFERENCE_MAX_LEN,
        tasks: reference_tasks(),
    }
}

fn words(rng: &mut Xoshiro256pp, n: usize) -> Vec<usize> {
    (0..n).map(|_| 5 + rng.below(REFERENCE_VOCAB - 5)).collect()
}

/// Examples for every reference task, one per entry of `lengths`.
pub fn reference_examples(seed: u64, lengths: &[usize]) -> Result<Vec<(String, Vec<Example>)>> {
    let mut rng = Xoshiro256pp::seed_from_u64(seed);
    let mut out = Vec::new();
    let max = REFERENCE_MAX_LEN;
    for task in reference_tasks() {
        let mut examples = Vec::new();
        for (i, &len) in lengths.iter().enumerate() {
            let uid = format!("{}-{i}", task.name);
            let ex = match task.task_type {
                TaskType::Classification => {
                    let (a, b) = (words(&mut rng, len), words(&mut rng, 2));
                    Example::new(uid, frame_ids(&a, Some(&b), max)?.seq, Label::Class((i + 1) % 3))
                }
                TaskType::Regression => {
                    let a = words(&mut rng, len);
                    Example::new(uid, frame_ids(&a, None, max)?.seq, Label::Value(0.5 + i as f64))
                }
                TaskType::Ranking => {
                    let q = words(&mut rng, len);
                    let inputs = (0..3)
                        .map(|_| Ok(frame_ids(&q, Some(&words(&mut rng, 2)), max)?.seq))
                        .collect::<Result<Vec<_>>>()?;
                    Example {
                        uid,
                        inputs,
                        label: Label::Positive(i % 3),
                    }
                }
                TaskType::Span => {
                    let (c, q) = (words(&mut rng, len), words(&mut rng, 2));
                    let seq = frame_ids(&c, Some(&q), max)?.seq;
                    let start = 1 + i % len;
                    Example::new(uid, seq, Label::Span { start, end: start + 1 })
                }
                TaskType::SequenceLabeling => {
                    let a = words(&mut rng, len);
                    let tags = (0..len).map(|_| rng.below(4)).collect();
                    Example::new(uid, frame_ids(&a, None, max)?.seq, Label::Tags(tags))
                }
                TaskType::MaskedLm => {
                    let a = words(&mut rng, len + 2);
                    Example::new(uid, frame_ids(&a, None, max)?.seq, Label::None)
                }
            };
            examples.push(ex);
        }
        out.push((task.name.clone(), examples));
    }
    Ok(out)
}

/// One batch per reference task, with uneven lengths so padding is present.
pub fn reference_batches(seed: u64) -> Result<Vec<Batch>> {
    reference_examples(seed, &[5, 3])?
        .iter()
        .map(|(task, examples)| {
            let refs: Vec<&Example> = examples.iter().collect();
            Batch::from_examples(task, &refs)
        })
        .collect()
}

/// Prepared reference batches for `model`. Masked-LM positions are drawn
/// at a raised rate so the loss is never empty.
pub fn reference_prepared<F: Real>(model: &mut ModelBundle<F>, seed: u64) -> Result<Vec<(String, Prepared)>> {
    let mut rng = Xoshiro256pp::seed_from_u64(seed ^ 0x5eed);
    for h in &mut model.heads {
        h.mask_prob = 0.5;
    }
    reference_batches(seed)?
        .into_iter()
        .map(|b| Ok((b.task.clone(), model.head(&b.task)?.prepare(&b, Some(&mut rng))?)))
        .collect()
}

/// Gradient check of every head kind through the shared encoder.
pub fn reference_gradcheck(
    encoder: EncoderConfig,
    seed: u64,
    config: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut model = ModelBundle::<f64>::new(reference_spec(encoder), seed)?;
    reference_gradcheck_model(&mut model, seed, config)
}

/// Same check on an already-built reference model.
pub fn reference_gradcheck_model(
    model: &mut ModelBundle<f64>,
    seed: u64,
    config: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>> {
    let prepared = reference_prepared(model, seed)?;
    prepared
        .iter()
        .map(|(task, prep)| Ok((task.clone(), check_model(model, task, prep, Mode::Eval, config)?)))
        .collect()
}

/// Checks `op` over random inputs of the given shapes. The output is reduced
/// against a fixed random weight so that every output element carries a
/// distinct gradient.
fn check_op<O>(shapes: &[&[usize]], op: O, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    O: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = Xoshiro256pp::seed_from_u64(17);
    let mut params = ParamStore::<f64>::new();
    for (i, s) in shapes.iter().enumerate() {
        params.normal(format!("in{i}"), s, 1.0, &mut rng);
    }
    let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let inputs: Vec<Var> = p.ids().map(|id| p.on_tape(tape, id)).collect();
        let out = op(tape, &inputs)?;
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(Tensor::randn(&shape, 1.0, &mut Xoshiro256pp::seed_from_u64(99)));
        let y = tape.mul(out, w)?;
        Ok(tape.sum(y))
    };
    gradient_check(f, &mut params, Mode::Eval, None, config)
}

/// Gradient check of every differentiable tape op, the lexicon tables and
/// an LSTM layer, each in isolation.
pub fn op_gradchecks(config: &GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<GradCheckReport>| -> Result<()> {
        out.push((String::from(name), r?));
        Ok(())
    };
    let c = config;
    push("matmul", check_op(&[&[3, 4], &[4, 5]], |t, x| t.matmul(x[0], x[1]), c))?;
    push("batch_matmul", check_op(&[&[2, 3, 4], &[2, 4, 3]], |t, x| t.batch_matmul(x[0], x[1], false), c))?;
    push("batch_matmul_t", check_op(&[&[2, 3, 4], &[2, 5, 4]], |t, x| t.batch_matmul(x[0], x[1], true), c))?;
    push("transpose", check_op(&[&[3, 4]], |t, x| t.transpose(x[0]), c))?;
    push("add", check_op(&[&[3, 4], &[3, 4]], |t, x| t.add(x[0], x[1]), c))?;
    push("sub", check_op(&[&[3, 4], &[3, 4]], |t, x| t.sub(x[0], x[1]), c))?;
    push("mul", check_op(&[&[3, 4], &[3, 4]], |t, x| t.mul(x[0], x[1]), c))?;
    push("add_row", check_op(&[&[3, 4], &[4]], |t, x| t.add_row(x[0], x[1]), c))?;
    push("scale", check_op(&[&[3, 4]], |t, x| Ok(t.scale(x[0], -1.7)), c))?;
    push("add_const", check_op(&[&[3, 4]], |t, x| t.add_const(x[0], &Tensor::full(&[3, 4], 0.5)), c))?;
    push("mul_const", check_op(&[&[3, 4]], |t, x| t.mul_const(x[0], Tensor::full(&[3, 4], -2.0)), c))?;
    push("relu", check_op(&[&[4, 6]], |t, x| Ok(t.relu(x[0])), c))?;
    push("tanh", check_op(&[&[4, 6]], |t, x| Ok(t.tanh(x[0])), c))?;
    push("sigmoid", check_op(&[&[4, 6]], |t, x| Ok(t.sigmoid(x[0])), c))?;
    push("gelu", check_op(&[&[4, 6]], |t, x| Ok(t.gelu(x[0])), c))?;
    push(
        "dropout",
        check_op(
            &[&[4, 6]],
            |t, x| t.dropout(x[0], 0.3, Some(&mut Xoshiro256pp::seed_from_u64(5))),
            c,
        ),
    )?;
    push("softmax rows", check_op(&[&[3, 5]], |t, x| t.softmax(x[0], 1), c))?;
    push("softmax cols", check_op(&[&[3, 5]], |t, x| t.softmax(x[0], 0), c))?;
    push("softmax 3d", check_op(&[&[2, 3, 4]], |t, x| t.softmax(x[0], 2), c))?;
    push("layer_norm", check_op(&[&[3, 6], &[6], &[6]], |t, x| t.layer_norm(x[0], x[1], x[2], 1e-5), c))?;
    push("gather_rows", check_op(&[&[5, 3]], |t, x| t.gather_rows(x[0], &[4, 0, 4, 2]), c))?;
    push("embedding_gather", check_op(&[&[5, 3]], |t, x| t.embedding_gather(x[0], &[1, 1, 3]), c))?;
    push("permute", check_op(&[&[2, 3]], |t, x| t.permute(x[0], &[3, 2], vec![0, 3, 1, 4, 2, 5]), c))?;
    push("reshape", check_op(&[&[2, 6]], |t, x| t.reshape(x[0], &[3, 4]), c))?;
    push("concat_cols", check_op(&[&[3, 2], &[3, 4]], |t, x| t.concat_cols(&[x[0], x[1]]), c))?;
    push("concat_rows", check_op(&[&[2, 3], &[4, 3]], |t, x| t.concat_rows(&[x[0], x[1]]), c))?;
    push("slice_cols", check_op(&[&[3, 6]], |t, x| t.slice_cols(x[0], 1, 4), c))?;
    push("sum", check_op(&[&[3, 4]], |t, x| Ok(t.sum(x[0])), c))?;
    push("mean", check_op(&[&[3, 4]], |t, x| Ok(t.mean(x[0])), c))?;
    push(
        "cross_entropy hard",
        check_op(&[&[4, 3]], |t, x| t.cross_entropy(x[0], Targets::Hard(&[0, 2, 1, 2])), c),
    )?;
    let soft = Tensor::from_f64(&[2, 3], &[0.2, 0.5, 0.3, 0.9, 0.05, 0.05])?;
    push(
        "cross_entropy soft",
        check_op(&[&[2, 3]], |t, x| t.cross_entropy(x[0], Targets::Soft(&soft)), c),
    )?;
    for (name, kind) in [("kl", Divergence::Kl), ("symmetric_kl", Divergence::SymmetricKl)] {
        let r = check_op(
            &[&[3, 4], &[3, 4]],
            |t, x| {
                let p = t.softmax(x[0], 1)?;
                let q = t.softmax(x[1], 1)?;
                t.divergence(kind, p, q)
            },
            c,
        );
        push(name, r)?;
    }
    push("mse", check_op(&[&[3, 2], &[3, 2]], |t, x| t.mse(x[0], x[1]), c))?;

    let mut rng = Xoshiro256pp::seed_from_u64(8);
    let mut params = ParamStore::<f64>::new();
    let tables = EmbeddingTables::new(&mut params, 12, 8, 4, &mut rng);
    let a = frame_ids(&[5, 6, 7], Some(&[8]), 8)?.seq;
    let b = frame_ids(&[9], None, 8)?.seq;
    let batch = TokenBatch::from_sequences(&[a, b])?;
    let w = Tensor::randn(&[batch.rows * batch.seq_len, 4], 1.0, &mut rng);
    let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let e = tables.embed(tape, p, &batch)?;
        let wv = tape.constant(w.clone());
        let y = tape.mul(e, wv)?;
        Ok(tape.sum(y))
    };
    push("lexicon", gradient_check(f, &mut params, Mode::Eval, None, c))?;

    let mut rng = Xoshiro256pp::seed_from_u64(21);
    let mut params = ParamStore::<f64>::new();
    let enc = ContextEncoder::new(&EncoderConfig::lstm(1, 4), &mut params, &mut rng)?;
    let x = params.normal("x", &[3, 4], 1.0, &mut rng);
    let seq = TokenSequence {
        token_ids: vec![1, 5, 2],
        segment_ids: vec![0; 3],
        attention_mask: vec![1; 3],
    };
    let batch = TokenBatch::from_sequences(&[seq])?;
    let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let f = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let xv = p.on_tape(tape, x);
        let h = enc.encode(tape, p, xv, &batch, &mut Ctx::eval())?;
        let wv = tape.constant(w.clone());
        let y = tape.mul(h, wv)?;
        Ok(tape.sum(y))
    };
    push("lstm", gradient_check(f, &mut params, Mode::Eval, None, c))?;
    Ok(out)
}
