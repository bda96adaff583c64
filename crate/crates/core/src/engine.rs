//! Training stages, the single training step, and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adversarial::{adversarial_loss, divergence_for, generate_perturbation, AdvConfig};
use crate::data::{make_batches, sequential_batches, Batch, Example};
use crate::distill::{kd_combined_terms, kd_kind, SoftTargetSet};
use crate::error::{Error, Result};
use crate::heads::Outcome;
use crate::metrics::compute_metric;
use crate::model::{Ctx, Mode, ModelBundle};
use crate::optim::{Adam, AdamConfig};
use crate::real::Real;
use crate::rng::{splitmix64, RngStreams, Xoshiro256pp, STREAM_EVAL};
use crate::sampler::{SamplerKind, TaskSampler};
use crate::tape::Tape;
use crate::task::{Metric, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    MultiTaskFinetune,
    SingleTaskFinetune,
    Distill,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::MultiTaskFinetune => "multi_task_finetune",
            StageKind::SingleTaskFinetune => "single_task_finetune",
            StageKind::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi_task_finetune" => Ok(StageKind::MultiTaskFinetune),
            "single_task_finetune" => Ok(StageKind::SingleTaskFinetune),
            "distill" => Ok(StageKind::Distill),
            other => Err(Error::config(format!(
                "unknown stage kind {other:?}; valid values: multi_task_finetune, single_task_finetune, distill"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    pub tasks: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sampler: SamplerKind,
    pub adversarial: Option<AdvConfig>,
    pub kd: bool,
    pub grad_clip: f64,
    pub warmup_steps: u64,
}

impl Stage {
    pub fn new(kind: StageKind, tasks: &[&str]) -> Self {
        Self {
            kind,
            tasks: tasks.iter().map(|t| String::from(*t)).collect(),
            epochs: 1,
            lr: 1e-3,
            batch_size: 32,
            sampler: SamplerKind::Proportional,
            adversarial: None,
            kd: kind == StageKind::Distill,
            grad_clip: 1.0,
            warmup_steps: 0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            grad_clip: self.grad_clip,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }

    pub fn options(&self) -> StepOptions {
        StepOptions {
            adversarial: self.adversarial,
            kd: self.kd || self.kind == StageKind::Distill,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub seed: u64,
    pub stages: Vec<Stage>,
}

/// A task's data for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub config: TaskConfig,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub soft: Option<SoftTargetSet>,
}

fn find<'a>(datasets: &'a [TaskData], task: &str) -> Result<&'a TaskData> {
    datasets
        .iter()
        .find(|d| d.config.name == task)
        .ok_or_else(|| Error::config(format!("stage references unregistered task {task}")))
}

impl TrainPlan {
    pub fn validate(&self, datasets: &[TaskData]) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("plan has no stages"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.tasks.is_empty() {
                return Err(Error::config(format!("stage {i} lists no tasks")));
            }
            if s.epochs == 0 || s.batch_size == 0 {
                return Err(Error::config(format!("stage {i}: epochs and batch_size must be at least 1")));
            }
            if !(s.lr >= 0.0) || !(s.grad_clip >= 0.0) {
                return Err(Error::config(format!("stage {i}: lr and grad_clip must be ≥ 0")));
            }
            if s.kind == StageKind::SingleTaskFinetune && s.tasks.len() != 1 {
                return Err(Error::config(format!("stage {i}: single_task_finetune takes exactly one task")));
            }
            if let Some(a) = &s.adversarial {
                a.validate()?;
            }
            let mut with_soft = 0;
            for t in &s.tasks {
                let d = find(datasets, t)?;
                if d.train.is_empty() {
                    return Err(Error::data(format!("task {t} has no training examples")));
                }
                if d.soft.is_some() {
                    with_soft += 1;
                }
            }
            if s.kind == StageKind::Distill && with_soft == 0 {
                return Err(Error::config(format!("distill stage {i} has no task with soft targets")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepOptions {
    pub adversarial: Option<AdvConfig>,
    pub kd: bool,
}

/// Loss values of one step. `task` is the task term actually optimized
/// (the combined hard/soft loss when distilling).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub task: f64,
    pub adv: Option<f64>,
    pub kd: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub task: String,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub stage: usize,
    pub epoch: usize,
    pub task: String,
    pub metrics: Vec<(String, f64)>,
    pub loss: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.0 == metric).map(|m| m.1)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<F> {
    pub model: ModelBundle<F>,
    pub rngs: RngStreams,
    pub step: u64,
    pub log: Vec<StepRecord>,
    /// Optimizer of the stage that ran last.
    pub optimizer: Option<Adam<F>>,
}

impl<F: Real> TrainState<F> {
    pub fn new(model: ModelBundle<F>, seed: u64) -> Self {
        Self {
            model,
            rngs: RngStreams::new(seed),
            step: 0,
            log: Vec::new(),
            optimizer: None,
        }
    }
}

/// One forward, one backward and one optimizer update on `batch`.
pub fn train_step<F: Real>(
    model: &mut ModelBundle<F>,
    optimizer: &mut Adam<F>,
    rngs: &mut RngStreams,
    batch: &Batch,
    soft: Option<&SoftTargetSet>,
    options: &StepOptions,
) -> Result<LossBreakdown> {
    let head = model.head(&batch.task)?.clone();
    let config = model.task_config(&batch.task)?.clone();
    let prep = head.prepare(batch, Some(&mut rngs.main))?;
    let mut tape = Tape::new();
    let (shared, out) = {
        let mut ctx = Ctx::train(&mut rngs.main);
        model.forward(&mut tape, &head, &prep, &mut ctx)?
    };

    let (task_loss, kd_loss) = match soft.filter(|_| options.kd) {
        Some(set) => {
            let kind = kd_kind(&config)?;
            let slots: Vec<Option<&[f64]>> = batch.uids.iter().map(|u| set.get(u)).collect();
            kd_combined_terms(&mut tape, &head, &out, &prep, &slots, kind, config.temperature())?
        }
        None => (head.loss(&mut tape, &out, &prep)?, None),
    };

    let mut total = task_loss;
    let mut adv_value = None;
    if let Some(adv) = options.adversarial.filter(AdvConfig::active) {
        let kind = divergence_for(&head, &config)?;
        let views = head.views(&mut tape, &out, &prep)?;
        let clean: Vec<_> = views.iter().map(|&v| tape.value(v).clone()).collect();
        let emb = tape.value(shared.embeddings).clone();
        let delta = generate_perturbation(model, &head, &prep, &emb, &clean, kind, &adv, &mut rngs.adversarial, Mode::Train)?;
        let mut ctx = Ctx::train(&mut rngs.adversarial);
        let a = adversarial_loss(&mut tape, model, &head, &prep, &out, shared.embeddings, &delta, kind, &mut ctx)?;
        adv_value = Some(tape.value(a).item().as_f64());
        let weighted = tape.scale(a, F::lit(adv.alpha));
        total = tape.add(total, weighted)?;
    }

    let breakdown_task = tape.value(task_loss).item().as_f64();
    let kd_value = kd_loss.map(|v| tape.value(v).item().as_f64());
    let total_value = tape.value(total).item().as_f64();
    if !total_value.is_finite() {
        return Err(Error::contract(format!("non-finite loss on task {}", batch.task)));
    }
    let grads = tape.backward(total)?;
    let grad_norm = optimizer.step(&mut model.params, grads.into_params());
    Ok(LossBreakdown {
        task: breakdown_task,
        adv: adv_value,
        kd: kd_value,
        total: total_value,
        grad_norm,
    })
}

/// Steps in one multi-task epoch: `Σ ceil(size_t / batch_size)`.
pub fn epoch_steps(sizes: &[usize], batch_size: usize) -> usize {
    sizes.iter().map(|&s| s.div_ceil(batch_size)).sum()
}

/// Cycles through one task's shuffled batches, reshuffling per pass.
struct Cursor<'a> {
    task: &'a str,
    examples: &'a [Example],
    batch_size: usize,
    seed: u64,
    cycle: u64,
    batches: Vec<Batch>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next_batch(&mut self) -> Result<&Batch> {
        if self.pos == self.batches.len() {
            self.batches = make_batches(self.task, self.examples, self.batch_size, self.seed, self.cycle)?;
            self.cycle += 1;
            self.pos = 0;
        }
        self.pos += 1;
        Ok(&self.batches[self.pos - 1])
    }
}

fn shuffle_seed(seed: u64, stage: usize, task: usize) -> u64 {
    let mut s = seed ^ ((stage as u64) << 32) ^ (task as u64).wrapping_mul(0xa076_1d64_78bd_642f);
    splitmix64(&mut s)
}

/// Per-stage outcome: dev reports after every epoch plus the number of
/// training examples per task that had no soft target.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageResult {
    pub reports: Vec<MetricReport>,
    pub soft_target_misses: Vec<(String, usize)>,
}

/// Runs one stage. The optimizer starts fresh; the model, RNG streams and
/// step counter carry over from earlier stages.
pub fn run_stage<F: Real>(
    state: &mut TrainState<F>,
    stage_index: usize,
    stage: &Stage,
    datasets: &[TaskData],
    eval_batch_size: usize,
) -> Result<StageResult> {
    let data: Vec<&TaskData> = stage.tasks.iter().map(|t| find(datasets, t)).collect::<Result<_>>()?;
    for d in &data {
        state.model.head(&d.config.name)?;
    }
    if stage.kind == StageKind::SingleTaskFinetune && data.len() != 1 {
        return Err(Error::config("single_task_finetune takes exactly one task"));
    }
    let options = stage.options();
    let mut result = StageResult::default();
    if options.kd {
        for d in &data {
            if let Some(set) = &d.soft {
                set.check_uids(&d.train)?;
                let misses = d.train.iter().filter(|e| set.get(&e.uid).is_none()).count();
                result.soft_target_misses.push((d.config.name.clone(), misses));
            }
        }
    }
    let sizes: Vec<usize> = data.iter().map(|d| d.train.len()).collect();
    let mut cursors: Vec<Cursor<'_>> = data
        .iter()
        .enumerate()
        .map(|(i, d)| Cursor {
            task: &d.config.name,
            examples: &d.train,
            batch_size: stage.batch_size,
            seed: shuffle_seed(state.rngs.seed, stage_index, i),
            cycle: 0,
            batches: Vec::new(),
            pos: 0,
        })
        .collect();
    let mut sampler = TaskSampler::with_rng(stage.sampler, &sizes, state.rngs.sampler.clone())?;
    let mut optimizer = Adam::new(stage.adam(), &state.model.params);
    let steps = epoch_steps(&sizes, stage.batch_size);

    for epoch in 0..stage.epochs {
        for _ in 0..steps {
            let t = sampler.next_task();
            let batch = cursors[t].next_batch()?;
            let soft = data[t].soft.as_ref();
            let loss = train_step(&mut state.model, &mut optimizer, &mut state.rngs, batch, soft, &options)?;
            state.step += 1;
            state.log.push(StepRecord {
                stage: stage_index,
                epoch,
                step: state.step,
                task: batch.task.clone(),
                loss,
            });
        }
        for d in &data {
            if d.dev.is_empty() {
                continue;
            }
            let mut r = evaluate(&state.model, &d.config.name, &d.dev, eval_batch_size, state.rngs.seed)?;
            r.stage = stage_index;
            r.epoch = epoch;
            result.reports.push(r);
        }
    }
    state.rngs.sampler = sampler.rng().clone();
    state.optimizer = Some(optimizer);
    Ok(result)
}

/// Runs every stage in order.
pub fn run_plan<F: Real>(
    state: &mut TrainState<F>,
    plan: &TrainPlan,
    datasets: &[TaskData],
    eval_batch_size: usize,
) -> Result<Vec<StageResult>> {
    plan.validate(datasets)?;
    plan.stages
        .iter()
        .enumerate()
        .map(|(i, s)| run_stage(state, i, s, datasets, eval_batch_size))
        .collect()
}

/// Predictions and mean loss of a model on `examples`, without dropout or
/// perturbation. Masked-LM corruption uses a fixed stream derived from
/// `seed`, so repeated evaluations agree.
pub fn predict<F: Real>(
    model: &ModelBundle<F>,
    task: &str,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
) -> Result<(Vec<Outcome>, f64)> {
    if examples.is_empty() {
        return Err(Error::Metric(format!("task {task}: empty evaluation set")));
    }
    let head = model.head(task)?;
    let mut rng = Xoshiro256pp::stream(seed, STREAM_EVAL);
    let mut outcomes = Vec::new();
    let mut loss_sum = 0.0;
    for batch in sequential_batches(task, examples, batch_size)? {
        let prep = head.prepare(&batch, Some(&mut rng))?;
        let mut tape = Tape::new();
        let (_, out) = model.forward(&mut tape, head, &prep, &mut Ctx::eval())?;
        let loss = head.loss(&mut tape, &out, &prep)?;
        loss_sum += tape.value(loss).item().as_f64() * batch.len() as f64;
        outcomes.extend(head.outcomes(&tape, &out, &prep)?);
    }
    Ok((outcomes, loss_sum / examples.len() as f64))
}

pub fn evaluate<F: Real>(
    model: &ModelBundle<F>,
    task: &str,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
) -> Result<MetricReport> {
    let config = model.task_config(task)?;
    let (outcomes, loss) = predict(model, task, examples, batch_size, seed)?;
    let mut metrics = Vec::with_capacity(config.metric_meta.len());
    for name in &config.metric_meta {
        let m = Metric::parse(name)?;
        metrics.push((name.clone(), compute_metric(m, &outcomes)?));
    }
    Ok(MetricReport {
        stage: 0,
        epoch: 0,
        task: String::from(task),
        metrics,
        loss,
        n: examples.len(),
    })
}
