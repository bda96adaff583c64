//! TOML task and plan documents.
//!
//! A task file holds one table per task, keyed by the task name:
//!
//! ```toml
//! [snli]
//! data_format = "PremiseAndOneHypothesis"
//! task_type = "Classification"
//! labels = ["contradiction", "neutral", "entailment"]
//! ```
//!
//! A plan file holds run-wide settings, an `[encoder]` table and one
//! `[[stage]]` table per stage, optionally with a `[stage.adversarial]`
//! sub-table that switches adversarial training on for that stage.

use mtnlu_core::adversarial::AdvConfig;
use mtnlu_core::encoder::{EncoderConfig, EncoderKind};
use mtnlu_core::engine::{Stage, StageKind, TrainPlan};
use mtnlu_core::sampler::SamplerKind;
use mtnlu_core::task::{DataFormat, Registry, TaskConfig, TaskType};
use mtnlu_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{detail, CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    #[serde(skip_serializing_if = "Option::is_none")]
    data_format: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task_layer_type: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metric_meta: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kd_loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    adv_loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dropout_prob: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kd_temperature: Option<f64>,
}

fn task_error(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("task {name}: {msg}"))
}

fn build_task(name: &str, raw: RawTask, registry: &Registry) -> Result<TaskConfig> {
    let required = |v: Option<String>, field: &str| {
        v.ok_or_else(|| task_error(name, format!("missing required attribute {field}")))
    };
    let data_format = DataFormat::parse(&required(raw.data_format, "data_format")?).map_err(|e| task_error(name, detail(e)))?;
    let task_type = TaskType::parse(&required(raw.task_type, "task_type")?).map_err(|e| task_error(name, detail(e)))?;
    let mut config = TaskConfig::new(name, data_format, task_type);
    if let Some(t) = raw.task_layer_type {
        config.task_layer_type = t;
    }
    config.n_class = raw.n_class;
    config.labels = raw.labels;
    if let Some(m) = raw.metric_meta {
        config.metric_meta = m;
    }
    if let Some(l) = raw.loss {
        config.loss = l;
    }
    config.kd_loss = raw.kd_loss;
    config.adv_loss = raw.adv_loss;
    config.dropout_prob = raw.dropout_prob;
    config.kd_temperature = raw.kd_temperature;
    registry.check(&config)?;
    Ok(config)
}

/// Parses and validates every task in a task document.
pub fn parse_tasks(text: &str) -> Result<Vec<TaskConfig>> {
    parse_tasks_with(text, &Registry::default())
}

pub fn parse_tasks_with(text: &str, registry: &Registry) -> Result<Vec<TaskConfig>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    if table.is_empty() {
        return Err(CliError::config("no tasks declared"));
    }
    table
        .into_iter()
        .map(|(name, value)| {
            if !value.is_table() {
                return Err(task_error(&name, "expected a table of attributes"));
            }
            let raw: RawTask = value.try_into().map_err(|e| task_error(&name, e))?;
            build_task(&name, raw, registry)
        })
        .collect()
}

fn expand(config: &TaskConfig) -> RawTask {
    RawTask {
        data_format: Some(config.data_format.as_str().to_string()),
        task_type: Some(config.task_type.as_str().to_string()),
        task_layer_type: Some(config.task_layer_type.clone()),
        n_class: config.n_class,
        labels: config.labels.clone(),
        metric_meta: Some(config.metric_meta.clone()),
        loss: Some(config.loss.clone()),
        kd_loss: config.kd_loss.clone(),
        adv_loss: config.adv_loss.clone(),
        dropout_prob: config.dropout_prob,
        kd_temperature: config.kd_temperature,
    }
}

/// Writes tasks as a task document with every default spelled out.
pub fn tasks_to_toml(tasks: &[TaskConfig]) -> String {
    let mut table = toml::Table::new();
    for t in tasks {
        let value = toml::Value::try_from(expand(t)).expect("task attributes serialize");
        table.insert(t.name.clone(), value);
    }
    toml::to_string(&table).expect("task table serializes")
}

/// Concatenates the tasks of several documents, rejecting duplicate names.
pub fn merge_tasks(docs: Vec<Vec<TaskConfig>>) -> Result<Vec<TaskConfig>> {
    let mut out: Vec<TaskConfig> = Vec::new();
    for t in docs.into_iter().flatten() {
        if out.iter().any(|u| u.name == t.name) {
            return Err(CliError::config(format!("task {} declared twice", t.name)));
        }
        out.push(t);
    }
    Ok(out)
}

fn default_precision() -> String {
    "f32".into()
}
fn default_max_seq_len() -> usize {
    64
}
fn default_eval_batch_size() -> usize {
    32
}
fn one() -> usize {
    1
}
fn default_kind() -> String {
    "transformer".into()
}
fn default_layers() -> usize {
    2
}
fn default_d() -> usize {
    32
}
fn default_heads() -> usize {
    2
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_sampler() -> String {
    "proportional".into()
}
fn default_grad_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderFile {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Defaults to `2·d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[serde(default)]
    pub dropout_prob: f64,
}

impl Default for EncoderFile {
    fn default() -> Self {
        toml::from_str("").expect("encoder defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvFile {
    #[serde(default = "AdvFile::epsilon")]
    pub epsilon: f64,
    #[serde(default = "AdvFile::step_size")]
    pub step_size: f64,
    #[serde(default = "AdvFile::n_steps")]
    pub n_steps: usize,
    #[serde(default = "AdvFile::init_noise_sigma")]
    pub init_noise_sigma: f64,
    #[serde(default = "AdvFile::alpha")]
    pub alpha: f64,
}

impl AdvFile {
    fn epsilon() -> f64 {
        AdvConfig::default().epsilon
    }
    fn step_size() -> f64 {
        AdvConfig::default().step_size
    }
    fn n_steps() -> usize {
        AdvConfig::default().n_steps
    }
    fn init_noise_sigma() -> f64 {
        AdvConfig::default().init_noise_sigma
    }
    fn alpha() -> f64 {
        AdvConfig::default().alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageFile {
    pub kind: String,
    pub tasks: Vec<String>,
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_sampler")]
    pub sampler: String,
    /// Distillation on tasks that have soft targets; always on in
    /// `distill` stages.
    #[serde(default)]
    pub kd: bool,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdvFile>,
}

/// A plan document as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
    #[serde(default = "one")]
    pub vocab_min_count: usize,
    #[serde(default)]
    pub encoder: EncoderFile,
    #[serde(rename = "stage")]
    pub stages: Vec<StageFile>,
}

/// A validated plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub precision: DType,
    pub max_seq_len: usize,
    pub eval_batch_size: usize,
    pub vocab_min_count: usize,
    pub encoder: EncoderConfig,
    pub train: TrainPlan,
}

fn plan_error(msg: impl std::fmt::Display) -> CliError {
    CliError::config(format!("plan: {msg}"))
}

impl PlanFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| plan_error(e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn resolve(&self) -> Result<Plan> {
        let precision = match self.precision.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(plan_error(format!("unknown precision {other:?}; valid values: f32, f64"))),
        };
        if self.eval_batch_size == 0 {
            return Err(plan_error("eval_batch_size must be at least 1"));
        }
        let e = &self.encoder;
        let kind = EncoderKind::parse(&e.kind).map_err(|e| plan_error(detail(e)))?;
        let encoder = match kind {
            EncoderKind::Transformer => {
                EncoderConfig::transformer(e.n_layers, e.d, e.n_heads, e.ffn_dim.unwrap_or(2 * e.d))
            }
            EncoderKind::Lstm => EncoderConfig::lstm(e.n_layers, e.d),
        }
        .with_dropout(e.dropout_prob);
        encoder.validate().map_err(|e| plan_error(detail(e)))?;
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let at = |e: mtnlu_core::Error| plan_error(format!("stage {i}: {}", detail(e)));
                let kind = StageKind::parse(&s.kind).map_err(at)?;
                let mut stage = Stage::new(kind, &[]);
                stage.tasks = s.tasks.clone();
                stage.epochs = s.epochs;
                stage.lr = s.lr;
                stage.batch_size = s.batch_size;
                stage.sampler = SamplerKind::parse(&s.sampler).map_err(at)?;
                stage.kd = s.kd || kind == StageKind::Distill;
                stage.grad_clip = s.grad_clip;
                stage.warmup_steps = s.warmup_steps;
                stage.adversarial = s.adversarial.as_ref().map(|a| AdvConfig {
                    epsilon: a.epsilon,
                    step_size: a.step_size,
                    n_steps: a.n_steps,
                    init_noise_sigma: a.init_noise_sigma,
                    alpha: a.alpha,
                });
                if let Some(a) = &stage.adversarial {
                    a.validate().map_err(at)?;
                }
                Ok(stage)
            })
            .collect::<Result<Vec<_>>>()?;
        if stages.is_empty() {
            return Err(plan_error("no [[stage]] tables"));
        }
        Ok(Plan {
            precision,
            max_seq_len: self.max_seq_len,
            eval_batch_size: self.eval_batch_size,
            vocab_min_count: self.vocab_min_count,
            encoder,
            train: TrainPlan { seed: self.seed, stages },
        })
    }
}

impl Plan {
    /// Every task a stage names must be declared.
    pub fn check_tasks(&self, tasks: &[TaskConfig]) -> Result<()> {
        for (i, s) in self.train.stages.iter().enumerate() {
            for t in &s.tasks {
                if !tasks.iter().any(|c| &c.name == t) {
                    return Err(plan_error(format!("stage {i} references unregistered task {t}")));
                }
            }
        }
        Ok(())
    }

    /// Tasks used by any stage, in first-use order.
    pub fn used_tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in self.train.stages.iter().flat_map(|s| &s.tasks) {
            if !out.contains(t) {
                out.push(t.clone());
            }
        }
        out
    }
}
