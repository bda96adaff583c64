//! Declarative task descriptions, the loss/metric registry and label maps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident, $what:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Parses the configuration spelling; the error lists every
            /// accepted value.
            pub fn parse(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        "unknown {} {:?}; valid values: {}",
                        $what,
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

named_enum!(
    /// Column layout of a task's dataset.
    DataFormat, "data_format" {
        PremiseOnly => "PremiseOnly",
        PremiseAndOneHypothesis => "PremiseAndOneHypothesis",
        PremiseAndMultiHypothesis => "PremiseAndMultiHypothesis",
        Sequence => "Sequence",
        Mrc => "MRC",
        PlainText => "PlainText",
    }
);

named_enum!(
    TaskType, "task_type" {
        Classification => "Classification",
        Regression => "Regression",
        Ranking => "Ranking",
        Span => "Span",
        SequenceLabeling => "SequenceLabeling",
        MaskedLm => "MaskedLM",
    }
);

named_enum!(
    Metric, "metric" {
        Accuracy => "accuracy",
        F1Binary => "f1_binary",
        ExactMatch => "exact_match",
        Mse => "mse",
        Pearson => "pearson",
    }
);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    ListwiseNll,
    SpanCe,
    TokenCe,
    MaskedCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KdLossKind {
    /// Cross-entropy against the (temperature-renormalized) teacher row.
    SoftCrossEntropy,
    /// Squared error between student logits and averaged teacher logits.
    MseLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvLossKind {
    SymmetricKl,
    Mse,
}

impl TaskType {
    pub fn default_loss(self) -> &'static str {
        match self {
            TaskType::Classification => "cross_entropy",
            TaskType::Regression => "mse",
            TaskType::Ranking => "listwise_nll",
            TaskType::Span => "span_ce",
            TaskType::SequenceLabeling => "token_ce",
            TaskType::MaskedLm => "masked_ce",
        }
    }

    pub fn default_metric(self) -> Metric {
        match self {
            TaskType::Regression => Metric::Pearson,
            TaskType::Span => Metric::ExactMatch,
            _ => Metric::Accuracy,
        }
    }

    /// The only data format each task type can read.
    pub fn accepts(self, format: DataFormat) -> bool {
        use DataFormat::*;
        match self {
            TaskType::Classification | TaskType::Regression => {
                matches!(format, PremiseOnly | PremiseAndOneHypothesis)
            }
            TaskType::Ranking => format == PremiseAndMultiHypothesis,
            TaskType::Span => format == Mrc,
            TaskType::SequenceLabeling => format == Sequence,
            TaskType::MaskedLm => format == PlainText,
        }
    }

    pub fn needs_classes(self) -> bool {
        matches!(self, TaskType::Classification | TaskType::SequenceLabeling)
    }
}

/// One task, as declared in configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub data_format: DataFormat,
    pub task_type: TaskType,
    pub task_layer_type: String,
    pub labels: Option<Vec<String>>,
    pub n_class: Option<usize>,
    pub metric_meta: Vec<String>,
    pub loss: String,
    pub kd_loss: Option<String>,
    pub adv_loss: Option<String>,
    pub dropout_prob: Option<f64>,
    /// Softening temperature for `soft_cross_entropy`; 1 when absent.
    pub kd_temperature: Option<f64>,
}

impl TaskConfig {
    /// Config with every optional field defaulted from the task type.
    pub fn new(name: impl Into<String>, data_format: DataFormat, task_type: TaskType) -> Self {
        Self {
            name: name.into(),
            data_format,
            task_type,
            task_layer_type: "linear".to_string(),
            labels: None,
            n_class: None,
            metric_meta: vec![task_type.default_metric().as_str().to_string()],
            loss: task_type.default_loss().to_string(),
            kd_loss: None,
            adv_loss: None,
            dropout_prob: None,
            kd_temperature: None,
        }
    }

    pub fn with_classes(mut self, n_class: usize) -> Self {
        self.n_class = Some(n_class);
        self
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        self.n_class = Some(labels.len());
        self.labels = Some(labels.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Number of classes, falling back to the label list length.
    pub fn classes(&self) -> Option<usize> {
        self.n_class.or_else(|| self.labels.as_ref().map(Vec::len))
    }

    pub fn temperature(&self) -> f64 {
        self.kd_temperature.unwrap_or(1.0)
    }

    pub fn dropout(&self) -> f64 {
        self.dropout_prob.unwrap_or(0.0)
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self)
    }
}

/// A single reason a config was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    InvalidName(String),
    IncompatibleFormat { task_type: TaskType, data_format: DataFormat },
    UnknownLoss(String),
    IncompatibleLoss { field: &'static str, name: String, task_type: TaskType },
    UnknownKdLoss(String),
    UnknownAdvLoss(String),
    UnknownMetric(String),
    IncompatibleMetric { name: String, task_type: TaskType },
    MissingClasses,
    TooFewClasses(usize),
    LabelCountMismatch { labels: usize, n_class: usize },
    DuplicateLabel(String),
    UnexpectedClasses(TaskType),
    UnknownLayerType(String),
    DropoutOutOfRange(f64),
    BadTemperature(f64),
    EmptyMetrics,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidName(n) => write!(f, "invalid task name {n:?}"),
            Violation::IncompatibleFormat { task_type, data_format } => write!(
                f,
                "task_type {task_type} cannot read data_format {data_format}"
            ),
            Violation::UnknownLoss(n) => write!(f, "unknown loss {n:?}"),
            Violation::IncompatibleLoss { field, name, task_type } => {
                write!(f, "{field} {name:?} is not usable with task_type {task_type}")
            }
            Violation::UnknownKdLoss(n) => write!(f, "unknown kd_loss {n:?}"),
            Violation::UnknownAdvLoss(n) => write!(f, "unknown adv_loss {n:?}"),
            Violation::UnknownMetric(n) => write!(f, "unknown metric {n:?}"),
            Violation::IncompatibleMetric { name, task_type } => {
                write!(f, "metric {name:?} is not defined for task_type {task_type}")
            }
            Violation::MissingClasses => write!(f, "n_class (or labels) is required for this task_type"),
            Violation::TooFewClasses(n) => write!(f, "n_class must be at least 2, got {n}"),
            Violation::LabelCountMismatch { labels, n_class } => {
                write!(f, "labels lists {labels} entries but n_class is {n_class}")
            }
            Violation::DuplicateLabel(l) => write!(f, "duplicate label {l:?}"),
            Violation::UnexpectedClasses(t) => write!(f, "n_class/labels are not used by task_type {t}"),
            Violation::UnknownLayerType(t) => {
                write!(f, "unknown task_layer_type {t:?}; valid values: linear")
            }
            Violation::DropoutOutOfRange(p) => write!(f, "dropout_prob {p} outside [0, 1)"),
            Violation::BadTemperature(t) => write!(f, "kd_temperature must be positive, got {t}"),
            Violation::EmptyMetrics => write!(f, "metric_meta must name at least one metric"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<K> {
    kind: K,
    task_types: Vec<TaskType>,
}

/// Name → implementation tables for losses and metrics. Builtins are
/// registered by `Default`; additional names can be mapped onto existing
/// implementations with the `register_*` methods.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    losses: BTreeMap<String, Entry<LossKind>>,
    kd_losses: BTreeMap<String, Entry<KdLossKind>>,
    adv_losses: BTreeMap<String, Entry<AdvLossKind>>,
    metrics: BTreeMap<String, Entry<Metric>>,
}

impl Default for Registry {
    fn default() -> Self {
        use TaskType::*;
        let mut r = Self {
            losses: BTreeMap::new(),
            kd_losses: BTreeMap::new(),
            adv_losses: BTreeMap::new(),
            metrics: BTreeMap::new(),
        };
        r.register_loss("cross_entropy", LossKind::CrossEntropy, &[Classification]);
        r.register_loss("mse", LossKind::Mse, &[Regression]);
        r.register_loss("listwise_nll", LossKind::ListwiseNll, &[Ranking]);
        r.register_loss("span_ce", LossKind::SpanCe, &[Span]);
        r.register_loss("token_ce", LossKind::TokenCe, &[SequenceLabeling]);
        r.register_loss("masked_ce", LossKind::MaskedCe, &[MaskedLm]);
        r.register_kd_loss("soft_cross_entropy", KdLossKind::SoftCrossEntropy, &[Classification, Ranking]);
        r.register_kd_loss("mse_logits", KdLossKind::MseLogits, &[Classification, Regression, Ranking]);
        r.register_adv_loss(
            "symmetric_kl",
            AdvLossKind::SymmetricKl,
            &[Classification, Ranking, Span, SequenceLabeling],
        );
        r.register_adv_loss("mse", AdvLossKind::Mse, &[Regression]);
        r.register_metric("accuracy", Metric::Accuracy, &[Classification, Ranking, SequenceLabeling, MaskedLm]);
        r.register_metric("f1_binary", Metric::F1Binary, &[Classification, SequenceLabeling]);
        r.register_metric("exact_match", Metric::ExactMatch, &[Span]);
        r.register_metric("mse", Metric::Mse, &[Regression]);
        r.register_metric("pearson", Metric::Pearson, &[Regression]);
        r
    }
}

impl Registry {
    pub fn register_loss(&mut self, name: &str, kind: LossKind, task_types: &[TaskType]) {
        self.losses.insert(name.to_string(), Entry { kind, task_types: task_types.to_vec() });
    }

    pub fn register_kd_loss(&mut self, name: &str, kind: KdLossKind, task_types: &[TaskType]) {
        self.kd_losses.insert(name.to_string(), Entry { kind, task_types: task_types.to_vec() });
    }

    pub fn register_adv_loss(&mut self, name: &str, kind: AdvLossKind, task_types: &[TaskType]) {
        self.adv_losses.insert(name.to_string(), Entry { kind, task_types: task_types.to_vec() });
    }

    pub fn register_metric(&mut self, name: &str, kind: Metric, task_types: &[TaskType]) {
        self.metrics.insert(name.to_string(), Entry { kind, task_types: task_types.to_vec() });
    }

    pub fn loss(&self, name: &str) -> Option<LossKind> {
        self.losses.get(name).map(|e| e.kind)
    }

    pub fn kd_loss(&self, name: &str) -> Option<KdLossKind> {
        self.kd_losses.get(name).map(|e| e.kind)
    }

    pub fn adv_loss(&self, name: &str) -> Option<AdvLossKind> {
        self.adv_losses.get(name).map(|e| e.kind)
    }

    pub fn metric(&self, name: &str) -> Option<Metric> {
        self.metrics.get(name).map(|e| e.kind)
    }

    /// Every violation in `config`; empty means the config is runnable.
    pub fn validate(&self, config: &TaskConfig) -> Vec<Violation> {
        let mut out = Vec::new();
        let tt = config.task_type;
        let name_ok = !config.name.is_empty()
            && config
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !name_ok {
            out.push(Violation::InvalidName(config.name.clone()));
        }
        if !tt.accepts(config.data_format) {
            out.push(Violation::IncompatibleFormat {
                task_type: tt,
                data_format: config.data_format,
            });
        }
        if config.task_layer_type != "linear" {
            out.push(Violation::UnknownLayerType(config.task_layer_type.clone()));
        }
        match self.losses.get(&config.loss) {
            None => out.push(Violation::UnknownLoss(config.loss.clone())),
            Some(e) if !e.task_types.contains(&tt) => out.push(Violation::IncompatibleLoss {
                field: "loss",
                name: config.loss.clone(),
                task_type: tt,
            }),
            _ => {}
        }
        if let Some(kd) = &config.kd_loss {
            match self.kd_losses.get(kd) {
                None => out.push(Violation::UnknownKdLoss(kd.clone())),
                Some(e) if !e.task_types.contains(&tt) => out.push(Violation::IncompatibleLoss {
                    field: "kd_loss",
                    name: kd.clone(),
                    task_type: tt,
                }),
                _ => {}
            }
        }
        if let Some(adv) = &config.adv_loss {
            match self.adv_losses.get(adv) {
                None => out.push(Violation::UnknownAdvLoss(adv.clone())),
                Some(e) if !e.task_types.contains(&tt) => out.push(Violation::IncompatibleLoss {
                    field: "adv_loss",
                    name: adv.clone(),
                    task_type: tt,
                }),
                _ => {}
            }
        }
        if config.metric_meta.is_empty() {
            out.push(Violation::EmptyMetrics);
        }
        for m in &config.metric_meta {
            match self.metrics.get(m) {
                None => out.push(Violation::UnknownMetric(m.clone())),
                Some(e) if !e.task_types.contains(&tt) => out.push(Violation::IncompatibleMetric {
                    name: m.clone(),
                    task_type: tt,
                }),
                Some(e) if e.kind == Metric::F1Binary && tt == TaskType::Classification && config.classes() != Some(2) => {
                    out.push(Violation::IncompatibleMetric { name: m.clone(), task_type: tt })
                }
                _ => {}
            }
        }
        if let (Some(labels), Some(n)) = (&config.labels, config.n_class) {
            if labels.len() != n {
                out.push(Violation::LabelCountMismatch {
                    labels: labels.len(),
                    n_class: n,
                });
            }
        }
        if let Some(labels) = &config.labels {
            for (i, l) in labels.iter().enumerate() {
                if labels[..i].contains(l) {
                    out.push(Violation::DuplicateLabel(l.clone()));
                }
            }
        }
        if tt.needs_classes() {
            match config.classes() {
                None => out.push(Violation::MissingClasses),
                Some(n) if n < 2 => out.push(Violation::TooFewClasses(n)),
                _ => {}
            }
        } else if config.classes().is_some() {
            out.push(Violation::UnexpectedClasses(tt));
        }
        if let Some(p) = config.dropout_prob {
            if !(0.0..1.0).contains(&p) {
                out.push(Violation::DropoutOutOfRange(p));
            }
        }
        if let Some(t) = config.kd_temperature {
            if !(t > 0.0 && t.is_finite()) {
                out.push(Violation::BadTemperature(t));
            }
        }
        out
    }

    /// Validation as a `Result`, joining every violation into one message.
    pub fn check(&self, config: &TaskConfig) -> Result<()> {
        let v = self.validate(config);
        if v.is_empty() {
            return Ok(());
        }
        let tt = config.task_type;
        let joined: Vec<String> = v
            .iter()
            .map(|x| {
                let valid = match x {
                    Violation::UnknownLoss(_) => usable(&self.losses, tt),
                    Violation::UnknownKdLoss(_) => usable(&self.kd_losses, tt),
                    Violation::UnknownAdvLoss(_) => usable(&self.adv_losses, tt),
                    Violation::UnknownMetric(_) => usable(&self.metrics, tt),
                    _ => return x.to_string(),
                };
                format!("{x} (valid for {tt}: {valid})")
            })
            .collect();
        Err(Error::config(format!("task {}: {}", config.name, joined.join("; "))))
    }
}

fn usable<K>(entries: &BTreeMap<String, Entry<K>>, tt: TaskType) -> String {
    let names: Vec<&str> = entries
        .iter()
        .filter(|(_, e)| e.task_types.contains(&tt))
        .map(|(n, _)| n.as_str())
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join(", ")
    }
}

/// Bijection between label text and class ids, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    task: String,
    labels: Option<Vec<String>>,
    n_class: usize,
}

impl LabelMap {
    pub fn new(config: &TaskConfig) -> Result<Self> {
        let n_class = config
            .classes()
            .ok_or_else(|| Error::config(format!("task {} declares no classes", config.name)))?;
        Ok(Self {
            task: config.name.clone(),
            labels: config.labels.clone(),
            n_class,
        })
    }

    pub fn n_class(&self) -> usize {
        self.n_class
    }

    /// Without declared labels the text must be a class number.
    pub fn label_to_id(&self, text: &str) -> Result<usize> {
        match &self.labels {
            Some(labels) => labels.iter().position(|l| l == text).ok_or_else(|| {
                Error::data(format!("unknown label {text:?} for task {}", self.task))
            }),
            None => match text.trim().parse::<usize>() {
                Ok(id) if id < self.n_class => Ok(id),
                _ => Err(Error::data(format!(
                    "label {text:?} is not a class id in 0..{} for task {}",
                    self.n_class, self.task
                ))),
            },
        }
    }

    pub fn id_to_label(&self, id: usize) -> Result<String> {
        if id >= self.n_class {
            return Err(Error::data(format!(
                "class id {id} out of range 0..{} for task {}",
                self.n_class, self.task
            )));
        }
        Ok(match &self.labels {
            Some(labels) => labels[id].clone(),
            None => id.to_string(),
        })
    }
}
