//! Knowledge distillation: teacher soft targets and the averaged
//! hard/soft student objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{sequential_batches, Example};
use crate::error::{Error, Result};
use crate::heads::{group_row, HeadKind, HeadOutput, Prepared, TaskHead};
use crate::model::{Ctx, ModelBundle};
use crate::real::Real;
use crate::tape::{Tape, Targets, Var};
use crate::task::{KdLossKind, TaskConfig};
use crate::tensor::Tensor;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SoftKind {
    /// Mean of teacher softmax rows.
    Probabilities,
    /// Mean of teacher logit rows.
    Logits,
    /// Mean of teacher predictions (one value).
    Regression,
}

impl SoftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftKind::Probabilities => "probabilities",
            SoftKind::Logits => "logits",
            SoftKind::Regression => "regression",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "probabilities" => Ok(SoftKind::Probabilities),
            "logits" => Ok(SoftKind::Logits),
            "regression" => Ok(SoftKind::Regression),
            other => Err(Error::data(format!("unknown soft target kind {other:?}"))),
        }
    }

    /// What a task with the given head and distillation loss consumes.
    pub fn for_task(head: HeadKind, kd: KdLossKind) -> Result<Self> {
        match (head, kd) {
            (HeadKind::Classification(_) | HeadKind::Ranking, KdLossKind::SoftCrossEntropy) => Ok(SoftKind::Probabilities),
            (HeadKind::Classification(_) | HeadKind::Ranking, KdLossKind::MseLogits) => Ok(SoftKind::Logits),
            (HeadKind::Regression, KdLossKind::MseLogits) => Ok(SoftKind::Regression),
            _ => Err(Error::config(format!("distillation loss {kd:?} does not apply to a {head:?} head"))),
        }
    }
}

/// Per-example teacher outputs for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetSet {
    pub task: String,
    pub kind: SoftKind,
    /// Row width; `None` when rows vary in length (ranking groups).
    pub n_class: Option<usize>,
    pub teachers: usize,
    pub config_hash: String,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl SoftTargetSet {
    pub fn validate(&self) -> Result<()> {
        for (uid, row) in &self.rows {
            if row.is_empty() || self.n_class.is_some_and(|k| row.len() != k) {
                return Err(Error::data(format!("soft target for {uid} has width {}", row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("soft target for {uid} is not finite")));
            }
            if self.kind == SoftKind::Probabilities {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::data(format!("soft target for {uid} sums to {s}")));
                }
            }
        }
        Ok(())
    }

    /// Every uid must belong to the task's training set.
    pub fn check_uids(&self, train: &[Example]) -> Result<()> {
        let known: alloc::collections::BTreeSet<&str> = train.iter().map(|e| e.uid.as_str()).collect();
        match self.rows.keys().find(|u| !known.contains(u.as_str())) {
            Some(u) => Err(Error::data(format!(
                "soft targets for task {} mention unknown uid {u:?}",
                self.task
            ))),
            None => Ok(()),
        }
    }

    pub fn get(&self, uid: &str) -> Option<&[f64]> {
        self.rows.get(uid).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// The task's declared distillation loss.
pub fn kd_kind(config: &TaskConfig) -> Result<KdLossKind> {
    match config.kd_loss.as_deref() {
        Some("soft_cross_entropy") => Ok(KdLossKind::SoftCrossEntropy),
        Some("mse_logits") => Ok(KdLossKind::MseLogits),
        Some(other) => Err(Error::config(format!(
            "task {}: unknown kd_loss {other:?}; valid values: soft_cross_entropy, mse_logits",
            config.name
        ))),
        None => Err(Error::config(format!("task {} declares no kd_loss", config.name))),
    }
}

/// `p^(1/τ)` renormalized. `τ = 1` returns the row unchanged.
pub fn temper(row: &[f64], tau: f64) -> Vec<f64> {
    if tau == 1.0 {
        return row.to_vec();
    }
    let powered: Vec<f64> = row.iter().map(|&p| if p > 0.0 { (p.ln() / tau).exp() } else { 0.0 }).collect();
    let s: f64 = powered.iter().sum();
    powered.into_iter().map(|p| p / s).collect()
}

fn softmax_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// One teacher's outputs on `examples`, in order.
pub fn teacher_rows<F: Real>(
    model: &ModelBundle<F>,
    task: &str,
    examples: &[Example],
    kind: SoftKind,
    batch_size: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    let head = model.head(task)?;
    let mut out = Vec::with_capacity(examples.len());
    for batch in sequential_batches(task, examples, batch_size)? {
        let prep = head.prepare(&batch, None)?;
        let mut tape = Tape::new();
        let (_, ho) = model.forward(&mut tape, head, &prep, &mut Ctx::eval())?;
        let rows: Vec<Vec<f64>> = match (&ho, kind) {
            (HeadOutput::Classification(v), SoftKind::Probabilities | SoftKind::Logits) => {
                let t = tape.value(*v);
                (0..t.rows()).map(|r| t.row(r).iter().map(|x| x.as_f64()).collect()).collect()
            }
            (HeadOutput::Ranking(v), SoftKind::Probabilities | SoftKind::Logits) => {
                let t = tape.value(*v);
                prep.group_ranges()
                    .into_iter()
                    .map(|(s, k)| t.data()[s..s + k].iter().map(|x| x.as_f64()).collect())
                    .collect()
            }
            (HeadOutput::Regression(v), SoftKind::Regression) => {
                tape.value(*v).data().iter().map(|x| alloc::vec![x.as_f64()]).collect()
            }
            _ => {
                return Err(Error::config(format!(
                    "task {task}: {:?} head cannot export {} soft targets",
                    head.kind,
                    kind.as_str()
                )))
            }
        };
        for (uid, row) in batch.uids.into_iter().zip(rows) {
            let row = if kind == SoftKind::Probabilities { softmax_f64(&row) } else { row };
            out.push((uid, row));
        }
    }
    Ok(out)
}

/// Averages the outputs of an ensemble of teachers, each paired with the
/// task's training examples encoded for that teacher.
pub fn generate_soft_targets<F: Real>(
    teachers: &[(&ModelBundle<F>, &[Example])],
    task: &str,
    kind: SoftKind,
    batch_size: usize,
    config_hash: &str,
) -> Result<SoftTargetSet> {
    if teachers.is_empty() {
        return Err(Error::config("soft targets need at least one teacher"));
    }
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, (model, examples)) in teachers.iter().enumerate() {
        if model.head(task).is_err() {
            return Err(Error::config(format!("teacher {i} has no head for task {task}")));
        }
        let rows = teacher_rows(model, task, examples, kind, batch_size)?;
        if i == 0 {
            order = rows.iter().map(|r| r.0.clone()).collect();
        } else if rows.len() != order.len() {
            return Err(Error::data(format!("teacher {i} saw a different example set for {task}")));
        }
        for (uid, row) in rows {
            match sums.get_mut(&uid) {
                Some(acc) if acc.len() == row.len() => acc.iter_mut().zip(&row).for_each(|(a, b)| *a += b),
                Some(_) => return Err(Error::data(format!("teachers disagree on the width of {uid}"))),
                None if i == 0 => {
                    sums.insert(uid, row);
                }
                None => return Err(Error::data(format!("teacher {i} produced unknown uid {uid}"))),
            }
        }
    }
    let n = teachers.len() as f64;
    if teachers.len() > 1 {
        for row in sums.values_mut() {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    let widths: alloc::collections::BTreeSet<usize> = sums.values().map(Vec::len).collect();
    let set = SoftTargetSet {
        task: String::from(task),
        kind,
        n_class: if widths.len() == 1 { widths.into_iter().next() } else { None },
        teachers: teachers.len(),
        config_hash: String::from(config_hash),
        rows: sums,
    };
    set.validate()?;
    Ok(set)
}

/// Mean soft loss over the listed examples.
#[allow(clippy::too_many_arguments)]
pub fn soft_loss<F: Real>(
    tape: &mut Tape<F>,
    head: &TaskHead,
    out: &HeadOutput,
    prep: &Prepared,
    rows: &[usize],
    soft: &[&[f64]],
    kind: KdLossKind,
    tau: f64,
) -> Result<Var> {
    if rows.len() != soft.len() || rows.is_empty() {
        return Err(Error::contract("soft loss needs one soft row per listed example"));
    }
    let inv_tau = F::lit(1.0 / tau);
    match out {
        HeadOutput::Classification(logits) => {
            let z = if rows.len() == prep.examples() { *logits } else { tape.gather_rows(*logits, rows)? };
            let k = tape.value(z).cols();
            let mut flat = Vec::with_capacity(rows.len() * k);
            for s in soft {
                if s.len() != k {
                    return Err(Error::data(format!("soft row width {} for {k} classes", s.len())));
                }
                match kind {
                    KdLossKind::SoftCrossEntropy => flat.extend(temper(s, tau)),
                    KdLossKind::MseLogits => flat.extend_from_slice(s),
                }
            }
            let t = Tensor::from_f64(&[rows.len(), k], &flat)?;
            match kind {
                KdLossKind::SoftCrossEntropy => {
                    let zs = if tau == 1.0 { z } else { tape.scale(z, inv_tau) };
                    tape.cross_entropy(zs, Targets::Soft(&t))
                }
                KdLossKind::MseLogits => {
                    let c = tape.constant(t);
                    tape.mse(z, c)
                }
            }
        }
        HeadOutput::Ranking(scores) => {
            let ranges = prep.group_ranges();
            let mut total: Option<Var> = None;
            for (&g, s) in rows.iter().zip(soft) {
                let (start, k) = ranges[g];
                if s.len() != k {
                    return Err(Error::data(format!("soft row width {} for a group of {k}", s.len())));
                }
                let z = group_row(tape, *scores, (start, k))?;
                let l = match kind {
                    KdLossKind::SoftCrossEntropy => {
                        let t = Tensor::from_f64(&[1, k], &temper(s, tau))?;
                        let zs = if tau == 1.0 { z } else { tape.scale(z, inv_tau) };
                        tape.cross_entropy(zs, Targets::Soft(&t))?
                    }
                    KdLossKind::MseLogits => {
                        let c = tape.constant(Tensor::from_f64(&[1, k], s)?);
                        tape.mse(z, c)?
                    }
                };
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.unwrap_or_else(|| unreachable!());
            Ok(tape.scale(total, F::lit(1.0 / rows.len() as f64)))
        }
        HeadOutput::Regression(pred) if kind == KdLossKind::MseLogits => {
            let p = if rows.len() == prep.examples() { *pred } else { tape.gather_rows(*pred, rows)? };
            let vals: Vec<f64> = soft.iter().map(|s| s[0]).collect();
            let c = tape.constant(Tensor::from_f64(&[rows.len(), 1], &vals)?);
            tape.mse(p, c)
        }
        _ => Err(Error::config(format!(
            "distillation loss {kind:?} does not apply to a {:?} head",
            head.kind
        ))),
    }
}

/// Per-example average of hard and soft losses. Examples without a soft
/// target contribute their hard loss alone; with none at all this is
/// exactly the plain task loss.
#[allow(clippy::too_many_arguments)]
pub fn kd_combined_loss<F: Real>(
    tape: &mut Tape<F>,
    head: &TaskHead,
    out: &HeadOutput,
    prep: &Prepared,
    soft: &[Option<&[f64]>],
    kind: KdLossKind,
    tau: f64,
) -> Result<Var> {
    Ok(kd_combined_terms(tape, head, out, prep, soft, kind, tau)?.0)
}

/// [`kd_combined_loss`] together with the soft term, when one was formed.
#[allow(clippy::too_many_arguments)]
pub fn kd_combined_terms<F: Real>(
    tape: &mut Tape<F>,
    head: &TaskHead,
    out: &HeadOutput,
    prep: &Prepared,
    soft: &[Option<&[f64]>],
    kind: KdLossKind,
    tau: f64,
) -> Result<(Var, Option<Var>)> {
    let n = prep.examples();
    if soft.len() != n {
        return Err(Error::contract("one soft-target slot per example is required"));
    }
    let with: Vec<usize> = (0..n).filter(|&i| soft[i].is_some()).collect();
    if with.is_empty() {
        return Ok((head.loss(tape, out, prep)?, None));
    }
    let without: Vec<usize> = (0..n).filter(|&i| soft[i].is_none()).collect();
    let rows: Vec<&[f64]> = with.iter().filter_map(|&i| soft[i]).collect();
    let hard = head.subset_loss(tape, out, prep, &with)?;
    let sl = soft_loss(tape, head, out, prep, &with, &rows, kind, tau)?;
    let both = tape.add(hard, sl)?;
    let combined = tape.scale(both, F::lit(0.5));
    if without.is_empty() {
        return Ok((combined, Some(sl)));
    }
    let rest = head.subset_loss(tape, out, prep, &without)?;
    let a = tape.scale(combined, F::lit(with.len() as f64 / n as f64));
    let b = tape.scale(rest, F::lit(without.len() as f64 / n as f64));
    Ok((tape.add(a, b)?, Some(sl)))
}
