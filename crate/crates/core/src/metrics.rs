//! Evaluation metrics over scored predictions.

use alloc::format;

use crate::error::{Error, Result};
use crate::heads::Outcome;
use crate::task::Metric;

pub fn compute_metric(metric: Metric, outcomes: &[Outcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::Metric(format!("{metric} over an empty dataset")));
    }
    let n = outcomes.len() as f64;
    match metric {
        Metric::Accuracy | Metric::ExactMatch => {
            let mut hit = 0usize;
            for o in outcomes {
                hit += usize::from(match *o {
                    Outcome::Class { pred, gold } => pred == gold,
                    Outcome::Span { pred, gold } => pred == gold,
                    Outcome::Value { .. } => return Err(mismatch(metric)),
                });
            }
            Ok(hit as f64 / n)
        }
        Metric::F1Binary => {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for o in outcomes {
                let Outcome::Class { pred, gold } = *o else { return Err(mismatch(metric)) };
                match (pred == 1, gold == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            Ok(f1(tp, fp, fn_))
        }
        Metric::Mse => {
            let mut s = 0.0;
            for o in outcomes {
                let Outcome::Value { pred, gold } = *o else { return Err(mismatch(metric)) };
                s += (pred - gold) * (pred - gold);
            }
            Ok(s / n)
        }
        Metric::Pearson => {
            let mut xs = alloc::vec::Vec::with_capacity(outcomes.len());
            for o in outcomes {
                let Outcome::Value { pred, gold } = *o else { return Err(mismatch(metric)) };
                xs.push((pred, gold));
            }
            pearson(&xs)
        }
    }
}

fn mismatch(metric: Metric) -> Error {
    Error::Metric(format!("{metric} does not apply to these predictions"))
}

/// `2PR/(P+R)`, 0 when `P + R = 0`.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64> {
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("pearson correlation is undefined for a constant series".into()));
    }
    Ok(sxy / num_traits::Float::sqrt(sxx * syy))
}
