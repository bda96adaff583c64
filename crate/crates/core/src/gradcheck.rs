//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::heads::Prepared;
use crate::model::{Ctx, Mode, ModelBundle};
use crate::param::{ParamId, ParamStore};
use crate::real::{DType, Real};
use crate::rng::Xoshiro256pp;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Flat indices skipped because a relu input sat within `10·h` of zero.
    pub skipped: Vec<usize>,
    /// Flat indices that miss the tolerance by less than the rounding
    /// resolution of the difference quotient (a few ulps of the loss over
    /// `2h`), i.e. gradients too small for finite differences to measure.
    pub unresolved: Vec<usize>,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped.len()).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.tensors.iter().map(|t| t.unresolved.len()).sum()
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }
}

/// Loss differences within this many ulps are treated as rounding noise.
const ROUNDING_ULPS: f64 = 4.0;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval<F: Real, M>(model_fn: &mut M, params: &ParamStore<F>, kink_tol: F) -> Result<(f64, bool)>
where
    M: FnMut(&mut Tape<F>, &ParamStore<F>) -> Result<Var>,
{
    let mut tape = Tape::frozen();
    tape.set_kink_tolerance(kink_tol);
    let loss = model_fn(&mut tape, params)?;
    Ok((tape.value(loss).item().as_f64(), tape.near_kink()))
}

/// Compares tape gradients of `model_fn` against central differences for
/// the parameters in `only` (all parameters when `None`).
///
/// Requires 64-bit precision and an evaluation-mode model: dropout would
/// make the loss non-deterministic across the two perturbed evaluations.
pub fn gradient_check<F: Real, M>(
    mut model_fn: M,
    params: &mut ParamStore<F>,
    mode: Mode,
    only: Option<&[ParamId]>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    M: FnMut(&mut Tape<F>, &ParamStore<F>) -> Result<Var>,
{
    if F::DTYPE != DType::F64 {
        return Err(Error::contract("gradient check requires 64-bit precision"));
    }
    if mode != Mode::Eval {
        return Err(Error::contract(
            "gradient check requires eval mode: disable dropout before checking",
        ));
    }
    let mut tape = Tape::new();
    let loss = model_fn(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let h = config.h;
    let kink_tol = F::lit(10.0 * h);
    let mut rng = Xoshiro256pp::seed_from_u64(config.seed);
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.get(id).len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > config.coords_per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(config.coords_per_tensor);
            coords.sort_unstable();
        }
        let analytic = grads.param(id).cloned();
        let mut report = TensorCheck {
            name: String::from(params.name(id)),
            checked: 0,
            skipped: Vec::new(),
            unresolved: Vec::new(),
            max_rel_err: 0.0,
            worst_index: None,
        };
        for &c in &coords {
            let orig = params.get(id).data()[c];
            params.get_mut(id).data_mut()[c] = orig + F::lit(h);
            let (fp, kp) = eval(&mut model_fn, params, kink_tol)?;
            params.get_mut(id).data_mut()[c] = orig - F::lit(h);
            let (fm, km) = eval(&mut model_fn, params, kink_tol)?;
            params.get_mut(id).data_mut()[c] = orig;
            if kp || km {
                report.skipped.push(c);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[c].as_f64());
            let err = relative_error(a, numeric);
            let resolution = ROUNDING_ULPS * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0);
            if err >= config.tolerance && (2.0 * h * (a - numeric)).abs() <= resolution {
                report.unresolved.push(c);
                continue;
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst_index.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_index = Some(c);
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: config.tolerance,
    })
}

impl core::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} checked {:>3} skipped {:>3} unresolved {:>3} max_rel_err {:.3e}",
                t.name,
                t.checked,
                t.skipped.len(),
                t.unresolved.len(),
                t.max_rel_err
            )?;
        }
        write!(
            f,
            "{}: max relative error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_err(),
            self.tolerance
        )
    }
}

/// Checks the task loss of a whole model (lexicon, encoder, pooler, head)
/// on one prepared batch. Only parameters the loss depends on are sampled.
pub fn check_model<F: Real>(
    model: &mut ModelBundle<F>,
    task: &str,
    prep: &Prepared,
    mode: Mode,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if mode != Mode::Eval || model.spec.encoder.dropout_prob > 0.0 || model.heads.iter().any(|h| h.dropout > 0.0) {
        return Err(Error::contract(
            "gradient check requires eval mode: disable dropout before checking",
        ));
    }
    let head = model.head(task)?.clone();
    let mut params = core::mem::take(&mut model.params);
    let used: Vec<ParamId> = {
        let mut tape = Tape::new();
        let (_, out) = model.forward_with(&mut tape, &params, &head, prep, &mut Ctx::eval())?;
        let loss = head.loss(&mut tape, &out, prep)?;
        let grads = tape.backward(loss)?;
        params.ids().filter(|&id| grads.param(id).is_some()).collect()
    };
    let bundle: &ModelBundle<F> = model;
    let result = gradient_check(
        |tape: &mut Tape<F>, p: &ParamStore<F>| {
            let (_, out) = bundle.forward_with(tape, p, &head, prep, &mut Ctx::eval())?;
            head.loss(tape, &out, prep)
        },
        &mut params,
        mode,
        Some(&used),
        config,
    );
    model.params = params;
    result
}

/// Convenience for error messages naming the worst tensor.
pub fn worst(report: &GradCheckReport) -> String {
    report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|t| format!("{} ({:.3e})", t.name, t.max_rel_err))
        .unwrap_or_default()
}
