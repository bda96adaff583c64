//! Smoothness-inducing adversarial regularization on lexicon embeddings.
//!
//! A perturbation `δ` of the embedding matrix is grown by normalized
//! gradient ascent on the divergence between clean and perturbed
//! predictions, kept inside a per-example L2 ball, and the divergence at the
//! final `δ` is added to the training loss.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadOutput, Prepared, TaskHead};
use crate::model::{Ctx, Mode, ModelBundle};
use crate::real::Real;
use crate::rng::Xoshiro256pp;
use crate::tape::{Divergence, Tape, Var};
use crate::task::{AdvLossKind, TaskConfig};
use crate::tensor::Tensor;
use crate::vocab::TokenBatch;
#[cfg(not(feature = "std"))]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvConfig {
    /// Per-example L2 radius.
    pub epsilon: f64,
    pub step_size: f64,
    pub n_steps: usize,
    pub init_noise_sigma: f64,
    /// Weight of the adversarial term in the total loss.
    pub alpha: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-1,
            step_size: 1e-3,
            n_steps: 1,
            init_noise_sigma: 1e-5,
            alpha: 1.0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::config(format!("adversarial epsilon {} must be ≥ 0", self.epsilon)));
        }
        if !(self.step_size > 0.0) || self.n_steps == 0 {
            return Err(Error::config("adversarial step_size must be > 0 and n_steps ≥ 1"));
        }
        if !(self.init_noise_sigma >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::config("adversarial init_noise_sigma and alpha must be ≥ 0"));
        }
        Ok(())
    }

    /// Whether the term can be non-zero at all.
    pub fn active(&self) -> bool {
        self.epsilon > 0.0 && self.alpha > 0.0
    }
}

/// The divergence a task uses, from its `adv_loss` or its task type.
pub fn divergence_for(head: &TaskHead, config: &TaskConfig) -> Result<AdvLossKind> {
    let kind = match config.adv_loss.as_deref() {
        None if head.kind == HeadKind::Regression => AdvLossKind::Mse,
        None => AdvLossKind::SymmetricKl,
        Some("symmetric_kl") => AdvLossKind::SymmetricKl,
        Some("mse") => AdvLossKind::Mse,
        Some(other) => {
            return Err(Error::config(format!(
                "task {}: unknown adv_loss {other:?}; valid values: symmetric_kl, mse",
                config.name
            )))
        }
    };
    let ok = match head.kind {
        HeadKind::Regression => kind == AdvLossKind::Mse,
        HeadKind::MaskedLm(_) => false,
        _ => kind == AdvLossKind::SymmetricKl,
    };
    if !ok {
        return Err(Error::config(format!(
            "task {}: adversarial divergence {kind:?} is incompatible with a {:?} head",
            config.name, head.kind
        )));
    }
    Ok(kind)
}

/// Mean over views of `D(clean, perturbed)`; distributions are the row
/// softmax of each view except under `Mse`, which compares raw values.
pub fn view_divergence<F: Real>(tape: &mut Tape<F>, kind: AdvLossKind, clean: &[Var], perturbed: &[Var]) -> Result<Var> {
    if clean.len() != perturbed.len() {
        return Err(Error::contract("clean and perturbed outputs differ in structure"));
    }
    if clean.is_empty() {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let mut total: Option<Var> = None;
    for (&c, &p) in clean.iter().zip(perturbed) {
        let d = match kind {
            AdvLossKind::Mse => tape.divergence(Divergence::Mse, p, c)?,
            AdvLossKind::SymmetricKl => {
                let pc = tape.softmax(c, 1)?;
                let pp = tape.softmax(p, 1)?;
                tape.divergence(Divergence::SymmetricKl, pp, pc)?
            }
        };
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let total = total.unwrap_or_else(|| unreachable!());
    Ok(tape.scale(total, F::lit(1.0 / clean.len() as f64)))
}

/// Zeroes padded rows, then rescales each example's block of `delta` into
/// the L2 ball of radius `epsilon`.
pub fn project<F: Real>(delta: &mut Tensor<F>, tokens: &TokenBatch, epsilon: f64) {
    let m = tokens.seq_len;
    let d = delta.cols();
    let eps = F::lit(epsilon);
    for r in 0..tokens.rows {
        let block = &mut delta.data_mut()[r * m * d..(r + 1) * m * d];
        for (t, &mk) in tokens.row_mask(r).iter().enumerate() {
            if mk == 0 {
                block[t * d..(t + 1) * d].fill(F::zero());
            }
        }
        let norm = block.iter().map(|&v| v * v).sum::<F>().sqrt();
        if norm > eps {
            let s = if epsilon == 0.0 { F::zero() } else { eps / norm };
            for v in block.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Per-example L2 norms of a perturbation.
pub fn example_norms<F: Real>(delta: &Tensor<F>, tokens: &TokenBatch) -> Vec<f64> {
    let block = tokens.seq_len * delta.cols();
    delta
        .data()
        .chunks(block)
        .map(|c| c.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// Grows `δ` by `n_steps` of normalized ascent on the divergence from the
/// fixed `clean` views. Dropout is off during the ascent and no parameter
/// or optimizer state is touched; only `rng` (the adversarial stream) is
/// advanced, for the initial noise.
#[allow(clippy::too_many_arguments)]
pub fn generate_perturbation<F: Real>(
    model: &ModelBundle<F>,
    head: &TaskHead,
    prep: &Prepared,
    embeddings: &Tensor<F>,
    clean: &[Tensor<F>],
    kind: AdvLossKind,
    config: &AdvConfig,
    rng: &mut Xoshiro256pp,
    mode: Mode,
) -> Result<Tensor<F>> {
    if mode == Mode::Eval {
        return Err(Error::contract("embedding perturbation is not available in eval mode"));
    }
    if !(config.epsilon >= 0.0) {
        return Err(Error::config(format!("adversarial epsilon {} must be ≥ 0", config.epsilon)));
    }
    let shape = embeddings.shape().to_vec();
    if config.epsilon == 0.0 {
        return Ok(Tensor::zeros(&shape));
    }
    let mut delta = Tensor::randn(&shape, config.init_noise_sigma, rng);
    project(&mut delta, &prep.tokens, config.epsilon);
    let m = prep.tokens.seq_len;
    let d = shape[1];
    for _ in 0..config.n_steps {
        let mut tape = Tape::frozen();
        let e = tape.constant(embeddings.clone());
        let dv = tape.leaf(delta.clone(), true);
        let x = tape.add(e, dv)?;
        let out = model.forward_from(&mut tape, head, prep, x, &mut Ctx::train_deterministic())?;
        let views = head.views(&mut tape, &out, prep)?;
        let fixed: Vec<Var> = clean.iter().map(|c| tape.constant(c.clone())).collect();
        let loss = view_divergence(&mut tape, kind, &fixed, &views)?;
        let grads = tape.backward(loss)?;
        let Some(g) = grads.wrt(dv) else { break };
        let step = F::lit(config.step_size);
        for r in 0..prep.tokens.rows {
            let range = r * m * d..(r + 1) * m * d;
            let gb = &g.data()[range.clone()];
            let norm = gb.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm > F::zero() && norm.is_finite() {
                for (dst, &gv) in delta.data_mut()[range].iter_mut().zip(gb) {
                    *dst += step * gv / norm;
                }
            }
        }
        project(&mut delta, &prep.tokens, config.epsilon);
    }
    Ok(delta)
}

/// `D(f(x+δ), f(x))` on the training tape. Both branches stay
/// differentiable; `δ` enters as a constant.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss<F: Real>(
    tape: &mut Tape<F>,
    model: &ModelBundle<F>,
    head: &TaskHead,
    prep: &Prepared,
    clean: &HeadOutput,
    embeddings: Var,
    delta: &Tensor<F>,
    kind: AdvLossKind,
    ctx: &mut Ctx<'_>,
) -> Result<Var> {
    let perturbed = model.forward_perturbed(tape, head, prep, embeddings, delta, ctx)?;
    let cv = head.views(tape, clean, prep)?;
    let pv = head.views(tape, &perturbed, prep)?;
    view_divergence(tape, kind, &cv, &pv)
}
