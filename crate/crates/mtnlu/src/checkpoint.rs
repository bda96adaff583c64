//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTDF"  u32 version
//! u64 len, snapshot JSON
//! u64 step, u64 rng seed, 3 × [u64; 4] stream states (main, adversarial, sampler)
//! u32 count, then entries: u32 name len, name, u8 dtype, u32 rank, u64 dims…, u64 payload len, payload
//! u8 has optimizer; if 1: u64 step, u32 count, entries for first moments, entries for second moments
//! ```
//!
//! Payloads are row-major. The snapshot describes the model, so a
//! checkpoint can be loaded without any other file.

use std::path::Path;

use mtnlu_core::model::{ModelBundle, ModelSpec};
use mtnlu_core::optim::Adam;
use mtnlu_core::rng::{RngStreams, Xoshiro256pp};
use mtnlu_core::tensor::Tensor;
use mtnlu_core::{DType, Real};
use serde::{Deserialize, Serialize};

use crate::config::{parse_tasks, tasks_to_toml, PlanFile};
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MTDF";
pub const VERSION: u32 = 1;

/// Self-description embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    /// Task document with defaults expanded.
    pub tasks: String,
    pub plan: PlanFile,
    /// Ordinary vocabulary tokens in id order.
    pub vocab: Vec<String>,
    /// Stages of `plan` already completed.
    pub stages_done: usize,
}

impl Snapshot {
    pub fn new(tasks: &[mtnlu_core::task::TaskConfig], plan: &PlanFile, vocab: &mtnlu_core::vocab::Vocabulary, stages_done: usize) -> Self {
        Self {
            tasks: tasks_to_toml(tasks),
            plan: plan.clone(),
            vocab: vocab.words().to_vec(),
            stages_done,
        }
    }

    pub fn vocabulary(&self) -> Result<mtnlu_core::vocab::Vocabulary> {
        mtnlu_core::vocab::Vocabulary::from_tokens(self.vocab.clone())
            .map_err(|e| CliError::checkpoint(format!("embedded vocabulary: {}", crate::error::detail(e))))
    }

    /// The architecture the snapshot describes.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let bad = |e: CliError| CliError::checkpoint(format!("embedded config: {}", e.message()));
        let tasks = parse_tasks(&self.tasks).map_err(bad)?;
        let plan = self.plan.resolve().map_err(bad)?;
        Ok(ModelSpec {
            encoder: plan.encoder,
            vocab_size: self.vocab.len() + mtnlu_core::vocab::RESERVED.len(),
            max_seq_len: plan.max_seq_len,
            tasks,
        })
    }
}

/// Everything a checkpoint holds, with tensors in their stored precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub snapshot: Snapshot,
    pub step: u64,
    pub rngs: RngStreams,
    pub params: Vec<(String, Tensor<F>)>,
    pub optimizer: Option<OptimizerState<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn of(adam: &Adam<F>) -> Self {
        let (m, v) = adam.moments();
        Self {
            step: adam.step_count(),
            m: m.to_vec(),
            v: v.to_vec(),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<F: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(F::DTYPE.tag());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_u64(out, (t.len() * F::DTYPE.width()) as u64);
    for &v in t.data() {
        v.write_le(out);
    }
}

fn put_rng(out: &mut Vec<u8>, r: &Xoshiro256pp) {
    for w in r.state() {
        put_u64(out, w);
    }
}

pub fn encode<F: Real>(ckpt: &Checkpoint<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let json = serde_json::to_vec(&ckpt.snapshot).expect("snapshot serializes");
    put_u64(&mut out, json.len() as u64);
    out.extend_from_slice(&json);
    put_u64(&mut out, ckpt.step);
    put_u64(&mut out, ckpt.rngs.seed);
    put_rng(&mut out, &ckpt.rngs.main);
    put_rng(&mut out, &ckpt.rngs.adversarial);
    put_rng(&mut out, &ckpt.rngs.sampler);
    put_u32(&mut out, ckpt.params.len() as u32);
    for (name, t) in &ckpt.params {
        put_tensor(&mut out, name, t);
    }
    match &ckpt.optimizer {
        None => out.push(0),
        Some(o) => {
            out.push(1);
            put_u64(&mut out, o.step);
            put_u32(&mut out, o.m.len() as u32);
            for (i, t) in o.m.iter().chain(&o.v).enumerate() {
                put_tensor(&mut out, &format!("moment.{i}"), t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CliError::checkpoint(format!("{what} overflows")))
    }

    fn rng(&mut self) -> Result<Xoshiro256pp> {
        let mut s = [0u64; 4];
        for w in &mut s {
            *w = self.u64("rng state")?;
        }
        Ok(Xoshiro256pp::from_state(s))
    }

    /// One named tensor, converted to `F` if stored at another precision.
    fn tensor<F: Real>(&mut self) -> Result<(String, Tensor<F>)> {
        let n = self.u32("entry name length")? as usize;
        let name = String::from_utf8(self.take(n, "entry name")?.to_vec())
            .map_err(|_| CliError::checkpoint("entry name is not UTF-8"))?;
        let dtype = DType::from_tag(self.u8("dtype tag")?)
            .ok_or_else(|| CliError::checkpoint(format!("entry {name}: unknown dtype tag")))?;
        let rank = self.u32("rank")? as usize;
        let shape = (0..rank).map(|_| self.len("dimension")).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CliError::checkpoint(format!("entry {name}: shape overflows")))?;
        let payload = self.len("payload length")?;
        if Some(payload) != count.checked_mul(dtype.width()) {
            return Err(CliError::checkpoint(format!(
                "entry {name}: payload of {payload} bytes does not match shape {shape:?}"
            )));
        }
        let bytes = self.take(payload, &format!("payload of entry {name}"))?;
        let data: Vec<F> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| F::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| F::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::from_vec(&shape, data).map_err(|e| CliError::checkpoint(format!("entry {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CliError::checkpoint("bad magic: expected \"MTDF\""));
    }
    r.pos = 4;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CliError::checkpoint(format!(
            "format version {version} is not supported (expected {VERSION})"
        )));
    }
    let n = r.len("snapshot length")?;
    let snapshot: Snapshot = serde_json::from_slice(r.take(n, "snapshot")?)
        .map_err(|e| CliError::checkpoint(format!("snapshot: {e}")))?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let rngs = RngStreams {
        seed,
        main: r.rng()?,
        adversarial: r.rng()?,
        sampler: r.rng()?,
    };
    let count = r.u32("entry count")? as usize;
    let params = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let n = r.u32("moment count")? as usize;
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for i in 0..2 * n {
                let (_, t) = r.tensor()?;
                if i < n { m.push(t) } else { v.push(t) }
            }
            Some(OptimizerState { step, m, v })
        }
        other => return Err(CliError::checkpoint(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(CliError::checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        snapshot,
        step,
        rngs,
        params,
        optimizer,
    })
}

pub fn save<F: Real>(path: &Path, ckpt: &Checkpoint<F>) -> Result<()> {
    crate::error::write_file(path, encode(ckpt))
}

pub fn load<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Checkpoint(m) => CliError::checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl<F: Real> Checkpoint<F> {
    pub fn of(model: &ModelBundle<F>, snapshot: Snapshot, step: u64, rngs: &RngStreams, optimizer: Option<&Adam<F>>) -> Self {
        Self {
            snapshot,
            step,
            rngs: rngs.clone(),
            params: model
                .params
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.clone()))
                .collect(),
            optimizer: optimizer.map(OptimizerState::of),
        }
    }

    /// Copies stored values into `model` by name. Every parameter of the
    /// model must be present with the same shape; extra entries are ignored.
    pub fn apply_to(&self, model: &mut ModelBundle<F>) -> Result<()> {
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CliError::checkpoint(format!("parameter {name} is missing")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(CliError::checkpoint(format!(
                    "shape mismatch for {name}: checkpoint has {:?}, model expects {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            model.params.set(id, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the model the snapshot describes and fills it.
    pub fn model(&self) -> Result<ModelBundle<F>> {
        let mut model = ModelBundle::new(self.snapshot.model_spec()?, 0)?;
        self.apply_to(&mut model)?;
        if self.params.len() != model.params.len() {
            return Err(CliError::checkpoint(format!(
                "{} entries for {} parameters of the embedded config",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }
}
