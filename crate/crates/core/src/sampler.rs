//! Task samplers for multi-task stages.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{Xoshiro256pp, STREAM_SAMPLER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Uniform,
    Proportional,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Proportional => "proportional",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplerKind::Uniform),
            "proportional" => Ok(SamplerKind::Proportional),
            other => Err(Error::config(alloc::format!(
                "unknown sampler {other:?}; valid values: uniform, proportional"
            ))),
        }
    }
}

/// Infinite, reproducible stream of task indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSampler {
    cumulative: Vec<f64>,
    rng: Xoshiro256pp,
}

impl TaskSampler {
    pub fn new(kind: SamplerKind, sizes: &[usize], seed: u64) -> Result<Self> {
        Self::with_rng(kind, sizes, Xoshiro256pp::stream(seed, STREAM_SAMPLER))
    }

    pub fn with_rng(kind: SamplerKind, sizes: &[usize], rng: Xoshiro256pp) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::config("a task sampler needs at least one task"));
        }
        if sizes.contains(&0) {
            return Err(Error::config("every sampled task needs at least one example"));
        }
        let weights: Vec<f64> = match kind {
            SamplerKind::Uniform => sizes.iter().map(|_| 1.0).collect(),
            SamplerKind::Proportional => sizes.iter().map(|&s| s as f64).collect(),
        };
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(Self { cumulative, rng })
    }

    pub fn next_task(&mut self) -> usize {
        let last = self.cumulative.len() - 1;
        if last == 0 {
            return 0;
        }
        let u = self.rng.next_f64();
        self.cumulative[..last].iter().position(|&c| u < c).unwrap_or(last)
    }

    pub fn rng(&self) -> &Xoshiro256pp {
        &self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task_always() {
        let mut s = TaskSampler::new(SamplerKind::Proportional, &[7], 1).unwrap();
        assert!((0..100).all(|_| s.next_task() == 0));
    }

    #[test]
    fn rejects_empty() {
        assert!(TaskSampler::new(SamplerKind::Uniform, &[], 1).is_err());
    }

    #[test]
    fn reproducible() {
        let mut a = TaskSampler::new(SamplerKind::Uniform, &[1, 1, 1], 9).unwrap();
        let mut b = TaskSampler::new(SamplerKind::Uniform, &[1, 1, 1], 9).unwrap();
        for _ in 0..100 {
            assert_eq!(a.next_task(), b.next_task());
        }
    }
}
