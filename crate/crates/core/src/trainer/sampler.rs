use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TaskKind;

/// Modality-dropout probabilities over the spoken tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSchedule {
    pub vsr: f64,
    pub asr: f64,
    pub avsr: f64,
}

impl Default for DropoutSchedule {
    fn default() -> Self {
        Self { vsr: 0.25, asr: 0.25, avsr: 0.5 }
    }
}

impl DropoutSchedule {
    pub const VSR_ONLY: DropoutSchedule = DropoutSchedule { vsr: 1.0, asr: 0.0, avsr: 0.0 };
    pub const ASR_FOCUSED: DropoutSchedule = DropoutSchedule { vsr: 0.25, asr: 0.5, avsr: 0.25 };

    pub fn validate(&self) -> Result<()> {
        let p = [self.vsr, self.asr, self.avsr];
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("dropout probabilities {p:?} must be non-negative")));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("dropout probabilities {p:?} must sum to 1")));
        }
        Ok(())
    }

    pub fn weights(&self) -> [(TaskKind, f64); 3] {
        [(TaskKind::Vsr, self.vsr), (TaskKind::Asr, self.asr), (TaskKind::Avsr, self.avsr)]
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        self.weights().into_iter().filter(|(_, p)| *p > 0.0).map(|(t, _)| t).collect()
    }
}

/// Batch-level task mix: a signed (SLT) batch with probability
/// `signed_fraction`, otherwise a spoken batch whose task comes from `spoken`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMix {
    pub signed_fraction: f64,
    pub spoken: DropoutSchedule,
}

impl TaskMix {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.signed_fraction) {
            return Err(Error::Config(format!("signed_fraction {} must lie in [0, 1]", self.signed_fraction)));
        }
        self.spoken.validate()
    }

    /// Tasks with non-zero probability, in canonical order.
    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut out = Vec::new();
        if self.signed_fraction > 0.0 {
            out.push(TaskKind::Slt);
        }
        if self.signed_fraction < 1.0 {
            out.extend(self.spoken.tasks());
        }
        out
    }
}

pub fn sample_task<R: Rng>(rng: &mut R, mix: &TaskMix) -> TaskKind {
    if rng.gen::<f64>() < mix.signed_fraction {
        return TaskKind::Slt;
    }
    let w = mix.spoken.weights();
    let dist = WeightedIndex::new(w.iter().map(|(_, p)| *p)).expect("validated dropout schedule");
    w[dist.sample(rng)].0
}
