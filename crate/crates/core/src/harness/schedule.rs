//! Learning-rate multipliers: linear warmup, then cosine or linear decay.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_WARMUP_RATIO: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Linear => "linear",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Self {
        ScheduleSpec {
            kind,
            warmup_ratio: DEFAULT_WARMUP_RATIO,
            total_steps,
        }
    }

    /// Multiplier 1.0 at every step.
    pub fn constant() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Linear,
            warmup_ratio: 0.0,
            total_steps: 0,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup ratio {} not in [0, 1]",
                self.warmup_ratio
            )));
        }
        Ok(())
    }
}

/// Schedule multiplier at `step`. Steps past `total_steps` clamp to the
/// final value. A zero-length schedule is constant 1.
pub fn lr_at(schedule: &ScheduleSpec, step: usize) -> f64 {
    let total = schedule.total_steps;
    if total == 0 {
        return 1.0;
    }
    let step = step.min(total);
    let warmup = schedule.warmup_steps().min(total);
    if step < warmup {
        return step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / span as f64;
    match schedule.kind {
        ScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        ScheduleKind::Linear => 1.0 - progress,
    }
}
