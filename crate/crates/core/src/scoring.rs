//! Expert scores computed from tracked Adam moments, and Top-K selection.
//!
//! Scores read the raw (not bias-corrected) moments of the current step.
//! The update itself applies bias correction; the two are kept literal and
//! are not reconciled here.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::ExpertState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScoringMode {
    /// Expected preconditioned descent, Top-K update.
    Epd,
    /// Preconditioned Frobenius norm, Top-K update.
    Pfn,
    /// Every expert is updated; EPD is still recorded for traces.
    Dense,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Epd => "EPD",
            ScoringMode::Pfn => "PFN",
            ScoringMode::Dense => "DENSE",
        })
    }
}

impl FromStr for ScoringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EPD" => Ok(ScoringMode::Epd),
            "PFN" => Ok(ScoringMode::Pfn),
            "DENSE" => Ok(ScoringMode::Dense),
            other => Err(Error::Config(format!("unknown scoring mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRecord {
    pub expert_index: usize,
    pub score: f64,
    pub n_params: usize,
    pub lr_used: f64,
}

/// `sum_theta m^2 / (sqrt(v) + eps)` over every entry of every parameter.
fn preconditioned_mass(state: &ExpertState, eps: f64) -> f64 {
    let mut total = 0.0;
    for (m, v) in state.m.iter().zip(&state.v) {
        for (&mi, &vi) in m.data().iter().zip(v.data()) {
            total += mi * mi / (vi.sqrt() + eps);
        }
    }
    total
}

/// First-order predicted loss decrease of this expert's step:
/// `lr * sum m^2 / (sqrt(v) + eps)`.
pub fn predicted_loss_drop(state: &ExpertState, lr: f64, eps: f64) -> f64 {
    lr * preconditioned_mass(state, eps)
}

/// Expected preconditioned descent: the predicted loss drop divided by the
/// expert's parameter count.
pub fn epd_score(state: &ExpertState, lr: f64, eps: f64) -> f64 {
    if state.n_params == 0 {
        return 0.0;
    }
    lr / state.n_params as f64 * preconditioned_mass(state, eps)
}

/// Root-mean-square of the preconditioned direction `m / (sqrt(v) + eps)`.
pub fn pfn_score(state: &ExpertState, eps: f64) -> f64 {
    if state.n_params == 0 {
        return 0.0;
    }
    let mut sq = 0.0;
    for (m, v) in state.m.iter().zip(&state.v) {
        for (&mi, &vi) in m.data().iter().zip(v.data()) {
            let d = mi / (vi.sqrt() + eps);
            sq += d * d;
        }
    }
    sq.sqrt() / (state.n_params as f64).sqrt()
}

/// Scores every expert of one module. `Dense` records EPD scores.
pub fn score_experts(
    states: &[ExpertState],
    lrs: &[f64],
    mode: ScoringMode,
    eps: f64,
) -> Vec<ScoreRecord> {
    states
        .iter()
        .zip(lrs)
        .enumerate()
        .map(|(i, (state, &lr))| ScoreRecord {
            expert_index: i,
            score: match mode {
                ScoringMode::Epd | ScoringMode::Dense => epd_score(state, lr, eps),
                ScoringMode::Pfn => pfn_score(state, eps),
            },
            n_params: state.n_params,
            lr_used: lr,
        })
        .collect()
}

/// Indices of the `k` highest scores, best first. Equal scores go to the
/// lower expert index, so the FFT pathway wins ties.
pub fn select_winners(scores: &[ScoreRecord], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::contract("top-k needs k >= 1"));
    }
    if k > scores.len() {
        return Err(Error::contract(format!(
            "top-k with k = {k} but only {} experts",
            scores.len()
        )));
    }
    let mut order: Vec<&ScoreRecord> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.expert_index.cmp(&b.expert_index))
    });
    Ok(order.into_iter().take(k).map(|r| r.expert_index).collect())
}
