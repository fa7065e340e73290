//! The three supervised loss terms and their sum: token classification,
//! per-frame grounding BCE over all evidence profiles of both stages, and
//! the cross-stage consistency penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Result as AgResult, Tape, Tensor, Var};
use crate::domain::Interval;
use crate::grounding::SimilarityProfile;

/// Clamp for BCE log arguments; logistic can saturate in f64.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("interval {0:?} out of range for T={1}")]
    IntervalOutOfRange(Interval, usize),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Scalar loss components for logging; `total = sft + gnd + cons`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub gnd: f64,
    pub cons: f64,
    pub total: f64,
}

/// Differentiable loss components on the current tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub sft: Var,
    pub gnd: Var,
    pub cons: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            sft: tape.scalar_value(self.sft),
            gnd: tape.scalar_value(self.gnd),
            cons: tape.scalar_value(self.cons),
            total: tape.scalar_value(self.total),
        }
    }
}

/// Per-term multipliers; 1.0 everywhere reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sft: f64,
    pub gnd: f64,
    pub cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sft: 1.0, gnd: 1.0, cons: 1.0 }
    }
}

/// Mean negative target log-probability over masked positions.
pub fn loss_sft(
    tape: &Tape,
    logprob_rows: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let (rows, _) = tape.shape(logprob_rows);
    if targets.len() != rows || mask.len() != rows {
        return Err(LossError::ArityMismatch(format!(
            "{} logprob rows, {} targets, {} mask entries",
            rows,
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let picked = tape.pick_per_row(logprob_rows, targets)?;
    let mask_t =
        tape.constant(Tensor::col(mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect()));
    let masked = tape.mul(picked, mask_t)?;
    let sum = tape.sum_all(masked);
    Ok(tape.scale(sum, -1.0 / count as f64))
}

/// Eq.-style per-frame BCE against the interval indicator, averaged over T.
pub fn loss_gnd_single(tape: &Tape, profile: &SimilarityProfile, gt: Interval) -> Result<Var> {
    let t = profile.len();
    if gt.end() >= t {
        return Err(LossError::IntervalOutOfRange(gt, t));
    }
    let inner = || -> AgResult<Var> {
        let y: Vec<f64> = (0..t).map(|i| if gt.contains(i) { 1.0 } else { 0.0 }).collect();
        let y_t = tape.constant(Tensor::col(y.clone()));
        let not_y_t = tape.constant(Tensor::col(y.iter().map(|v| 1.0 - v).collect()));
        let ones = tape.constant(Tensor::col(vec![1.0; t]));
        let ln_s = tape.clamp_ln(profile.sims, BCE_EPS, 1.0 - BCE_EPS);
        let one_minus = tape.sub(ones, profile.sims)?;
        let ln_1ms = tape.clamp_ln(one_minus, BCE_EPS, 1.0 - BCE_EPS);
        let pos = tape.mul(y_t, ln_s)?;
        let neg = tape.mul(not_y_t, ln_1ms)?;
        let total = tape.add(tape.sum_all(pos), tape.sum_all(neg))?;
        Ok(tape.scale(total, -1.0 / t as f64))
    };
    Ok(inner()?)
}

/// Mean of [`loss_gnd_single`] over all evidence profiles from both stages.
pub fn loss_gnd(tape: &Tape, profiles: &[SimilarityProfile], gts: &[Interval]) -> Result<Var> {
    if profiles.is_empty() || profiles.len() != gts.len() {
        return Err(LossError::ArityMismatch(format!(
            "{} profiles vs {} intervals",
            profiles.len(),
            gts.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (p, gt) in profiles.iter().zip(gts) {
        let l = loss_gnd_single(tape, p, *gt)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / profiles.len() as f64))
}

/// Mean absolute difference between the paired stage-1/stage-2 evidence
/// features, averaged over channels then over the K pairs.
pub fn loss_cons(tape: &Tape, stage1: &[Var], stage2: &[Var]) -> Result<Var> {
    if stage1.is_empty() || stage1.len() != stage2.len() {
        return Err(LossError::ArityMismatch(format!(
            "{} stage-1 features vs {} stage-2 features",
            stage1.len(),
            stage2.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (a, b) in stage1.iter().zip(stage2) {
        if tape.shape(*a) != tape.shape(*b) {
            return Err(LossError::ArityMismatch("feature dimensions differ".into()));
        }
        let d = tape.sub(*a, *b)?;
        let l = tape.mean_all(tape.abs(d));
        acc = Some(match acc {
            None => l,
            Some(prev) => tape.add(prev, l)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / stage1.len() as f64))
}

/// Weighted sum of the three components.
pub fn loss_total(
    tape: &Tape,
    sft: Var,
    gnd: Var,
    cons: Var,
    weights: LossWeights,
) -> Result<LossTerms> {
    let sft_w = tape.scale(sft, weights.sft);
    let gnd_w = tape.scale(gnd, weights.gnd);
    let cons_w = tape.scale(cons, weights.cons);
    let total = tape.add(tape.add(sft_w, gnd_w)?, cons_w)?;
    Ok(LossTerms { sft: sft_w, gnd: gnd_w, cons: cons_w, total })
}
