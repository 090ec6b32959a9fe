//! Training objective: global and personalized cross entropy, negative
//! entropy on the irrelevant head, and symmetric KL between the global and
//! personalized predictions.

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::model::ForwardOutput;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_lce: f64,
    pub lambda_ent: f64,
    pub lambda_dis: f64,
}

impl LossWeights {
    /// Office-Caltech-10 / DomainNet setting.
    pub const OFFICE: Self = Self { lambda_lce: 1.0, lambda_ent: 0.001, lambda_dis: 1.0 };
    /// Digits-Five setting.
    pub const DIGITS: Self = Self { lambda_lce: 10.0, lambda_ent: 0.001, lambda_dis: 10.0 };

    pub fn zero() -> Self {
        Self { lambda_lce: 0.0, lambda_ent: 0.0, lambda_dis: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("lambda_lce", self.lambda_lce), ("lambda_ent", self.lambda_ent), ("lambda_dis", self.lambda_dis)]
        {
            if !v.is_finite() || v < 0.0 {
                return Err(config_err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::OFFICE
    }
}

/// Scalar values of each term; `total` is also recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<S> {
    pub gce: S,
    pub lce: S,
    pub ent: S,
    pub dis: S,
    pub total: S,
    pub total_var: Var,
}

pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn negative_entropy<S: Scalar>(tape: &mut Tape<S>, logits_u: Var) -> Result<Var> {
    tape.negative_entropy(logits_u)
}

pub fn cyclic_kl<S: Scalar>(tape: &mut Tape<S>, logits_p: Var, logits_g: Var) -> Result<Var> {
    tape.symmetric_kl(logits_p, logits_g)
}

/// Weighted objective. Models without a selection module reduce to the
/// global cross entropy alone.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    out: &ForwardOutput<S>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown<S>> {
    w.validate()?;
    let gce = cross_entropy(tape, out.logits_g, labels)?;
    let (Some(lp), Some(lu)) = (out.logits_p, out.logits_u) else {
        let v = tape.scalar(gce);
        return Ok(LossBreakdown { gce: v, lce: S::zero(), ent: S::zero(), dis: S::zero(), total: v, total_var: gce });
    };
    let lce = cross_entropy(tape, lp, labels)?;
    let ent = negative_entropy(tape, lu)?;
    let dis = cyclic_kl(tape, lp, out.logits_g)?;
    let total = tape.weighted_sum(&[
        (gce, S::one()),
        (lce, S::lit(w.lambda_lce)),
        (ent, S::lit(w.lambda_ent)),
        (dis, S::lit(w.lambda_dis)),
    ])?;
    Ok(LossBreakdown {
        gce: tape.scalar(gce),
        lce: tape.scalar(lce),
        ent: tape.scalar(ent),
        dis: tape.scalar(dis),
        total: tape.scalar(total),
        total_var: total,
    })
}
