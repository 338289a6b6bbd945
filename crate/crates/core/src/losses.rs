//! Domain, distillation and binary losses and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub binary: f64,
    pub domain: f64,
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { binary: 0.5, domain: 1.0, distill: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("binary", self.binary), ("domain", self.domain), ("distill", self.distill)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights { binary: self.binary * k, domain: self.domain * k, distill: self.distill * k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub binary: f64,
    pub domain: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum; any non-finite component is a divergence.
    pub fn combine(binary: f64, domain: f64, distill: f64, weights: &LossWeights) -> Result<Self> {
        for (name, v) in [("binary", binary), ("domain", domain), ("distill", distill)] {
            if !v.is_finite() {
                return Err(Error::Divergence(format!(
                    "{name} loss is {v} (binary={binary}, domain={domain}, distill={distill})"
                )));
            }
        }
        let total = weights.binary * binary + weights.domain * domain + weights.distill * distill;
        Ok(LossBreakdown { binary, domain, distill, total })
    }
}

/// Mean multi-class cross-entropy of `N×(m+1)` domain scores.
pub fn domain_loss(tape: &mut Tape, scores: NodeId, labels: Vec<usize>) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Shape("domain loss over an empty batch".into()));
    }
    let sum = tape.softmax_ce_sum(scores, labels)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Mean binary cross-entropy; label 1 marks a fake.
pub fn binary_loss(tape: &mut Tape, scores: NodeId, labels: Vec<f64>) -> Result<NodeId> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Shape("binary loss over an empty batch".into()));
    }
    let sum = tape.bce_logits_sum(scores, labels)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// Sum over domains of the per-domain mean squared error `(student, target)`.
pub fn distill_loss(tape: &mut Tape, pairs: &[(NodeId, NodeId)]) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Shape("distillation over zero domains".into()));
    }
    let terms = pairs.iter().map(|(s, t)| tape.mse(*s, *t)).collect::<Result<Vec<_>>>()?;
    tape.sum_scalars(&terms)
}

/// `λ1·binary + λ2·domain + λ3·distill` as a differentiable node.
pub fn total_loss(
    tape: &mut Tape,
    binary: NodeId,
    domain: NodeId,
    distill: NodeId,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let breakdown = LossBreakdown::combine(
        tape.value(binary).item(),
        tape.value(domain).item(),
        tape.value(distill).item(),
        weights,
    )?;
    let parts = [
        tape.scale(binary, weights.binary),
        tape.scale(domain, weights.domain),
        tape.scale(distill, weights.distill),
    ];
    Ok((tape.sum_scalars(&parts)?, breakdown))
}
