//! Negative log-likelihood, prediction entropy and the maximum-entropy
//! combination `NLL - λ·H`.
//!
//! Minimizing the combined loss fits the labels while pushing the predicted
//! distribution towards higher entropy; `λ = 0` recovers plain NLL.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_entropy: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_entropy: 0.1 }
    }
}

impl LossConfig {
    pub fn new(lambda_entropy: f64) -> Result<Self> {
        let cfg = LossConfig { lambda_entropy };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_entropy.is_finite() || self.lambda_entropy < 0.0 {
            return Err(Error::Config {
                key: "lambda_entropy".into(),
                msg: format!("must be finite and >= 0, got {}", self.lambda_entropy),
            });
        }
        Ok(())
    }
}

/// Handles to the pieces of a combined loss on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub nll: Var,
    pub entropy: Var,
    pub log_probs: Var,
}

pub fn nll_loss<T: Scalar>(tape: &mut Tape<T>, logp: Var, targets: &[usize]) -> Result<Var> {
    tape.nll_loss(logp, targets)
}

pub fn entropy<T: Scalar>(tape: &mut Tape<T>, logp: Var) -> Result<Var> {
    tape.entropy(logp)
}

pub fn max_entropy_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let log_probs = tape.log_softmax(logits)?;
    let nll = tape.nll_loss(log_probs, targets)?;
    let entropy = tape.entropy(log_probs)?;
    let weighted = tape.scale(entropy, T::from_f64(cfg.lambda_entropy))?;
    let total = tape.sub(nll, weighted)?;
    Ok(LossTerms {
        total,
        nll,
        entropy,
        log_probs,
    })
}
