//! Cross-entropy and the two claim-only bias-modeling objectives.
//!
//! * Product of experts: the pair model's log-probs are added to the
//!   claim-only expert's and renormalized before cross-entropy.
//! * Debiased focal loss: the pair model's cross-entropy on each instance is
//!   scaled by `(1 − p_expert(gold))^γ`.
//!
//! In both modes the expert is also trained on its own cross-entropy,
//! weighted by `beta`. The expert's output enters the pair model's term as
//! a constant, so the pair term never updates the expert.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    #[default]
    None,
    Poe,
    Dfl,
}

impl std::str::FromStr for BiasMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "poe" => Ok(Self::Poe),
            "dfl" => Ok(Self::Dfl),
            other => Err(Error::InvalidConfig(format!("unknown bias mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasModelConfig {
    pub mode: BiasMode,
    /// Weight of the claim-only expert's own cross-entropy.
    pub beta: f64,
    /// Focal exponent; only read in DFL mode.
    pub gamma: f64,
    /// Predict with the pair model alone (the expert is a training device).
    pub drop_expert_at_inference: bool,
}

impl Default for BiasModelConfig {
    fn default() -> Self {
        Self {
            mode: BiasMode::None,
            beta: 0.0,
            gamma: 0.0,
            drop_expert_at_inference: true,
        }
    }
}

impl BiasModelConfig {
    pub fn poe(beta: f64) -> Self {
        Self {
            mode: BiasMode::Poe,
            beta,
            ..Default::default()
        }
    }

    pub fn dfl(beta: f64, gamma: f64) -> Self {
        Self {
            mode: BiasMode::Dfl,
            beta,
            gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn uses_expert(&self) -> bool {
        self.mode != BiasMode::None
    }
}

fn check_gold(gold: usize, n: usize) -> Result<()> {
    if gold >= n {
        return Err(Error::IndexOutOfRange {
            op: "gold label",
            index: gold,
            bound: n,
        });
    }
    Ok(())
}

/// `−logp[gold]`.
pub fn cross_entropy(logp: &[f64], gold: usize) -> Result<f64> {
    check_gold(gold, logp.len())?;
    Ok(-logp[gold])
}

/// Renormalized product of two distributions given as log-probs.
pub fn poe_combine(pair_logp: &[f64], claim_logp: &[f64]) -> Result<Vec<f64>> {
    if pair_logp.len() != claim_logp.len() {
        return Err(Error::shape("poe_combine", &[pair_logp.len()], &[claim_logp.len()]));
    }
    let sum: Vec<f64> = pair_logp.iter().zip(claim_logp).map(|(a, b)| a + b).collect();
    let lse = logsumexp(&sum);
    Ok(sum.into_iter().map(|s| s - lse).collect())
}

/// `(1 − claim_probs[gold])^γ · (−pair_logp[gold])`.
pub fn dfl_loss(pair_logp: &[f64], claim_probs: &[f64], gold: usize, gamma: f64) -> Result<f64> {
    check_gold(gold, pair_logp.len())?;
    check_gold(gold, claim_probs.len())?;
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(focal_weight(claim_probs[gold], gamma) * -pair_logp[gold])
}

fn focal_weight(p_gold: f64, gamma: f64) -> f64 {
    (1.0 - p_gold).max(0.0).powf(gamma)
}

/// Per-instance training objective for one configuration.
///
/// `claim_logp` is required for PoE and DFL and ignored otherwise.
pub fn combined_bias_loss(
    pair_logp: &[f64],
    claim_logp: Option<&[f64]>,
    gold: usize,
    cfg: &BiasModelConfig,
) -> Result<f64> {
    cfg.validate()?;
    let expert = || claim_logp.ok_or_else(|| Error::InvalidConfig("bias mode needs claim-only log-probs".into()));
    match cfg.mode {
        BiasMode::None => cross_entropy(pair_logp, gold),
        BiasMode::Poe => {
            let c = expert()?;
            Ok(cross_entropy(&poe_combine(pair_logp, c)?, gold)? + cfg.beta * cross_entropy(c, gold)?)
        }
        BiasMode::Dfl => {
            let c = expert()?;
            let probs: Vec<f64> = c.iter().map(|v| v.exp()).collect();
            Ok(dfl_loss(pair_logp, &probs, gold, cfg.gamma)? + cfg.beta * cross_entropy(c, gold)?)
        }
    }
}

/// Graph form of [`combined_bias_loss`], averaged over the batch.
pub fn record_bias_loss(
    g: &mut Graph,
    pair_logp: Var,
    claim_logp: Option<Var>,
    golds: &[usize],
    cfg: &BiasModelConfig,
) -> Result<Var> {
    if cfg.mode == BiasMode::None {
        return g.nll(pair_logp, golds, None);
    }
    let claim = claim_logp.ok_or_else(|| Error::InvalidConfig("bias mode needs claim-only log-probs".into()))?;
    let detached = g.constant(g.shape(claim).to_vec(), g.value(claim).to_vec())?;
    let main = match cfg.mode {
        BiasMode::Poe => {
            let s = g.add(pair_logp, detached)?;
            let combined = g.log_softmax(s)?;
            g.nll(combined, golds, None)?
        }
        BiasMode::Dfl => {
            let n = *g.shape(claim).last().unwrap();
            let cv = g.value(claim);
            let weights: Vec<f64> = golds
                .iter()
                .enumerate()
                .map(|(i, &y)| focal_weight(cv[i * n + y].exp(), cfg.gamma))
                .collect();
            g.nll(pair_logp, golds, Some(&weights))?
        }
        BiasMode::None => unreachable!(),
    };
    let expert = g.nll(claim, golds, None)?;
    let expert = g.scale(expert, cfg.beta);
    g.add(main, expert)
}
