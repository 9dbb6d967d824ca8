//! Independent Byzantine client behaviours: label flipping on the local
//! data, and sign flipping or Gaussian noise on the submitted model.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::math::{gaussian_sample, ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    LabelFlip,
    SignFlip,
    GaussianNoise,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label_flip",
            AttackKind::SignFlip => "sign_flip",
            AttackKind::GaussianNoise => "gaussian_noise",
        }
    }
}

/// What a sign-flipping client negates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignFlipMode {
    /// The local update relative to the broadcast model: `2 x_t - x`.
    Delta,
    /// The submitted parameters themselves: `-x`.
    Params,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub mu: f64,
    pub sigma: f64,
    pub start_round: usize,
    pub sign_flip_mode: SignFlipMode,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            kind: AttackKind::None,
            mu: 0.25,
            sigma: 1.0,
            start_round: 15,
            sign_flip_mode: SignFlipMode::Params,
        }
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        AttackSpec {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(FedError::config(format!(
                "attack sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if !self.mu.is_finite() {
            return Err(FedError::config("attack mu must be finite"));
        }
        Ok(())
    }

    /// Whether malicious clients misbehave in `round` (zero-based).
    pub fn is_active(&self, round: usize) -> bool {
        self.kind != AttackKind::None && round >= self.start_round
    }
}

/// Maps every label `c` to `C - c - 1`.
pub fn flip_labels(labels: &[usize], num_classes: usize) -> Vec<usize> {
    labels.iter().map(|&c| num_classes - c - 1).collect()
}

/// Negates the local update relative to `reference`.
pub fn sign_flip(honest_update: &ParamVector, reference: &ParamVector) -> Result<ParamVector> {
    reference.check_dim(honest_update)?;
    Ok(ParamVector::new(
        reference
            .as_slice()
            .iter()
            .zip(honest_update.as_slice())
            .map(|(r, h)| r - (h - r))
            .collect(),
    ))
}

/// Negates every parameter.
pub fn negate_params(honest_update: &ParamVector) -> ParamVector {
    ParamVector::new(honest_update.as_slice().iter().map(|v| -v).collect())
}

/// `honest_update + eps` with `eps ~ N(mu, sigma^2 I)`.
pub fn add_noise(
    honest_update: &ParamVector,
    reference: &ParamVector,
    mu: f64,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    reference.check_dim(honest_update)?;
    let noise = gaussian_sample(rng, mu, sigma, honest_update.dim())?;
    Ok(ParamVector::new(
        reference
            .as_slice()
            .iter()
            .zip(honest_update.as_slice())
            .zip(noise.as_slice())
            .map(|((r, h), e)| r + (h - r) + e)
            .collect(),
    ))
}

/// Transforms a malicious client's submission for `round`.
///
/// Label flipping happens before local training, so here it passes the
/// (already poisoned) update through.
pub fn apply_attack(
    spec: &AttackSpec,
    round: usize,
    rng: &mut RngStream,
    honest_update: &ParamVector,
    global: &ParamVector,
) -> Result<ParamVector> {
    if !spec.is_active(round) {
        return Ok(honest_update.clone());
    }
    match spec.kind {
        AttackKind::None | AttackKind::LabelFlip => Ok(honest_update.clone()),
        AttackKind::SignFlip => match spec.sign_flip_mode {
            SignFlipMode::Delta => sign_flip(honest_update, global),
            SignFlipMode::Params => Ok(negate_params(honest_update)),
        },
        AttackKind::GaussianNoise => add_noise(honest_update, global, spec.mu, spec.sigma, rng),
    }
}
