//! Hyperparameters of the propagation operator and its training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidence::EPSILON;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UgcpConfig {
    /// Number of update steps `T`; `0` is the one-shot head.
    pub steps: usize,
    /// Step size `θ`.
    pub theta: f64,
    /// Gate temperature `τ`.
    pub tau: f64,
    /// Source threshold `u0`.
    pub u0: f64,
    /// Stabiliser for the evidence denominators and the gate temperature.
    pub eps: f64,
    /// Weight of the evidential regulariser.
    pub lambda_uq: f64,
    /// Number of classes `K` (channel 1 is foreground).
    pub classes: usize,
    /// Input feature channels `C_h`.
    pub feature_channels: usize,
    /// Edge feature channels `C_f`.
    pub edge_channels: usize,
    /// Neighbour exchange on/off; off leaves only the source term.
    pub enable_flux: bool,
    pub enable_gamma: bool,
    pub enable_phi: bool,
    pub enable_source: bool,
    pub seed: u64,
}

impl Default for UgcpConfig {
    fn default() -> Self {
        Self::defaults_2d()
    }
}

impl UgcpConfig {
    pub fn defaults_2d() -> Self {
        Self {
            steps: 2,
            theta: 1.0,
            tau: 0.01,
            u0: 0.5,
            eps: EPSILON,
            lambda_uq: 0.1,
            classes: 2,
            feature_channels: 4,
            edge_channels: 8,
            enable_flux: true,
            enable_gamma: true,
            enable_phi: true,
            enable_source: true,
            seed: 0,
        }
    }

    pub fn defaults_3d() -> Self {
        Self {
            tau: 0.1,
            lambda_uq: 0.2,
            ..Self::defaults_2d()
        }
    }

    /// Dimension-appropriate defaults.
    pub fn defaults_for_dim(dim: usize) -> Self {
        if dim == 3 {
            Self::defaults_3d()
        } else {
            Self::defaults_2d()
        }
    }

    /// Plain Dice + BCE head: no steps, no evidential term.
    pub fn baseline(&self) -> Self {
        Self {
            steps: 0,
            lambda_uq: 0.0,
            ..self.clone()
        }
    }

    pub fn with_ablation(&self, gamma: bool, phi: bool, source: bool) -> Self {
        Self {
            enable_gamma: gamma,
            enable_phi: phi,
            enable_source: source,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return fail(format!("theta must be finite and >= 0, got {}", self.theta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.u0 > 0.0 && self.u0 < 1.0) {
            return fail(format!("u0 must lie in (0, 1), got {}", self.u0));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be > 0, got {}", self.eps));
        }
        if !(self.lambda_uq >= 0.0 && self.lambda_uq.is_finite()) {
            return fail(format!("lambda_uq must be >= 0, got {}", self.lambda_uq));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_channels == 0 || self.edge_channels == 0 {
            return fail("feature and edge channel counts must be positive".into());
        }
        Ok(())
    }

    /// `1 / (τ + ε)`, the inverse gate temperature.
    pub fn inv_temperature(&self) -> f64 {
        1.0 / (self.tau + self.eps)
    }
}
