//! Optimisation-based gradient matching.
//!
//! The attacker knows the labels and the unit norm of every sample, and
//! searches the product of unit spheres for inputs whose gradient matches the
//! observation. An optional regulariser pulls candidates towards directions
//! recovered by the tensor attack; for the two-layer model the feature map is
//! the identity, so the regulariser acts on the inputs directly.

mod attack;
mod loss;
mod regularizer;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use attack::{grad_match_attack, grad_match_from, GradMatchRun};
pub use loss::{grad_match_loss, group_weights};
pub use regularizer::{feature_regularizer, greedy_pairing};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// `Σ_g w_g ‖G_g − T_g‖²`.
    #[default]
    SquaredL2,
    /// `Σ_g w_g (1 − cos(G_g, T_g))`, one cosine per parameter group.
    NegativeCosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `1 − cos²(x_i, ẑ_π(i))` with a greedy pairing.
    #[default]
    Cosine2,
    /// `‖P⊥ x_i‖²` against the span of all recovered directions.
    Subspace,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Independent uniform points on the unit sphere.
    #[default]
    Sphere,
    /// Start from the recovered directions when they are supplied.
    Features,
}

/// Adam with per-sample projection onto the sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_iters: usize,
    /// Stop once the tangent gradient norm falls below this.
    pub tol: f64,
    /// Multiply the step size by 0.1 at 3/8, 5/8 and 7/8 of `max_iters`.
    pub lr_decay: bool,
    /// Reject steps that increase the objective and retry with half the step.
    pub step_halving: bool,
    pub init: Init,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_iters: 5000,
            tol: 1e-10,
            lr_decay: true,
            step_halving: false,
            init: Init::Sphere,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradMatchConfig {
    pub distance: Distance,
    /// Weight each parameter group by its share of nonzero target entries.
    pub group_reweighting: bool,
    pub alpha_f: f64,
    pub feature_mode: FeatureMode,
    /// Iterations between recomputations of the greedy pairing.
    pub pairing_refresh: usize,
    /// Every `pairing_refresh` iterations and at the end, try negating single
    /// candidates and swapping pairs (optionally negating both), keeping moves
    /// that lower the objective. The gradient map is not odd in `x`, so these
    /// escape the mirrored basins the cosine² term creates at `−ẑ`.
    pub sign_moves: bool,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for GradMatchConfig {
    fn default() -> Self {
        Self {
            distance: Distance::SquaredL2,
            group_reweighting: false,
            alpha_f: 0.1,
            feature_mode: FeatureMode::Cosine2,
            pairing_refresh: 100,
            sign_moves: true,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl GradMatchConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.alpha_f >= 0.0 && self.alpha_f.is_finite()) {
            return bad("alpha_f must be ≥ 0");
        }
        if o.max_iters == 0 {
            return bad("max_iters must be ≥ 1");
        }
        if self.pairing_refresh == 0 {
            return bad("pairing_refresh must be ≥ 1");
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(o.eps > 0.0) || !(o.tol >= 0.0) {
            return bad("eps must be > 0 and tol ≥ 0");
        }
        Ok(())
    }
}
