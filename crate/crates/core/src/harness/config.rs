use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::defenses::DefenseConfig;
use crate::gradmatch::GradMatchConfig;
use crate::net::Activation;
use crate::tensor::TensorAttackConfig;
use crate::{Error, Result};

/// Gradient-matching settings inside an experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradMatchSpec {
    pub config: GradMatchConfig,
    /// Feed the tensor attack's directions to the feature regulariser. Runs the
    /// tensor attack even when it is not scored.
    pub features_from_tensor: bool,
    pub sign_resolve: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub tensor: Option<TensorAttackConfig>,
    pub gradmatch: Option<GradMatchSpec>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            tensor: Some(TensorAttackConfig::default()),
            gradmatch: None,
        }
    }
}

/// Defended training run used to measure utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    pub steps: usize,
    /// Size of the linearly separable training batch.
    pub b: usize,
    /// Defaults to `0.1/m`.
    pub eta_a: Option<f64>,
    pub eta_w: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            b: 4,
            eta_a: None,
            eta_w: 1.0,
        }
    }
}

impl UtilityConfig {
    pub fn eta_a_for(&self, m: usize) -> f64 {
        self.eta_a.unwrap_or(0.1 / m as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub d: usize,
    pub m: usize,
    pub b: usize,
    pub activation: Activation,
    /// Applied in order. A training-side defense may only come first.
    pub defenses: Vec<DefenseConfig>,
    pub attacks: AttackSpec,
    /// Noise std for the lower bound; defaults to the realised noise std of
    /// the defense chain, and no bound is computed without either.
    pub bound_sigma: Option<f64>,
    pub utility: Option<UtilityConfig>,
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            d: 16,
            m: 1 << 12,
            b: 2,
            activation: Activation::Softplus,
            defenses: Vec::new(),
            attacks: AttackSpec::default(),
            bound_sigma: None,
            utility: None,
            trials: 1,
            base_seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.m == 0 || self.b == 0 {
            return bad(format!("d, m and B must be ≥ 1 (got {}, {}, {})", self.d, self.m, self.b));
        }
        if self.trials == 0 {
            return bad("trials must be ≥ 1".into());
        }
        if self.attacks.tensor.is_none() && self.attacks.gradmatch.is_none() {
            return bad("at least one attack must be configured".into());
        }
        if let Activation::Custom(_) = self.activation {
            return bad("custom activations cannot be used in experiment configs".into());
        }
        for (i, d) in self.defenses.iter().enumerate() {
            d.validate()?;
            if i > 0 && !d.is_observation_transform() {
                return bad(format!("{} must be the first defense in the chain", d.name()));
            }
        }
        if let Some(g) = &self.attacks.gradmatch {
            g.config.validate()?;
        }
        if let Some(s) = self.bound_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("bound_sigma must be > 0, got {s}"));
            }
        }
        if let Some(u) = &self.utility {
            if u.steps == 0 || u.b == 0 {
                return bad("utility steps and batch size must be ≥ 1".into());
            }
        }
        Ok(())
    }

    /// `"none"` or the defense names joined by `+`.
    pub fn defense_label(&self) -> String {
        if self.defenses.is_empty() {
            "none".into()
        } else {
            self.defenses.iter().map(|d| d.name()).collect::<Vec<_>>().join("+")
        }
    }

    /// Parameter of the last defense in the chain.
    pub fn defense_param(&self) -> Option<f64> {
        self.defenses.last().map(|d| d.param())
    }

    pub fn hash(&self) -> Result<String> {
        stable_hash(self)
    }
}

/// First 16 hex digits of SHA-256 over the JSON encoding.
pub fn stable_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_and_round_trip() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"d": 8, "m": 256, "defenses": [{"kind": "clip", "c": 1.0}, {"kind": "noise", "sigma0": 0.1}],
                "attacks": {"tensor": {}, "gradmatch": {"config": {"alpha_f": 0}}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.b, 2);
        assert_eq!(cfg.defense_label(), "clip+noise");
        assert_eq!(cfg.defense_param(), Some(0.1));
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dim": 3}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_chains() {
        let mut cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        cfg.defenses = vec![
            DefenseConfig::Clip { c: 1.0 },
            DefenseConfig::SecureAggregation { client_sizes: vec![1, 1] },
        ];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.attacks = AttackSpec {
            tensor: None,
            gradmatch: None,
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.m += 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
    }
}
