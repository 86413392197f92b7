use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::utility::utility_loss;
use crate::bounds::{bound_under_defense, BoundReport};
use crate::defenses::{compose, local_aggregation, secure_aggregate, DefenseConfig, DefenseRecord};
use crate::gradmatch::grad_match_attack;
use crate::net::{gradient, input_jacobian, sample_batch, sample_params, DataBatch, GradientObservation};
use crate::reconstruction::ReconstructionResult;
use crate::rng::{mix, substream, Stream};
use crate::tensor::tensor_attack;
use crate::Result;

/// Result of one attack inside a trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub attack: String,
    pub rmse: Option<f64>,
    pub assignment: Option<Vec<usize>>,
    pub signs: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    /// Set when the attack failed; the other fields are then empty.
    pub error: Option<String>,
}

impl AttackOutcome {
    fn from_result(r: &ReconstructionResult) -> Self {
        Self {
            attack: r.attack.clone(),
            rmse: r.rmse,
            assignment: r.assignment.clone(),
            signs: r.signs.clone(),
            converged: r.converged,
            warnings: r.warnings.clone(),
            error: None,
        }
    }

    fn failed(attack: &str, e: &crate::Error) -> Self {
        Self {
            attack: attack.into(),
            rmse: None,
            assignment: None,
            signs: Vec::new(),
            converged: false,
            warnings: Vec::new(),
            error: Some(e.to_string()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config_hash: String,
    pub trial: usize,
    pub seed: u64,
    pub d: usize,
    pub m: usize,
    /// Number of samples behind the observation.
    pub b: usize,
    pub defense: String,
    pub defense_param: Option<f64>,
    pub attacks: Vec<AttackOutcome>,
    pub bound: Option<BoundReport>,
    pub bound_error: Option<String>,
    /// `+∞` (written as `null` in JSON) when the training run diverged.
    pub utility_loss: Option<f64>,
    pub utility_flags: Vec<String>,
    /// Defense provenance with masks dropped.
    pub provenance: Vec<DefenseRecord>,
    pub wall_ms: u64,
}

impl TrialRecord {
    /// Hash of everything except the wall time.
    pub fn hash(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_ms = 0;
        super::config::stable_hash(&r)
    }

    pub fn rmse(&self, attack: &str) -> Option<f64> {
        self.attacks.iter().find(|a| a.attack == attack).and_then(|a| a.rmse)
    }
}

/// Trial seed: a stable mix of the base seed and the trial index, independent
/// of the grid point so trials are paired across points.
pub fn trial_seed(base_seed: u64, trial: usize) -> u64 {
    mix(base_seed, trial as u64)
}

/// What the attacker observes and what it tries to recover.
pub struct Observation {
    pub truth: DataBatch,
    pub obs: GradientObservation,
    /// Factor turning `obs` into an estimate of the plain batch gradient.
    pub gradient_scale: f64,
    /// Factor turning the observation noise std into gradient units.
    pub sigma_scale: f64,
}

/// Samples data for `cfg` and produces the defended observation.
pub fn observe(cfg: &ExperimentConfig, params: &crate::net::NetworkParams, seed: u64) -> Result<Observation> {
    let data_seed = substream(seed, Stream::Data);
    let def_seed = substream(seed, Stream::Defense);
    let (d, b) = (cfg.d, cfg.b);
    let (truth, obs, gradient_scale, sigma_scale, rest) = match cfg.defenses.first() {
        Some(DefenseConfig::LocalAggregation {
            steps,
            eta_a,
            eta_w,
            fresh_batches,
        }) => {
            let batches: Vec<DataBatch> = if *fresh_batches {
                (0..*steps)
                    .map(|t| sample_batch(d, b, mix(data_seed, t as u64)))
                    .collect::<Result<_>>()?
            } else {
                vec![sample_batch(d, b, data_seed)?]
            };
            let truth = batches[1..].iter().try_fold(batches[0].clone(), |acc, x| acc.concat(x))?;
            let obs = local_aggregation(params, &batches, *eta_a, *eta_w, *steps)?;
            // Reusing one batch accumulates about `steps` copies of its gradient.
            let scale = if *fresh_batches { 1.0 } else { 1.0 / *steps as f64 };
            (truth, obs, scale, 1.0, &cfg.defenses[1..])
        }
        Some(DefenseConfig::SecureAggregation { client_sizes }) => {
            let mut clients = Vec::with_capacity(client_sizes.len());
            let mut truth: Option<DataBatch> = None;
            for (l, &bl) in client_sizes.iter().enumerate() {
                let batch = sample_batch(d, bl, mix(data_seed, l as u64))?;
                clients.push((gradient(params, &batch)?, bl));
                truth = Some(match truth {
                    None => batch,
                    Some(t) => t.concat(&batch)?,
                });
            }
            let truth = truth.expect("validated non-empty");
            let total = truth.b() as f64;
            (truth, secure_aggregate(&clients)?, total, total, &cfg.defenses[1..])
        }
        _ => {
            let truth = sample_batch(d, b, data_seed)?;
            let obs = gradient(params, &truth)?;
            (truth, obs, 1.0, 1.0, &cfg.defenses[..])
        }
    };
    let obs = if rest.is_empty() { obs } else { compose(rest, &obs, def_seed)? };
    Ok(Observation {
        truth,
        obs,
        gradient_scale,
        sigma_scale,
    })
}

fn scaled(obs: &GradientObservation, c: f64) -> GradientObservation {
    let mut o = obs.clone();
    if c != 1.0 {
        o.scale(c);
    }
    o
}

fn failed_record(
    cfg: &ExperimentConfig,
    trial: usize,
    seed: u64,
    e: &crate::Error,
    start: Instant,
) -> Result<TrialRecord> {
    let mut attacks = Vec::new();
    if cfg.attacks.tensor.is_some() {
        attacks.push(AttackOutcome::failed("tensor", e));
    }
    if cfg.attacks.gradmatch.is_some() {
        attacks.push(AttackOutcome::failed("gradmatch", e));
    }
    Ok(TrialRecord {
        config_hash: cfg.hash()?,
        trial,
        seed,
        d: cfg.d,
        m: cfg.m,
        b: cfg.b,
        defense: cfg.defense_label(),
        defense_param: cfg.defense_param(),
        attacks,
        bound: None,
        bound_error: None,
        utility_loss: None,
        utility_flags: Vec::new(),
        provenance: Vec::new(),
        wall_ms: start.elapsed().as_millis() as u64,
    })
}

/// Runs every configured attack on one seeded draw and records the metrics.
///
/// Failures of the defense chain or of an attack are recorded in the
/// [`AttackOutcome`]s; only invalid configurations are returned as errors.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = trial_seed(cfg.base_seed, trial);
    let params = sample_params(cfg.d, cfg.m, cfg.activation, substream(seed, Stream::Params))?;
    let Observation {
        truth,
        obs,
        gradient_scale,
        sigma_scale,
    } = match observe(cfg, &params, seed) {
        Ok(o) => o,
        Err(e) => return failed_record(cfg, trial, seed, &e, start),
    };
    let b = truth.b();
    let attack_seed = substream(seed, Stream::Attack);
    let mut attacks = Vec::new();

    let gm_spec = cfg.attacks.gradmatch.as_ref();
    let need_tensor = cfg.attacks.tensor.is_some() || gm_spec.is_some_and(|g| g.features_from_tensor);
    let mut tensor_dirs: Option<DMatrix<f64>> = None;
    if need_tensor {
        let mut tcfg = cfg.attacks.tensor.clone().unwrap_or_default();
        tcfg.seed = mix(attack_seed, 0);
        match tensor_attack(&obs, &params, b, &tcfg) {
            Ok(mut r) => {
                tensor_dirs = Some(r.x_hat.clone());
                if cfg.attacks.tensor.is_some() {
                    // Tensor output is defined only up to sign.
                    r.score(&truth.x, true)?;
                    attacks.push(AttackOutcome::from_result(&r));
                }
            }
            Err(e) => {
                if cfg.attacks.tensor.is_some() {
                    attacks.push(AttackOutcome::failed("tensor", &e));
                }
            }
        }
    }
    if let Some(spec) = gm_spec {
        let mut gcfg = spec.config.clone();
        gcfg.seed = mix(attack_seed, 1);
        let target = scaled(&obs, gradient_scale);
        let z = if spec.features_from_tensor { tensor_dirs.as_ref() } else { None };
        match grad_match_attack(&target, &params, &truth.y, &gcfg, z) {
            Ok(mut r) => {
                r.score(&truth.x, spec.sign_resolve)?;
                attacks.push(AttackOutcome::from_result(&r));
            }
            Err(e) => attacks.push(AttackOutcome::failed("gradmatch", &e)),
        }
    }

    let sigma = cfg.bound_sigma.or_else(|| {
        obs.provenance
            .iter()
            .rev()
            .find_map(|r| r.noise_sigma)
            .filter(|s| *s > 0.0)
    });
    let (bound, bound_error) = match sigma {
        None => (None, None),
        Some(s) => match input_jacobian(&params, &truth)
            .and_then(|jac| bound_under_defense(&jac, s * sigma_scale, b, &obs))
        {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        },
    };

    let (utility, utility_flags) = match &cfg.utility {
        None => (None, Vec::new()),
        Some(u) => {
            let out = utility_loss(&params, &cfg.defenses, substream(seed, Stream::Utility), u)?;
            (Some(out.final_loss), out.flags)
        }
    };

    let provenance = obs
        .provenance
        .iter()
        .map(|r| DefenseRecord {
            keep_mask: None,
            ..r.clone()
        })
        .collect();
    Ok(TrialRecord {
        config_hash: cfg.hash()?,
        trial,
        seed,
        d: cfg.d,
        m: cfg.m,
        b,
        defense: cfg.defense_label(),
        defense_param: cfg.defense_param(),
        attacks,
        bound,
        bound_error,
        utility_loss: utility,
        utility_flags,
        provenance,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
