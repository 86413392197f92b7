use serde::{Deserialize, Serialize};

use super::config::UtilityConfig;
use crate::defenses::{apply, DefenseConfig};
use crate::net::{batch_loss, gradient, linearly_separable_batch, NetworkParams};
use crate::rng::mix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityOutcome {
    pub initial_loss: f64,
    /// `+∞` when training diverged.
    pub final_loss: f64,
    pub diverged: bool,
    pub flags: Vec<String>,
}

/// Full-batch gradient descent on a fixed linearly separable task, applying
/// the observation defenses to every step's gradient before the update.
///
/// Training-side defenses do not change the update of a single client and
/// are skipped with a flag.
pub fn utility_loss(
    params: &NetworkParams,
    defenses: &[DefenseConfig],
    data_seed: u64,
    cfg: &UtilityConfig,
) -> Result<UtilityOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("utility needs steps ≥ 1".into()));
    }
    let batch = linearly_separable_batch(params.d(), cfg.b, data_seed)?;
    let eta_a = cfg.eta_a_for(params.m());
    let eta_w = cfg.eta_w;
    let mut flags = Vec::new();
    for d in defenses.iter().filter(|d| !d.is_observation_transform()) {
        flags.push(format!("{} ignored during utility training", d.name()));
    }
    let active: Vec<&DefenseConfig> = defenses.iter().filter(|d| d.is_observation_transform()).collect();
    let mut theta = params.clone();
    let initial_loss = batch_loss(&theta, &batch)?;
    for t in 0..cfg.steps {
        let mut g = gradient(&theta, &batch)?;
        for (i, d) in active.iter().enumerate() {
            g = apply(d, &g, mix(mix(data_seed, t as u64), i as u64))?;
        }
        theta.a.axpy(-eta_a, &g.g_a, 1.0);
        theta.w += &g.g_w * (-eta_w);
        if !(theta.a.iter().all(|v| v.is_finite()) && theta.w.iter().all(|v| v.is_finite())) {
            flags.push(format!("diverged at step {}", t + 1));
            return Ok(UtilityOutcome {
                initial_loss,
                final_loss: f64::INFINITY,
                diverged: true,
                flags,
            });
        }
    }
    let final_loss = batch_loss(&theta, &batch)?;
    let diverged = !final_loss.is_finite();
    if diverged {
        flags.push("final loss is not finite".into());
    }
    Ok(UtilityOutcome {
        initial_loss,
        final_loss: if diverged { f64::INFINITY } else { final_loss },
        diverged,
        flags,
    })
}
