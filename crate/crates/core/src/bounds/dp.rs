use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::net::{gradient, DataBatch, NetworkParams};
use crate::rng::rng_from;
use crate::{DMatrix, DVector, Error, Result};

fn check(epsilon: f64, sigma2: f64, sensitivity: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("ε must be > 0, got {epsilon}")));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("σ² must be > 0, got {sigma2}")));
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::InvalidArgument(format!("Δ must be > 0, got {sensitivity}")));
    }
    Ok(())
}

/// `λ* = σ²ε/Δ`; the tail bound only holds for `λ* ≥ 1`.
fn lambda_star(epsilon: f64, sigma2: f64, sensitivity: f64) -> f64 {
    sigma2 * epsilon / sensitivity
}

/// Gaussian-mechanism failure probability for noise variance `σ²` and
/// squared-ℓ2 sensitivity `Δ`, clamped to `[0, 1]`.
pub fn dp_delta(epsilon: f64, sigma2: f64, sensitivity: f64) -> Result<f64> {
    check(epsilon, sigma2, sensitivity)?;
    let t = lambda_star(epsilon, sigma2, sensitivity) - 0.5;
    Ok((-(sensitivity / (2.0 * sigma2)) * t * t).exp().clamp(0.0, 1.0))
}

/// `δ` together with the validity diagnostic of the tail bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub epsilon: f64,
    pub sigma2: f64,
    pub sensitivity: f64,
    pub delta: f64,
    pub lambda_star: f64,
    /// False when `λ* < 1`, where the bound is outside its derivation range.
    pub valid: bool,
}

pub fn dp_report(epsilon: f64, sigma2: f64, sensitivity: f64) -> Result<DpReport> {
    let delta = dp_delta(epsilon, sigma2, sensitivity)?;
    let lambda_star = lambda_star(epsilon, sigma2, sensitivity);
    Ok(DpReport {
        epsilon,
        sigma2,
        sensitivity,
        delta,
        lambda_star,
        valid: lambda_star >= 1.0,
    })
}

/// Smallest `σ²` with `dp_delta(ε, σ², Δ) ≤ δ` on the decreasing branch.
///
/// With `t = σ²ε/Δ` and `L = ln(1/δ)` the condition is
/// `t² − (1 + 2L/ε)t + 1/4 = 0`; the larger root is taken.
pub fn required_sigma(epsilon: f64, delta: f64, sensitivity: f64) -> Result<f64> {
    check(epsilon, 1.0, sensitivity)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("δ must be in (0, 1), got {delta}")));
    }
    let q = 1.0 + 2.0 * (1.0 / delta).ln() / epsilon;
    let disc = q * q - 1.0;
    if !(disc >= 0.0) || !disc.is_finite() {
        return Err(Error::NoRealRoot);
    }
    let t = 0.5 * (q + disc.sqrt());
    Ok(t * sensitivity / epsilon)
}

/// Monte-Carlo estimate of `Δ = max ‖G(D) − G(D')‖²` over random pairs of
/// single-sample datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub delta_hat: f64,
    pub trials: usize,
    /// Running maximum after each trial.
    pub trace: Vec<f64>,
}

fn random_sample(d: usize, rng: &mut impl Rng) -> Result<DataBatch> {
    let mut x: DVector<f64> = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
    let n = x.norm();
    x /= n;
    let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    DataBatch::new(DMatrix::from_column_slice(d, 1, x.as_slice()), DVector::from_element(1, y))
}

/// Pairs are drawn from one sequential stream, so the estimate for `n`
/// trials is a prefix of the estimate for any larger `n`.
pub fn estimate_sensitivity(params: &NetworkParams, trials: usize, seed: u64) -> Result<Sensitivity> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut rng = rng_from(seed);
    let d = params.d();
    let mut best = 0.0f64;
    let mut trace = Vec::with_capacity(trials);
    for _ in 0..trials {
        let p = random_sample(d, &mut rng)?;
        let q = random_sample(d, &mut rng)?;
        let gp = gradient(params, &p)?.flatten();
        let gq = gradient(params, &q)?.flatten();
        best = best.max((gp - gq).norm_squared());
        trace.push(best);
    }
    Ok(Sensitivity {
        delta_hat: best,
        trials,
        trace,
    })
}
