use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{feature_regularizer, grad_match_loss, greedy_pairing, FeatureMode, GradMatchConfig, Init};
use crate::net::{GradientObservation, NetworkParams};
use crate::reconstruction::ReconstructionResult;
use crate::rng::rng_from;
use crate::{Error, Result};

/// Full record of one optimisation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradMatchRun {
    /// Best iterate seen.
    pub result: ReconstructionResult,
    /// Optimiser steps taken.
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub best_objective: f64,
    /// SHA-256 prefix over every accepted iterate.
    pub trajectory_hash: String,
}

fn normalize_columns(x: &mut DMatrix<f64>) {
    for mut c in x.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
}

fn hash_iterate(h: &mut Sha256, x: &DMatrix<f64>) {
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
}

struct Objective<'a> {
    params: &'a NetworkParams,
    obs: &'a GradientObservation,
    labels: &'a DVector<f64>,
    cfg: &'a GradMatchConfig,
    z: Option<&'a DMatrix<f64>>,
}

impl Objective<'_> {
    fn eval(&self, x: &DMatrix<f64>, pair: Option<&[Option<usize>]>) -> Result<(f64, DMatrix<f64>)> {
        let (mut f, mut g) = grad_match_loss(x, self.labels, self.params, self.obs, self.cfg)?;
        if let Some(z) = self.z {
            let (r, gr) = feature_regularizer(x, z, self.cfg.feature_mode, pair)?;
            f += self.cfg.alpha_f * r;
            g += gr * self.cfg.alpha_f;
        }
        if !f.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok((f, g))
    }
}

/// Greedy discrete moves: negate one candidate, or swap two candidates with
/// or without negating both. Each move is scored under a pairing recomputed
/// for the moved candidates and kept if it lowers the objective; touched
/// columns are appended to `moved`.
fn sign_moves(
    obj: &Objective,
    x: &mut DMatrix<f64>,
    pair: &mut Option<Vec<Option<usize>>>,
    f: &mut f64,
    g: &mut DMatrix<f64>,
    moved: &mut Vec<usize>,
) -> Result<()> {
    let b = x.ncols();
    let mut moves: Vec<(usize, usize, bool)> = (0..b).map(|i| (i, i, true)).collect();
    for i in 0..b {
        for j in i + 1..b {
            moves.push((i, j, false));
            moves.push((i, j, true));
        }
    }
    for (i, j, negate) in moves {
        let mut xn = x.clone();
        xn.swap_columns(i, j);
        if negate {
            xn.column_mut(i).neg_mut();
            if j != i {
                xn.column_mut(j).neg_mut();
            }
        }
        let pn = pair.as_ref().and_then(|_| obj.z.map(|z| greedy_pairing(&xn, z)));
        match obj.eval(&xn, pn.as_deref()) {
            Ok((fnew, gnew)) if fnew < *f => {
                *x = xn;
                *pair = pn;
                *f = fnew;
                *g = gnew;
                moved.extend([i, j]);
            }
            Ok(_) | Err(Error::NonFiniteObjective) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(())
}

fn initial_point(d: usize, b: usize, cfg: &GradMatchConfig, z: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let mut rng = rng_from(cfg.seed);
    let mut x = DMatrix::from_fn(d, b, |_, _| rng.sample::<f64, _>(StandardNormal));
    if let (Init::Features, Some(z)) = (cfg.optimizer.init, z) {
        for i in 0..b.min(z.ncols()) {
            x.set_column(i, &z.column(i));
        }
    }
    normalize_columns(&mut x);
    x
}

fn lr_at(cfg: &GradMatchConfig, t: usize) -> f64 {
    let o = &cfg.optimizer;
    if !o.lr_decay {
        return o.lr;
    }
    let frac = t as f64 / o.max_iters as f64;
    let drops = [3.0 / 8.0, 5.0 / 8.0, 7.0 / 8.0].iter().filter(|&&c| frac > c).count();
    o.lr * 0.1f64.powi(drops as i32)
}

/// Runs the attack and returns the best iterate.
pub fn grad_match_attack(
    obs: &GradientObservation,
    params: &NetworkParams,
    labels: &DVector<f64>,
    cfg: &GradMatchConfig,
    z_hat: Option<&DMatrix<f64>>,
) -> Result<ReconstructionResult> {
    Ok(grad_match_from(obs, params, labels, cfg, z_hat, None)?.result)
}

/// Runs the attack from `x0` (or the configured initialisation) and returns
/// the whole trajectory summary.
///
/// The regulariser is active only when `z_hat` is given, `alpha_f > 0` and the
/// mode is not `Off`. Each step is Adam on the tangent gradient followed by
/// renormalising every column. Sign moves count as accepted iterates and
/// reset the Adam moments of the columns they touch.
pub fn grad_match_from(
    obs: &GradientObservation,
    params: &NetworkParams,
    labels: &DVector<f64>,
    cfg: &GradMatchConfig,
    z_hat: Option<&DMatrix<f64>>,
    x0: Option<&DMatrix<f64>>,
) -> Result<GradMatchRun> {
    cfg.validate()?;
    let (d, b) = (params.d(), labels.len());
    if b == 0 {
        return Err(Error::InvalidArgument("no labels".into()));
    }
    let z = z_hat.filter(|_| cfg.alpha_f > 0.0 && cfg.feature_mode != FeatureMode::Off);
    let mut x = match x0 {
        Some(x0) => {
            if x0.shape() != (d, b) {
                return Err(Error::DimensionMismatch(format!(
                    "initial point is {:?}, expected ({d}, {b})",
                    x0.shape()
                )));
            }
            let mut x = x0.clone();
            normalize_columns(&mut x);
            x
        }
        None => initial_point(d, b, cfg, z_hat),
    };
    let obj = Objective {
        params,
        obs,
        labels,
        cfg,
        z,
    };
    let use_pairing = z.is_some() && cfg.feature_mode == FeatureMode::Cosine2;
    let mut pair = use_pairing.then(|| greedy_pairing(&x, z.unwrap()));
    let (mut f, mut g) = obj.eval(&x, pair.as_deref())?;
    let o = &cfg.optimizer;
    let mut hasher = Sha256::new();
    hash_iterate(&mut hasher, &x);
    let mut history = vec![f];
    let (mut best_f, mut best_x) = (f, x.clone());
    let mut m1 = DMatrix::zeros(d, b);
    let mut m2 = DMatrix::zeros(d, b);
    let mut converged = false;
    let mut warnings = Vec::new();
    let mut iterations = 0;
    'outer: for t in 1..=o.max_iters {
        if t > 1 && (t - 1) % cfg.pairing_refresh == 0 {
            if use_pairing {
                pair = Some(greedy_pairing(&x, z.unwrap()));
                (f, g) = obj.eval(&x, pair.as_deref())?;
            }
            if cfg.sign_moves {
                let mut flipped = Vec::new();
                sign_moves(&obj, &mut x, &mut pair, &mut f, &mut g, &mut flipped)?;
                if !flipped.is_empty() {
                    for &i in &flipped {
                        m1.column_mut(i).fill(0.0);
                        m2.column_mut(i).fill(0.0);
                    }
                    hash_iterate(&mut hasher, &x);
                    history.push(f);
                    if f < best_f {
                        best_f = f;
                        best_x = x.clone();
                    }
                }
            }
        }
        let mut gt = g.clone();
        for i in 0..b {
            let r = g.column(i).dot(&x.column(i));
            gt.column_mut(i).axpy(-r, &x.column(i), 1.0);
        }
        if gt.norm() < o.tol {
            converged = true;
            break;
        }
        iterations = t;
        m1 = &m1 * o.beta1 + &gt * (1.0 - o.beta1);
        m2 = &m2 * o.beta2 + gt.map(|v| v * v) * (1.0 - o.beta2);
        let c1 = 1.0 - o.beta1.powi(t as i32);
        let c2 = 1.0 - o.beta2.powi(t as i32);
        let dir = m1.zip_map(&m2, |a, v| (a / c1) / ((v / c2).sqrt() + o.eps));
        let lr = lr_at(cfg, t);
        let mut s = 1.0;
        loop {
            let mut xn = &x - &dir * (lr * s);
            normalize_columns(&mut xn);
            match obj.eval(&xn, pair.as_deref()) {
                Ok((fnew, gnew)) if !o.step_halving || fnew <= f => {
                    x = xn;
                    f = fnew;
                    g = gnew;
                    break;
                }
                Ok(_) | Err(Error::NonFiniteObjective) if o.step_halving && s > 1e-9 => s *= 0.5,
                Ok(_) => {
                    // No decrease along the step at any scale: stationary.
                    converged = true;
                    break 'outer;
                }
                Err(Error::NonFiniteObjective) => {
                    warnings.push(format!("objective diverged at iteration {t}; returning the best iterate"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }
        hash_iterate(&mut hasher, &x);
        history.push(f);
        if f < best_f {
            best_f = f;
            best_x = x.clone();
        }
    }
    if cfg.sign_moves {
        // Final polish from the best iterate under its own pairing.
        let mut xb = best_x.clone();
        pair = use_pairing.then(|| greedy_pairing(&xb, z.unwrap()));
        let (mut fb, mut gb) = obj.eval(&xb, pair.as_deref())?;
        let mut flipped = Vec::new();
        sign_moves(&obj, &mut xb, &mut pair, &mut fb, &mut gb, &mut flipped)?;
        if !flipped.is_empty() && fb < best_f {
            hash_iterate(&mut hasher, &xb);
            history.push(fb);
            best_f = fb;
            best_x = xb;
        }
    }
    let digest = hasher.finalize();
    let mut result = ReconstructionResult::new("gradmatch", best_x);
    result.converged = converged;
    result.warnings = warnings;
    Ok(GradMatchRun {
        result,
        iterations,
        objective: history,
        best_objective: best_f,
        trajectory_hash: digest[..16].iter().map(|v| format!("{v:02x}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradmatch::Distance;
    use crate::net::{gradient, sample_batch, sample_params, Activation};

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn single_sample_recovery() {
        let mut errs = Vec::new();
        for s in 0..5 {
            let params = sample_params(8, 256, Activation::Softplus, 100 + s).unwrap();
            let batch = sample_batch(8, 1, 200 + s).unwrap();
            let g = gradient(&params, &batch).unwrap();
            let cfg = GradMatchConfig {
                alpha_f: 0.0,
                seed: s,
                ..Default::default()
            };
            let mut r = grad_match_attack(&g, &params, &batch.y, &cfg, None).unwrap();
            errs.push(r.score(&batch.x, false).unwrap());
        }
        assert!(median(errs.clone()) < 0.05, "{errs:?}");
    }

    #[test]
    fn starting_at_truth_stops_immediately() {
        let params = sample_params(6, 64, Activation::Softplus, 1).unwrap();
        let batch = sample_batch(6, 2, 2).unwrap();
        let g = gradient(&params, &batch).unwrap();
        let run = grad_match_from(&g, &params, &batch.y, &GradMatchConfig::default(), None, Some(&batch.x)).unwrap();
        assert!(run.iterations <= 10);
        let mut r = run.result;
        assert!(r.score(&batch.x, false).unwrap() < 1e-4);
        assert!(r.converged);
    }

    fn noisy_setup() -> (NetworkParams, crate::net::DataBatch, GradientObservation, DMatrix<f64>) {
        let params = sample_params(6, 64, Activation::Softplus, 3).unwrap();
        let batch = sample_batch(6, 2, 4).unwrap();
        let g = crate::defenses::apply_noise(&gradient(&params, &batch).unwrap(), 0.05, 5).unwrap();
        let mut z = batch.x.clone() + DMatrix::from_fn(6, 2, |i, j| 0.05 * ((i + 2 * j) as f64).sin());
        normalize_columns(&mut z);
        (params, batch, g, z)
    }

    #[test]
    fn deterministic_trajectory() {
        let (params, batch, g, z) = noisy_setup();
        let cfg = GradMatchConfig {
            optimizer: crate::gradmatch::OptimizerConfig {
                max_iters: 300,
                ..Default::default()
            },
            seed: 9,
            ..Default::default()
        };
        let a = grad_match_from(&g, &params, &batch.y, &cfg, Some(&z), None).unwrap();
        let b = grad_match_from(&g, &params, &batch.y, &cfg, Some(&z), None).unwrap();
        assert_eq!(a.trajectory_hash, b.trajectory_hash);
        let other = GradMatchConfig { seed: 10, ..cfg };
        let c = grad_match_from(&g, &params, &batch.y, &other, Some(&z), None).unwrap();
        assert_ne!(a.trajectory_hash, c.trajectory_hash);
    }

    #[test]
    fn flipping_directions_leaves_trajectory_unchanged() {
        let (params, batch, g, z) = noisy_setup();
        let cfg = GradMatchConfig {
            optimizer: crate::gradmatch::OptimizerConfig {
                max_iters: 250,
                ..Default::default()
            },
            pairing_refresh: 50,
            ..Default::default()
        };
        let a = grad_match_from(&g, &params, &batch.y, &cfg, Some(&z), None).unwrap();
        let b = grad_match_from(&g, &params, &batch.y, &cfg, Some(&(-&z)), None).unwrap();
        assert_eq!(a.trajectory_hash, b.trajectory_hash);
    }

    #[test]
    fn step_halving_gives_monotone_descent() {
        let (params, batch, g, z) = noisy_setup();
        for distance in [Distance::SquaredL2, Distance::NegativeCosine] {
            let cfg = GradMatchConfig {
                distance,
                group_reweighting: true,
                optimizer: crate::gradmatch::OptimizerConfig {
                    max_iters: 300,
                    lr: 0.2,
                    step_halving: true,
                    ..Default::default()
                },
                pairing_refresh: 1000,
                ..Default::default()
            };
            let run = grad_match_from(&g, &params, &batch.y, &cfg, Some(&z), None).unwrap();
            assert!(run.objective.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(run.best_objective, *run.objective.last().unwrap());
        }
    }

    #[test]
    fn best_iterate_is_returned() {
        let (params, batch, g, _) = noisy_setup();
        let cfg = GradMatchConfig {
            optimizer: crate::gradmatch::OptimizerConfig {
                max_iters: 200,
                lr: 0.3,
                lr_decay: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = grad_match_from(&g, &params, &batch.y, &cfg, None, None).unwrap();
        let min = run.objective.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(run.best_objective, min);
        let (v, _) = grad_match_loss(&run.result.x_hat, &batch.y, &params, &g, &cfg).unwrap();
        assert_eq!(v, min);
    }

    #[test]
    fn output_columns_are_unit() {
        let (params, batch, g, z) = noisy_setup();
        let cfg = GradMatchConfig {
            feature_mode: FeatureMode::Subspace,
            optimizer: crate::gradmatch::OptimizerConfig {
                max_iters: 50,
                init: Init::Features,
                ..Default::default()
            },
            ..Default::default()
        };
        let r = grad_match_attack(&g, &params, &batch.y, &cfg, Some(&z)).unwrap();
        for c in r.x_hat.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_initial_point() {
        let (params, batch, g, _) = noisy_setup();
        let x0 = DMatrix::zeros(3, 2);
        assert!(grad_match_from(&g, &params, &batch.y, &GradMatchConfig::default(), None, Some(&x0)).is_err());
    }
}
