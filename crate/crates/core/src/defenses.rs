//! Defense transforms on observed gradients and training-side mechanisms.
//!
//! Observation transforms (noise, clipping, pruning, dropout) map a gradient to
//! a gradient. Local and secure aggregation need the training data and are
//! produced by [`local_aggregation`] and [`secure_aggregate`] instead.
//! Every transform appends a [`DefenseRecord`] to the observation provenance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::net::{gradient, DataBatch, GradientObservation, NetworkParams};
use crate::rng::{mix, rng_from};
use crate::{Error, Result};

/// Which coordinates a pruning ratio ranks together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    /// Each parameter tensor (`g_a`, `g_W`) keeps its own top `1 − p` fraction.
    #[default]
    PerGroup,
    /// One ranking over the whole flattened vector.
    Global,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    /// Additive `N(0, σ₀²)` on every coordinate. With `clip_scaled` the std is
    /// `σ₀·C` for the most recent clip threshold `C`.
    Noise {
        sigma0: f64,
        #[serde(default)]
        clip_scaled: bool,
    },
    Clip {
        c: f64,
    },
    PruneRatio {
        p: f64,
        #[serde(default)]
        scope: PruneScope,
    },
    PruneThreshold {
        gamma: f64,
    },
    /// Drops hidden units (both layers' entries) unless `node_level` is false,
    /// in which case coordinates are dropped independently.
    Dropout {
        p: f64,
        #[serde(default = "default_true")]
        node_level: bool,
    },
    LocalAggregation {
        steps: usize,
        eta_a: f64,
        eta_w: f64,
        /// Draw a fresh batch for every step instead of reusing one.
        #[serde(default)]
        fresh_batches: bool,
    },
    SecureAggregation {
        client_sizes: Vec<usize>,
    },
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            DefenseConfig::Noise { sigma0, .. } if !(sigma0 >= 0.0 && sigma0.is_finite()) => {
                bad(format!("noise sigma0 must be ≥ 0, got {sigma0}"))
            }
            DefenseConfig::Clip { c } if !(c > 0.0 && c.is_finite()) => {
                bad(format!("clip threshold must be > 0, got {c}"))
            }
            DefenseConfig::PruneRatio { p, .. } | DefenseConfig::Dropout { p, .. }
                if !(0.0..1.0).contains(&p) =>
            {
                bad(format!("ratio must lie in [0, 1), got {p}"))
            }
            DefenseConfig::PruneThreshold { gamma } if !(gamma >= 0.0) => {
                bad(format!("prune threshold must be ≥ 0, got {gamma}"))
            }
            DefenseConfig::LocalAggregation {
                steps,
                eta_a,
                eta_w,
                ..
            } => {
                if steps == 0 {
                    bad("local aggregation needs steps ≥ 1".into())
                } else if !(eta_a > 0.0 && eta_w > 0.0) {
                    bad(format!("learning rates must be > 0, got {eta_a}, {eta_w}"))
                } else {
                    Ok(())
                }
            }
            DefenseConfig::SecureAggregation { ref client_sizes } => {
                if client_sizes.is_empty() || client_sizes.contains(&0) {
                    bad("secure aggregation needs non-empty clients".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::Noise { .. } => "noise",
            DefenseConfig::Clip { .. } => "clip",
            DefenseConfig::PruneRatio { .. } => "prune_ratio",
            DefenseConfig::PruneThreshold { .. } => "prune_threshold",
            DefenseConfig::Dropout { .. } => "dropout",
            DefenseConfig::LocalAggregation { .. } => "local_aggregation",
            DefenseConfig::SecureAggregation { .. } => "secure_aggregation",
        }
    }

    /// The headline scalar of the defense, used as a table key.
    pub fn param(&self) -> f64 {
        match self {
            DefenseConfig::Noise { sigma0, .. } => *sigma0,
            DefenseConfig::Clip { c } => *c,
            DefenseConfig::PruneRatio { p, .. } | DefenseConfig::Dropout { p, .. } => *p,
            DefenseConfig::PruneThreshold { gamma } => *gamma,
            DefenseConfig::LocalAggregation { steps, .. } => *steps as f64,
            DefenseConfig::SecureAggregation { client_sizes } => client_sizes.len() as f64,
        }
    }

    pub fn is_observation_transform(&self) -> bool {
        !matches!(
            self,
            DefenseConfig::LocalAggregation { .. } | DefenseConfig::SecureAggregation { .. }
        )
    }
}

/// The DP-SGD preset: clip to `c`, then add `N(0, σ₀²)`.
pub fn dp_sgd(c: f64, sigma0: f64) -> Vec<DefenseConfig> {
    vec![
        DefenseConfig::Clip { c },
        DefenseConfig::Noise {
            sigma0,
            clip_scaled: false,
        },
    ]
}

/// Provenance entry left by one defense.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DefenseRecord {
    pub variant: String,
    pub param: f64,
    /// `min{1, C/‖G‖}`; 1 for every non-clipping defense.
    pub clip_factor: f64,
    /// `‖G‖` seen by the defense.
    pub input_norm: f64,
    /// Noise std actually used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    /// First 16 hex digits of SHA-256 over the noise draw.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_hash: Option<String>,
    /// Over flattened coordinates; `true` where the coordinate survives.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keep_mask: Option<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped_units: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip)]
    pub rollout: Option<Box<Rollout>>,
}

impl DefenseRecord {
    fn new(variant: &str, param: f64, input_norm: f64) -> Self {
        Self {
            variant: variant.into(),
            param,
            clip_factor: 1.0,
            input_norm,
            ..Default::default()
        }
    }

    pub fn kept(&self) -> Option<usize> {
        self.keep_mask
            .as_ref()
            .map(|m| m.iter().filter(|&&k| k).count())
    }
}

/// Parameters visited by a local-aggregation rollout and the raw difference.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub eta_a: f64,
    pub eta_w: f64,
    /// `Θ⁽⁰⁾, …, Θ⁽ˢ⁾`.
    pub snapshots: Vec<NetworkParams>,
    /// `Θ⁽⁰⁾ − Θ⁽ˢ⁾` before the learning-rate rescaling.
    pub delta_a: DVector<f64>,
    pub delta_w: DMatrix<f64>,
}

fn noise_hash(draw: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in draw {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn last_clip_threshold(g: &GradientObservation) -> Option<f64> {
    g.provenance
        .iter()
        .rev()
        .find(|r| r.variant == "clip")
        .map(|r| r.param)
}

fn noise_with_std(g: &GradientObservation, std: f64, sigma0: f64, seed: u64) -> GradientObservation {
    let mut rec = DefenseRecord::new("noise", sigma0, g.norm());
    rec.noise_sigma = Some(std);
    let mut out = g.clone();
    if std > 0.0 {
        let layout = g.layout();
        let mut rng = rng_from(seed);
        let draw: Vec<f64> = (0..layout.len())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut flat = g.flatten();
        flat += DVector::from_column_slice(&draw);
        out = GradientObservation::from_flat(layout, &flat, g.provenance.clone())
            .expect("layout preserved");
        rec.noise_hash = Some(noise_hash(&draw));
    }
    out.provenance.push(rec);
    out
}

/// Adds i.i.d. `N(0, σ₀²)` to every flattened coordinate.
pub fn apply_noise(g: &GradientObservation, sigma0: f64, seed: u64) -> Result<GradientObservation> {
    DefenseConfig::Noise {
        sigma0,
        clip_scaled: false,
    }
    .validate()?;
    Ok(noise_with_std(g, sigma0, sigma0, seed))
}

/// Scales the whole gradient by `R = min{1, C/‖G‖₂}`.
pub fn apply_clip(g: &GradientObservation, c: f64) -> Result<GradientObservation> {
    DefenseConfig::Clip { c }.validate()?;
    let norm = g.norm();
    let factor = if norm > c { c / norm } else { 1.0 };
    let mut out = g.clone();
    if factor < 1.0 {
        out.scale(factor);
    }
    let mut rec = DefenseRecord::new("clip", c, norm);
    rec.clip_factor = factor;
    out.provenance.push(rec);
    Ok(out)
}

fn masked(
    g: &GradientObservation,
    keep: Vec<bool>,
    mut rec: DefenseRecord,
) -> GradientObservation {
    let mut flat = g.flatten();
    for (v, &k) in flat.iter_mut().zip(&keep) {
        if !k {
            *v = 0.0;
        }
    }
    let mut out = GradientObservation::from_flat(g.layout(), &flat, g.provenance.clone())
        .expect("layout preserved");
    rec.keep_mask = Some(keep);
    out.provenance.push(rec);
    out
}

/// Marks the `⌊p·n⌋` smallest-magnitude entries of `idx` as pruned.
/// Ties go to the lower index first.
fn prune_smallest(flat: &DVector<f64>, idx: &[usize], p: f64, keep: &mut [bool]) {
    let k = (p * idx.len() as f64).floor() as usize;
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| flat[a].abs().total_cmp(&flat[b].abs()).then(a.cmp(&b)));
    for &i in &order[..k] {
        keep[i] = false;
    }
}

/// Zeros the smallest-magnitude fraction `p` of the gradient.
pub fn apply_prune_ratio(
    g: &GradientObservation,
    p: f64,
    scope: PruneScope,
) -> Result<GradientObservation> {
    DefenseConfig::PruneRatio { p, scope }.validate()?;
    let flat = g.flatten();
    let layout = g.layout();
    let mut keep = vec![true; flat.len()];
    match scope {
        PruneScope::Global => {
            let all: Vec<usize> = (0..flat.len()).collect();
            prune_smallest(&flat, &all, p, &mut keep);
        }
        PruneScope::PerGroup => {
            let a: Vec<usize> = (0..layout.m).collect();
            let w: Vec<usize> = (layout.m..layout.len()).collect();
            prune_smallest(&flat, &a, p, &mut keep);
            prune_smallest(&flat, &w, p, &mut keep);
        }
    }
    Ok(masked(g, keep, DefenseRecord::new("prune_ratio", p, g.norm())))
}

/// Zeros every coordinate with `|g| < γ`.
pub fn apply_prune_threshold(g: &GradientObservation, gamma: f64) -> Result<GradientObservation> {
    DefenseConfig::PruneThreshold { gamma }.validate()?;
    let keep = g.flatten().iter().map(|v| v.abs() >= gamma).collect();
    Ok(masked(g, keep, DefenseRecord::new("prune_threshold", gamma, g.norm())))
}

/// Drops each hidden unit with probability `p`, zeroing `g_a[j]` and row `g_W[j]`.
pub fn apply_dropout(
    g: &GradientObservation,
    p: f64,
    node_level: bool,
    seed: u64,
) -> Result<GradientObservation> {
    DefenseConfig::Dropout { p, node_level }.validate()?;
    let layout = g.layout();
    let mut rng = rng_from(seed);
    let mut rec = DefenseRecord::new("dropout", p, g.norm());
    let keep: Vec<bool> = if node_level {
        let units: Vec<bool> = (0..layout.m).map(|_| !rng.random_bool(p)).collect();
        let dropped = units.iter().filter(|&&k| !k).count();
        if dropped == layout.m {
            return Err(Error::DegenerateObservation(format!(
                "dropout removed all {} hidden units",
                layout.m
            )));
        }
        rec.dropped_units = Some(dropped);
        (0..layout.len()).map(|c| units[layout.unit_of(c)]).collect()
    } else {
        let keep: Vec<bool> = (0..layout.len()).map(|_| !rng.random_bool(p)).collect();
        if !keep.contains(&true) {
            return Err(Error::DegenerateObservation("dropout removed every coordinate".into()));
        }
        keep
    };
    Ok(masked(g, keep, rec))
}

/// Runs `steps` full-batch gradient-descent updates with per-layer rates and
/// returns `(Θ⁽⁰⁾ − Θ⁽ˢ⁾)/η` per layer, i.e. the accumulated gradients.
///
/// `batches` holds either one batch reused at every step or one per step.
pub fn local_aggregation(
    params: &NetworkParams,
    batches: &[DataBatch],
    eta_a: f64,
    eta_w: f64,
    steps: usize,
) -> Result<GradientObservation> {
    DefenseConfig::LocalAggregation {
        steps,
        eta_a,
        eta_w,
        fresh_batches: false,
    }
    .validate()?;
    if batches.len() != 1 && batches.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "need 1 or {steps} batches, got {}",
            batches.len()
        )));
    }
    let mut theta = params.clone();
    let mut snapshots = vec![theta.clone()];
    let mut first_norm = 0.0;
    for t in 0..steps {
        let batch = &batches[if batches.len() == 1 { 0 } else { t }];
        let g = gradient(&theta, batch)?;
        if t == 0 {
            first_norm = g.norm();
        }
        theta.a.axpy(-eta_a, &g.g_a, 1.0);
        theta.w += &g.g_w * (-eta_w);
        if !(theta.a.iter().all(|v| v.is_finite()) && theta.w.iter().all(|v| v.is_finite())) {
            return Err(Error::Diverged { step: t + 1 });
        }
        snapshots.push(theta.clone());
    }
    let delta_a = &params.a - &theta.a;
    let delta_w = &params.w - &theta.w;
    let mut rec = DefenseRecord::new("local_aggregation", steps as f64, first_norm);
    rec.steps = Some(steps);
    let obs = GradientObservation {
        g_a: &delta_a / eta_a,
        g_w: &delta_w / eta_w,
        provenance: Vec::new(),
    };
    rec.rollout = Some(Box::new(Rollout {
        eta_a,
        eta_w,
        snapshots,
        delta_a,
        delta_w,
    }));
    let mut obs = obs;
    obs.provenance.push(rec);
    Ok(obs)
}

/// `(1/B) Σ_l G_l` with `B = Σ_l B_l`.
///
/// Client gradients are unreduced sums over their own samples, so `G_l`
/// already carries the factor `B_l` of the weighted average `(1/B) Σ_l B_l Ḡ_l`.
/// Per-client provenance does not survive aggregation.
pub fn secure_aggregate(clients: &[(GradientObservation, usize)]) -> Result<GradientObservation> {
    let (first, _) = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("no clients to aggregate".into()))?;
    let layout = first.layout();
    let total: usize = clients.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total batch size is zero".into()));
    }
    let mut g_a = DVector::zeros(layout.m);
    let mut g_w = DMatrix::zeros(layout.m, layout.d);
    for (g, _) in clients {
        if g.layout() != layout {
            return Err(Error::LayoutMismatch(format!(
                "client layout {:?} differs from {:?}",
                g.layout(),
                layout
            )));
        }
        g_a += &g.g_a;
        g_w += &g.g_w;
    }
    let scale = 1.0 / total as f64;
    let mut out = GradientObservation {
        g_a: g_a * scale,
        g_w: g_w * scale,
        provenance: Vec::new(),
    };
    let rec = DefenseRecord::new("secure_aggregation", clients.len() as f64, out.norm());
    out.provenance.push(rec);
    Ok(out)
}

/// Applies one observation transform.
pub fn apply(cfg: &DefenseConfig, g: &GradientObservation, seed: u64) -> Result<GradientObservation> {
    cfg.validate()?;
    match *cfg {
        DefenseConfig::Noise {
            sigma0,
            clip_scaled,
        } => {
            if clip_scaled {
                let c = last_clip_threshold(g).ok_or_else(|| {
                    Error::Config("clip-scaled noise needs a preceding clip".into())
                })?;
                Ok(noise_with_std(g, sigma0 * c, sigma0, seed))
            } else {
                apply_noise(g, sigma0, seed)
            }
        }
        DefenseConfig::Clip { c } => apply_clip(g, c),
        DefenseConfig::PruneRatio { p, scope } => apply_prune_ratio(g, p, scope),
        DefenseConfig::PruneThreshold { gamma } => apply_prune_threshold(g, gamma),
        DefenseConfig::Dropout { p, node_level } => apply_dropout(g, p, node_level, seed),
        DefenseConfig::LocalAggregation { .. } | DefenseConfig::SecureAggregation { .. } => {
            Err(Error::NotAnObservationTransform(cfg.name().into()))
        }
    }
}

/// Applies observation transforms left to right. Defense `i` draws from
/// `mix(seed, i)`.
pub fn compose(
    defenses: &[DefenseConfig],
    g: &GradientObservation,
    seed: u64,
) -> Result<GradientObservation> {
    if defenses.is_empty() {
        return Err(Error::InvalidArgument("empty defense list".into()));
    }
    let mut out = g.clone();
    for (i, d) in defenses.iter().enumerate() {
        out = apply(d, &out, mix(seed, i as u64))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{sample_batch, sample_params, Activation, GradientLayout};

    fn obs(seed: u64) -> GradientObservation {
        let p = sample_params(6, 40, Activation::Softplus, seed).unwrap();
        let b = sample_batch(6, 2, seed + 1).unwrap();
        gradient(&p, &b).unwrap()
    }

    fn from_flat(v: &[f64]) -> GradientObservation {
        // m = 1, d = len − 1
        let layout = GradientLayout {
            m: 1,
            d: v.len() - 1,
        };
        GradientObservation::from_flat(layout, &DVector::from_column_slice(v), vec![]).unwrap()
    }

    fn check_mask(before: &GradientObservation, after: &GradientObservation) {
        let mask = after.provenance.last().unwrap().keep_mask.as_ref().unwrap();
        let (b, a) = (before.flatten(), after.flatten());
        assert_eq!(mask.len(), b.len());
        for c in 0..b.len() {
            assert_eq!(a[c], if mask[c] { b[c] } else { 0.0 });
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = obs(1);
        let n = apply_noise(&g, 0.0, 3).unwrap();
        assert_eq!(n.flatten(), g.flatten());
    }

    #[test]
    fn noise_std_and_determinism() {
        let layout = GradientLayout { m: 1, d: 99_999 };
        let g = GradientObservation::from_flat(layout, &DVector::zeros(100_000), vec![]).unwrap();
        let n = apply_noise(&g, 0.1, 5).unwrap();
        let v = n.flatten();
        let mean = v.mean();
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt();
        assert!((0.099..=0.101).contains(&std), "{std}");
        let again = apply_noise(&g, 0.1, 5).unwrap();
        assert_eq!(again.flatten(), v);
        assert_eq!(again.provenance[0].noise_hash, n.provenance[0].noise_hash);
        assert_ne!(apply_noise(&g, 0.1, 6).unwrap().flatten(), v);
    }

    #[test]
    fn noise_preserves_expectation() {
        let g = obs(2);
        let base = g.flatten();
        let sigma = 0.05;
        let trials = 1000;
        let mut acc = DVector::zeros(base.len());
        for s in 0..trials {
            acc += apply_noise(&g, sigma, s).unwrap().flatten();
        }
        acc /= trials as f64;
        for c in (0..base.len()).step_by(17) {
            assert!((acc[c] - base[c]).abs() < 4.0 * sigma / (trials as f64).sqrt());
        }
    }

    #[test]
    fn clipping() {
        let g = from_flat(&[6.0, 8.0]);
        let c = apply_clip(&g, 2.0).unwrap();
        assert!((c.norm() - 2.0).abs() < 1e-15);
        assert!((c.provenance[0].clip_factor - 0.2).abs() < 1e-15);
        let same = apply_clip(&g, 10.0).unwrap();
        assert_eq!(same.flatten(), g.flatten());
        assert_eq!(same.provenance[0].clip_factor, 1.0);
        let zero = from_flat(&[0.0, 0.0]);
        assert_eq!(apply_clip(&zero, 1.0).unwrap().provenance[0].clip_factor, 1.0);
        assert!(apply_clip(&g, 0.0).is_err());
    }

    #[test]
    fn prune_ratio_example() {
        let g = from_flat(&[3.0, -1.0, 2.0, 0.5]);
        let p = apply_prune_ratio(&g, 0.5, PruneScope::Global).unwrap();
        assert_eq!(p.flatten().as_slice(), &[3.0, 0.0, 2.0, 0.0]);
        check_mask(&g, &p);
        let id = apply_prune_ratio(&g, 0.0, PruneScope::Global).unwrap();
        assert_eq!(id.flatten(), g.flatten());
    }

    #[test]
    fn prune_ties_break_by_index() {
        let g = from_flat(&[1.0, -1.0, 1.0, 2.0]);
        let p = apply_prune_ratio(&g, 0.5, PruneScope::Global).unwrap();
        assert_eq!(p.flatten().as_slice(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn prune_per_group_ranks_each_tensor() {
        let g = obs(3);
        let p = apply_prune_ratio(&g, 0.5, PruneScope::PerGroup).unwrap();
        check_mask(&g, &p);
        let nz_a = p.g_a.iter().filter(|v| **v != 0.0).count();
        let nz_w = p.g_w.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nz_a, 20);
        assert_eq!(nz_w, 120);
    }

    #[test]
    fn ratio_and_threshold_agree() {
        let g = obs(4);
        let flat = g.flatten();
        let p = 0.37;
        let k = (p * flat.len() as f64).floor() as usize;
        let mut mags: Vec<f64> = flat.iter().map(|v| v.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let gamma = 0.5 * (mags[k - 1] + mags[k]);
        let by_ratio = apply_prune_ratio(&g, p, PruneScope::Global).unwrap();
        let by_threshold = apply_prune_threshold(&g, gamma).unwrap();
        assert_eq!(
            by_ratio.provenance[0].keep_mask,
            by_threshold.provenance[0].keep_mask
        );
        check_mask(&g, &by_threshold);
    }

    #[test]
    fn threshold_prune_is_idempotent() {
        let g = obs(5);
        let chain = [
            DefenseConfig::PruneThreshold { gamma: 1e-3 },
            DefenseConfig::PruneThreshold { gamma: 1e-3 },
        ];
        let twice = compose(&chain, &g, 1).unwrap();
        let once = apply_prune_threshold(&g, 1e-3).unwrap();
        assert_eq!(twice.flatten(), once.flatten());
        assert_eq!(twice.provenance[0].keep_mask, twice.provenance[1].keep_mask);
    }

    #[test]
    fn dropout_zeros_whole_units() {
        let g = obs(6);
        let d = apply_dropout(&g, 0.5, true, 9).unwrap();
        check_mask(&g, &d);
        let mut dropped = 0;
        for j in 0..g.g_a.len() {
            if d.g_a[j] == 0.0 {
                assert_eq!(d.g_w.row(j).norm(), 0.0);
                dropped += 1;
            } else {
                assert_eq!(d.g_w.row(j), g.g_w.row(j));
            }
        }
        assert_eq!(Some(dropped), d.provenance[0].dropped_units);
        assert_eq!(apply_dropout(&g, 0.0, true, 1).unwrap().flatten(), g.flatten());
    }

    #[test]
    fn dropout_survivor_count() {
        let layout = GradientLayout { m: 10_000, d: 1 };
        let g = GradientObservation::from_flat(layout, &DVector::from_element(20_000, 1.0), vec![])
            .unwrap();
        let d = apply_dropout(&g, 0.5, true, 42).unwrap();
        let survivors = d.g_a.iter().filter(|v| **v != 0.0).count();
        // binomial(10⁴, 1/2): mean 5000, std 50
        assert!((4850..=5150).contains(&survivors));
        assert!((4900..=5100).contains(&survivors), "{survivors}");
    }

    #[test]
    fn dropout_can_exhaust_units() {
        let g = from_flat(&[1.0, 2.0]);
        let mut hit = false;
        for s in 0..200 {
            if let Err(Error::DegenerateObservation(_)) = apply_dropout(&g, 0.9, true, s) {
                hit = true;
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn local_aggregation_single_step_is_gradient() {
        let p = sample_params(5, 30, Activation::Softplus, 7).unwrap();
        let b = sample_batch(5, 2, 8).unwrap();
        let g = gradient(&p, &b).unwrap();
        let la = local_aggregation(&p, std::slice::from_ref(&b), 0.25, 0.5, 1).unwrap();
        assert!((la.flatten() - g.flatten()).amax() < 1e-12 * g.flatten().amax());
        assert_eq!(la.provenance[0].steps, Some(1));
        let roll = la.provenance[0].rollout.as_ref().unwrap();
        assert_eq!(roll.snapshots.len(), 2);
    }

    #[test]
    fn local_aggregation_two_steps_near_double_gradient() {
        let m = 8192;
        let p = sample_params(8, m, Activation::Softplus, 11).unwrap();
        let b = sample_batch(8, 2, 12).unwrap();
        let g = gradient(&p, &b).unwrap().flatten() * 2.0;
        let mf = m as f64;
        let la = local_aggregation(&p, &[b], 1.0 / (mf * mf), 0.1 / mf.sqrt(), 2).unwrap();
        let rel = (la.flatten() - &g).norm() / g.norm();
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn local_aggregation_rejects_bad_batches_and_divergence() {
        let p = sample_params(3, 4, Activation::Exp, 1).unwrap();
        let b = sample_batch(3, 1, 2).unwrap();
        assert!(local_aggregation(&p, &[b.clone(), b.clone()], 0.1, 0.1, 3).is_err());
        assert!(matches!(
            local_aggregation(&p, &[b], 1e300, 1e300, 3),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn secure_aggregation_is_scaled_union() {
        let p = sample_params(4, 16, Activation::Softplus, 1).unwrap();
        let b1 = sample_batch(4, 2, 2).unwrap();
        let b2 = sample_batch(4, 3, 3).unwrap();
        let g1 = gradient(&p, &b1).unwrap();
        let g2 = gradient(&p, &b2).unwrap();
        let agg = secure_aggregate(&[(g1.clone(), 2), (g2, 3)]).unwrap();
        let union = gradient(&p, &b1.concat(&b2).unwrap()).unwrap().flatten() / 5.0;
        assert!((agg.flatten() - union).amax() < 1e-15);
        assert_eq!(agg.provenance.len(), 1);
        let single = secure_aggregate(&[(g1.clone(), 2)]).unwrap();
        assert_eq!(single.flatten(), g1.flatten() / 2.0);
        let other = obs(9);
        assert!(matches!(
            secure_aggregate(&[(g1, 2), (other, 2)]),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn compose_examples() {
        let g = obs(10);
        let id = compose(&dp_sgd(g.norm() * 2.0, 0.0), &g, 3).unwrap();
        assert_eq!(id.flatten(), g.flatten());
        assert_eq!(id.provenance.len(), 2);

        let c = g.norm() / 3.0;
        let clip_noise = compose(&dp_sgd(c, 0.05), &g, 4).unwrap();
        let noise_clip = compose(
            &[
                DefenseConfig::Noise {
                    sigma0: 0.05,
                    clip_scaled: false,
                },
                DefenseConfig::Clip { c },
            ],
            &g,
            4,
        )
        .unwrap();
        assert_ne!(clip_noise.flatten(), noise_clip.flatten());
        assert!(compose(&[], &g, 1).is_err());
        let la = DefenseConfig::LocalAggregation {
            steps: 2,
            eta_a: 1.0,
            eta_w: 1.0,
            fresh_batches: false,
        };
        assert!(matches!(
            compose(&[la], &g, 1),
            Err(Error::NotAnObservationTransform(_))
        ));
    }

    #[test]
    fn clip_scaled_noise_uses_threshold() {
        let g = obs(11);
        let chain = [
            DefenseConfig::Clip { c: 0.5 },
            DefenseConfig::Noise {
                sigma0: 0.2,
                clip_scaled: true,
            },
        ];
        let out = compose(&chain, &g, 1).unwrap();
        assert_eq!(out.provenance[1].noise_sigma, Some(0.1));
        assert!(compose(&chain[1..], &g, 1).is_err());
    }

    #[test]
    fn config_json() {
        let cfgs: Vec<DefenseConfig> = serde_json::from_str(
            r#"[{"kind":"clip","c":1.0},{"kind":"dropout","p":0.5},
                {"kind":"prune_ratio","p":0.9,"scope":"global"}]"#,
        )
        .unwrap();
        assert_eq!(
            cfgs[1],
            DefenseConfig::Dropout {
                p: 0.5,
                node_level: true
            }
        );
        assert_eq!(
            cfgs[2],
            DefenseConfig::PruneRatio {
                p: 0.9,
                scope: PruneScope::Global
            }
        );
        assert!(DefenseConfig::Dropout { p: 1.0, node_level: true }.validate().is_err());
        assert!(DefenseConfig::Noise { sigma0: -1.0, clip_scaled: false }.validate().is_err());
    }
}
