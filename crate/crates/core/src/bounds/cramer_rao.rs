use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::defenses::local_aggregation;
use crate::net::{DataBatch, GradientObservation, InputJacobian, NetworkParams};
use crate::serde_mat::finite_or_inf;
use crate::{Error, Result};

/// Eigenvalues of `JJᵀ` below this fraction of the largest are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Cramér–Rao lower bounds on the per-sample reconstruction risk.
///
/// `*_sq` fields are squared risks `R_L²`; the plain fields are `R_L`.
/// Infinite values serialise as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Observation noise std supplied by the caller.
    pub sigma: f64,
    /// Noise std after defense adjustments (clipping inflates it).
    pub sigma_eff: f64,
    pub b: usize,
    pub d: usize,
    /// `(1/B)·tr((JJᵀ)⁻¹)·σ²`.
    #[serde(with = "finite_or_inf")]
    pub exact_sq: f64,
    #[serde(with = "finite_or_inf")]
    pub exact: f64,
    /// `(1/B)·(Bd)²·σ²/tr(JJᵀ)`.
    #[serde(with = "finite_or_inf")]
    pub loose_sq: f64,
    #[serde(with = "finite_or_inf")]
    pub loose: f64,
    /// Exact form restricted to the range of `JJᵀ`; finite even when rank deficient.
    #[serde(with = "finite_or_inf")]
    pub range_sq: f64,
    pub rank: usize,
    pub rank_deficient: bool,
    /// `min{1, C/‖G‖}` applied to σ.
    pub clip_factor: f64,
    /// Fraction of Jacobian Frobenius mass removed by masking.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<f64>,
    /// Nominal drop ratio of the masking defense.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    /// `σ_eff·√(d/m)`, the closed-form order of the undefended bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_form: Option<f64>,
    /// `σ_eff·√(d/((1−p)m))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_form_p: Option<f64>,
    /// `σ_eff·√(d/((1−p̂)m))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closed_form_p_hat: Option<f64>,
    pub flags: Vec<String>,
}

fn check_sigma(sigma: f64, b: usize) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("σ must be > 0, got {sigma}")));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("B must be ≥ 1".into()));
    }
    Ok(())
}

/// Bounds from the Gram matrix `JJᵀ` of size `(Bd) × (Bd)`.
pub fn cramer_rao_from_gram(gram: &DMatrix<f64>, sigma: f64, b: usize) -> Result<BoundReport> {
    check_sigma(sigma, b)?;
    let n = gram.nrows();
    if gram.ncols() != n || !n.is_multiple_of(b) {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix {}×{} does not fit B = {b}",
            gram.nrows(),
            gram.ncols()
        )));
    }
    let s2 = sigma * sigma;
    let bf = b as f64;
    let trace = gram.trace();
    let eig = SymmetricEigen::new((gram + gram.transpose()) * 0.5);
    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = EIGEN_FLOOR * top;
    let mut inv_sum = 0.0;
    let mut rank = 0;
    for &l in eig.eigenvalues.iter() {
        if top > 0.0 && l > floor {
            inv_sum += 1.0 / l;
            rank += 1;
        }
    }
    let rank_deficient = rank < n;
    let exact_sq = if rank_deficient {
        f64::INFINITY
    } else {
        inv_sum * s2 / bf
    };
    let range_sq = if rank == 0 { f64::INFINITY } else { inv_sum * s2 / bf };
    let loose_sq = if trace > 0.0 {
        (n as f64).powi(2) * s2 / (bf * trace)
    } else {
        f64::INFINITY
    };
    let mut flags = Vec::new();
    if rank_deficient {
        flags.push(format!("rank deficient: rank {rank} of {n}"));
    }
    Ok(BoundReport {
        sigma,
        sigma_eff: sigma,
        b,
        d: n / b,
        exact_sq,
        exact: exact_sq.sqrt(),
        loose_sq,
        loose: loose_sq.sqrt(),
        range_sq,
        rank,
        rank_deficient,
        clip_factor: 1.0,
        p_hat: None,
        p: None,
        closed_form: None,
        closed_form_p: None,
        closed_form_p_hat: None,
        flags,
    })
}

/// Bounds for a Jacobian with one row per data coordinate (`Bd` rows).
pub fn cramer_rao(j: &DMatrix<f64>, sigma: f64, b: usize) -> Result<BoundReport> {
    cramer_rao_from_gram(&(j * j.transpose()), sigma, b)
}

/// Bounds for a defended observation, reading the defense provenance of `obs`.
///
/// * clipping with `‖G‖ > C` inflates σ to `σ·‖G‖/C`;
/// * dropout and pruning delete the masked gradient coordinates from `J` and
///   report `p̂ = 1 − ‖J_kept‖_F²/‖J‖_F²` with the closed-form heuristics;
/// * local and secure aggregation keep the base bound and raise a flag.
pub fn bound_under_defense(
    jac: &InputJacobian,
    sigma: f64,
    b: usize,
    obs: &GradientObservation,
) -> Result<BoundReport> {
    check_sigma(sigma, b)?;
    let n = jac.j.ncols();
    if obs.layout().len() != n {
        return Err(Error::LayoutMismatch(format!(
            "observation has {} coordinates, Jacobian has {n}",
            obs.layout().len()
        )));
    }
    let mut sigma_eff = sigma;
    let mut clip_factor = 1.0;
    let mut keep: Option<Vec<bool>> = None;
    let mut nominal_keep = 1.0;
    let mut flags = Vec::new();
    for rec in &obs.provenance {
        match rec.variant.as_str() {
            "clip" if rec.clip_factor < 1.0 => {
                sigma_eff *= rec.input_norm / rec.param;
                clip_factor *= rec.clip_factor;
            }
            "dropout" | "prune_ratio" | "prune_threshold" => {
                let mask = rec
                    .keep_mask
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("{} record without a mask", rec.variant)))?;
                if mask.len() != n {
                    return Err(Error::LayoutMismatch("mask length differs from the gradient".into()));
                }
                nominal_keep *= if rec.variant == "prune_threshold" {
                    mask.iter().filter(|&&k| k).count() as f64 / n as f64
                } else {
                    1.0 - rec.param
                };
                keep = Some(match keep {
                    None => mask.clone(),
                    Some(prev) => prev.iter().zip(mask).map(|(a, b)| *a && *b).collect(),
                });
            }
            "local_aggregation" => flags.push(
                "local aggregation: base bound reported; same order as undefended for η_a = O(1/m²), η_w = O(1)"
                    .into(),
            ),
            "secure_aggregation" => {
                flags.push("secure aggregation: bound for the aggregated batch as a whole".into())
            }
            _ => {}
        }
    }
    let m = obs.layout().m as f64;
    let d = jac.d as f64;
    let mut report = match &keep {
        None => cramer_rao_from_gram(&jac.gram(), sigma_eff, b)?,
        Some(mask) => {
            if !mask.contains(&true) {
                return Err(Error::NoInformation);
            }
            let mut r = cramer_rao_from_gram(&jac.gram_masked(mask)?, sigma_eff, b)?;
            let total = jac.trace_gram();
            let p_hat = if total > 0.0 {
                1.0 - jac.mass_masked(mask) / total
            } else {
                0.0
            };
            let p = 1.0 - nominal_keep;
            r.p_hat = Some(p_hat);
            r.p = Some(p);
            r.closed_form_p = Some(sigma_eff * (d / ((1.0 - p) * m)).sqrt());
            r.closed_form_p_hat = Some(sigma_eff * (d / ((1.0 - p_hat) * m)).sqrt());
            r
        }
    };
    report.sigma = sigma;
    report.clip_factor = clip_factor;
    report.closed_form = Some(sigma_eff * (d / m).sqrt());
    report.flags.extend(flags);
    Ok(report)
}

/// Central finite-difference Jacobian of the local-aggregation output with
/// respect to the inputs. Costs `2·B·d` rollouts.
pub fn rollout_jacobian(
    params: &NetworkParams,
    batch: &DataBatch,
    eta_a: f64,
    eta_w: f64,
    steps: usize,
    h: f64,
) -> Result<InputJacobian> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (d, b) = (batch.d(), batch.b());
    let n = params.layout().len();
    let mut j = DMatrix::zeros(b * d, n);
    for i in 0..b {
        for l in 0..d {
            let mut plus = batch.clone();
            plus.x[(l, i)] += h;
            let mut minus = batch.clone();
            minus.x[(l, i)] -= h;
            let gp = local_aggregation(params, &[plus], eta_a, eta_w, steps)?.flatten();
            let gm = local_aggregation(params, &[minus], eta_a, eta_w, steps)?.flatten();
            let row = (gp - gm) / (2.0 * h);
            j.row_mut(i * d + l).copy_from(&row.transpose());
        }
    }
    Ok(InputJacobian { j, b, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defenses::{apply_clip, apply_dropout, apply_prune_ratio, PruneScope};
    use crate::net::{gradient, input_jacobian, sample_batch, sample_params, Activation, GradientLayout};
    use nalgebra::DVector;

    #[test]
    fn identity_observation() {
        let r = cramer_rao(&DMatrix::identity(4, 4), 0.3, 1).unwrap();
        assert!((r.exact_sq - 4.0 * 0.09).abs() < 1e-15);
        assert!((r.loose_sq - r.exact_sq).abs() < 1e-15);
        assert!(!r.rank_deficient);
    }

    #[test]
    fn diagonal_example() {
        let j = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]));
        let r = cramer_rao(&j, 1.0, 1).unwrap();
        assert!((r.exact_sq - 1.25).abs() < 1e-15);
        // d²/tr(JJᵀ) = 4/5
        assert!((r.loose_sq - 0.8).abs() < 1e-15);
        assert!(r.loose <= r.exact);
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let r = cramer_rao(&j, 1.0, 1).unwrap();
        assert!(r.rank_deficient);
        assert_eq!(r.rank, 1);
        assert!(r.exact_sq.is_infinite());
        assert!(r.range_sq.is_finite());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"exact\":null"));
        let back: BoundReport = serde_json::from_str(&json).unwrap();
        assert!(back.exact.is_infinite());
    }

    #[test]
    fn monotone_in_sigma() {
        let params = sample_params(4, 32, Activation::Softplus, 1).unwrap();
        let batch = sample_batch(4, 2, 2).unwrap();
        let jac = input_jacobian(&params, &batch).unwrap();
        let r: Vec<BoundReport> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&s| cramer_rao_from_gram(&jac.gram(), s, 2).unwrap())
            .collect();
        for w in r.windows(2) {
            assert!(w[1].exact > w[0].exact && w[1].loose > w[0].loose);
        }
        for x in &r {
            assert!(x.loose <= x.exact + 1e-9);
        }
    }

    fn setup(seed: u64) -> (InputJacobian, GradientObservation) {
        let params = sample_params(5, 24, Activation::Softplus, seed).unwrap();
        let batch = sample_batch(5, 2, seed + 1).unwrap();
        (input_jacobian(&params, &batch).unwrap(), gradient(&params, &batch).unwrap())
    }

    #[test]
    fn clip_without_effect_matches_base() {
        let (jac, g) = setup(3);
        let base = bound_under_defense(&jac, 0.1, 2, &g).unwrap();
        let clipped = bound_under_defense(&jac, 0.1, 2, &apply_clip(&g, 2.0 * g.norm()).unwrap()).unwrap();
        assert_eq!(base, clipped);
    }

    #[test]
    fn clip_at_half_norm_doubles_sigma() {
        let (jac, g) = setup(4);
        let c = g.norm() / 2.0;
        let clipped = bound_under_defense(&jac, 0.1, 2, &apply_clip(&g, c).unwrap()).unwrap();
        let doubled = bound_under_defense(&jac, 0.2, 2, &g).unwrap();
        assert_eq!(clipped.exact_sq, doubled.exact_sq);
        assert_eq!(clipped.loose_sq, doubled.loose_sq);
        assert_eq!(clipped.sigma_eff, 0.2);
    }

    #[test]
    fn half_mass_mask_gives_p_hat_half() {
        // Two gradient coordinates with equal column norms; drop one.
        let j = DMatrix::from_column_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]);
        let jac = InputJacobian { j, b: 1, d: 2 };
        let layout = GradientLayout { m: 1, d: 1 };
        let g = GradientObservation::from_flat(layout, &DVector::from_vec(vec![1.0, 0.1]), vec![]).unwrap();
        let pruned = apply_prune_ratio(&g, 0.5, PruneScope::Global).unwrap();
        let r = bound_under_defense(&jac, 1.0, 1, &pruned).unwrap();
        assert!((r.p_hat.unwrap() - 0.5).abs() < 1e-15);
        let ratio = r.closed_form_p_hat.unwrap() / r.closed_form.unwrap();
        assert!((ratio - 2f64.sqrt()).abs() < 1e-12);
        assert!(r.rank_deficient);
    }

    #[test]
    fn dropout_closed_form_doubles_at_three_quarters() {
        let (jac, g) = setup(5);
        let mut hit = false;
        for s in 0..50 {
            if let Ok(dropped) = apply_dropout(&g, 0.75, true, s) {
                let r = bound_under_defense(&jac, 0.1, 2, &dropped).unwrap();
                let ratio = r.closed_form_p.unwrap() / r.closed_form.unwrap();
                assert!((ratio - 2.0).abs() < 1e-12);
                hit = true;
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn masking_never_decreases_exact_bound() {
        use rand::Rng;
        let (jac, g) = setup(6);
        let base = bound_under_defense(&jac, 0.1, 2, &g).unwrap();
        let mut rng = crate::rng::rng_from(7);
        for _ in 0..20 {
            let keep: Vec<bool> = (0..jac.j.ncols()).map(|_| rng.random_bool(0.7)).collect();
            let r = cramer_rao_from_gram(&jac.gram_masked(&keep).unwrap(), 0.1, 2).unwrap();
            assert!(r.range_sq >= base.exact_sq * (1.0 - 1e-9));
        }
    }

    #[test]
    fn removing_everything_is_no_information() {
        let (jac, g) = setup(8);
        let layout = g.layout();
        let zero = GradientObservation::from_flat(layout, &DVector::zeros(layout.len()), vec![]).unwrap();
        let pruned = crate::defenses::apply_prune_threshold(&zero, 1.0).unwrap();
        assert!(matches!(bound_under_defense(&jac, 0.1, 2, &pruned), Err(Error::NoInformation)));
    }

    #[test]
    fn rollout_jacobian_single_step_matches_analytic() {
        let params = sample_params(3, 8, Activation::Softplus, 9).unwrap();
        let batch = sample_batch(3, 1, 10).unwrap();
        let fd = rollout_jacobian(&params, &batch, 0.5, 0.5, 1, 1e-5).unwrap();
        let exact = input_jacobian(&params, &batch).unwrap();
        assert!((&fd.j - &exact.j).amax() < 1e-6 * exact.j.amax());
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(cramer_rao(&DMatrix::identity(2, 2), 0.0, 1).is_err());
    }
}
