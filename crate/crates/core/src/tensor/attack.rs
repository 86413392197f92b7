use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    build_moment_matrix, build_projected_tensor, build_projected_tensor4, decompose_tensor, estimate_subspace,
    linear_features, projected_features, residualize, DecomposeConfig, Subspace, SymTensor,
};
use crate::net::{hermite_moments, GradientObservation, HermiteCoefficients, NetworkParams, DEFAULT_QUAD_NODES};
use crate::rng::mix;
use crate::{Error, ReconstructionResult, Result};

/// Unit vector contracted into the last slot of the higher-order Hermite tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeChoice {
    /// `e₁` projected into the estimated span, falling back to `e₂, …` when
    /// `e_k` is nearly orthogonal to it.
    #[default]
    Canonical,
    /// The leading Ritz vector of the moment matrix.
    TopRitz,
    /// A fixed vector, used as given.
    Custom { a: Vec<f64> },
}

/// How the fourth-order statistic is formed when `k₃ = 4`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourthOrder {
    /// Contract with the probe and decompose the resulting third-order tensor.
    Probe,
    /// Decompose the projected fourth-order tensor directly.
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TensorAttackConfig {
    pub subspace_iters: usize,
    #[serde(flatten)]
    pub decompose: DecomposeConfig,
    pub probe: ProbeChoice,
    pub fourth_order: FourthOrder,
    pub quad_nodes: usize,
    /// Regress the low-order Hermite part out of `g` before each statistic.
    pub control_variates: bool,
    pub seed: u64,
}

impl Default for TensorAttackConfig {
    fn default() -> Self {
        Self {
            subspace_iters: 200,
            decompose: DecomposeConfig::default(),
            probe: ProbeChoice::default(),
            fourth_order: FourthOrder::default(),
            quad_nodes: DEFAULT_QUAD_NODES,
            control_variates: true,
            seed: 0,
        }
    }
}

/// Sufficient statistics computed by the attack.
#[derive(Clone, Debug)]
pub struct MomentEstimates {
    pub hermite: HermiteCoefficients,
    pub p_hat: DMatrix<f64>,
    pub subspace: Subspace,
    /// Order 3, or order 4 under [`FourthOrder::Full`].
    pub t_proj: SymTensor,
    pub probe: Option<DVector<f64>>,
}

fn choose_probe(choice: &ProbeChoice, sub: &Subspace) -> Result<DVector<f64>> {
    let v = &sub.v;
    let (d, b) = v.shape();
    match choice {
        ProbeChoice::Canonical => {
            // Expected ‖Vᵀe_k‖ for a random span is √(B/d).
            let floor = 0.1 * (b as f64 / d as f64).sqrt();
            for k in 0..d {
                let proj = v.row(k).transpose();
                let n = proj.norm();
                if n >= floor {
                    return Ok(v * proj / n);
                }
            }
            Err(Error::ProbeOrthogonal(v.row(0).norm()))
        }
        ProbeChoice::TopRitz => Ok(v.column(0).into_owned()),
        ProbeChoice::Custom { a } => {
            if a.len() != d {
                return Err(Error::DimensionMismatch(format!("probe has {} entries, d = {d}", a.len())));
            }
            Ok(DVector::from_column_slice(a))
        }
    }
}

fn check_inputs(obs: &GradientObservation, params: &NetworkParams, b: usize) -> Result<()> {
    if obs.layout() != params.layout() {
        return Err(Error::LayoutMismatch(format!(
            "observation {:?} vs network {:?}",
            obs.layout(),
            params.layout()
        )));
    }
    if b == 0 || b > params.d() {
        return Err(Error::InvalidArgument(format!(
            "batch size {b} must lie in 1..={}",
            params.d()
        )));
    }
    Ok(())
}

/// Runs the statistics stages of the attack.
pub fn moment_estimates(
    obs: &GradientObservation,
    params: &NetworkParams,
    b: usize,
    cfg: &TensorAttackConfig,
) -> Result<MomentEstimates> {
    check_inputs(obs, params, b)?;
    let hermite = hermite_moments(&params.activation, 4, cfg.quad_nodes).map_err(Error::stage("hermite"))?;
    let norm = obs.g_a.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateObservation(format!("‖g_a‖ = {norm}")));
    }
    // Exact zeros are defense artefacts (dropout, pruning), not measurements:
    // keep only the units that carry an observed value.
    let active: Vec<usize> = (0..obs.g_a.len()).filter(|&j| obs.g_a[j] != 0.0).collect();
    let (g, w_active);
    let w = if active.len() == obs.g_a.len() {
        g = obs.g_a.clone();
        &params.w
    } else {
        g = DVector::from_iterator(active.len(), active.iter().map(|&j| obs.g_a[j]));
        w_active = params.w.select_rows(active.iter());
        &w_active
    };
    // Only directions matter downstream; normalising makes the attack exactly
    // invariant to a global rescaling of the gradient.
    let g = g / norm;
    let g2 = if cfg.control_variates && hermite.k2 == 2 {
        residualize(&g, &linear_features(w)).map_err(Error::stage("moment matrix"))?
    } else {
        g.clone()
    };
    let p_hat = build_moment_matrix(&g2, w, &hermite, None).map_err(Error::stage("moment matrix"))?;
    let subspace =
        estimate_subspace(&p_hat, b, cfg.subspace_iters, mix(cfg.seed, 1)).map_err(Error::stage("subspace"))?;
    let order = hermite.k3;
    let g = if cfg.control_variates {
        residualize(&g, &projected_features(w, &subspace.v, order)).map_err(Error::stage("projected tensor"))?
    } else {
        g
    };
    let (t_proj, probe) = if hermite.k3 == 4 && cfg.fourth_order == FourthOrder::Full {
        let t = build_projected_tensor4(&g, w, &subspace.v).map_err(Error::stage("projected tensor"))?;
        (t, None)
    } else {
        let probe = choose_probe(&cfg.probe, &subspace).map_err(Error::stage("probe"))?;
        let t = build_projected_tensor(&g, w, &subspace.v, &hermite, &probe)
            .map_err(Error::stage("projected tensor"))?;
        (t, Some(probe))
    };
    Ok(MomentEstimates {
        hermite,
        p_hat,
        subspace,
        t_proj,
        probe,
    })
}

/// End-to-end moment-tensor attack. Signs of the recovered samples are left
/// unresolved.
pub fn tensor_attack(
    obs: &GradientObservation,
    params: &NetworkParams,
    b: usize,
    cfg: &TensorAttackConfig,
) -> Result<ReconstructionResult> {
    let est = moment_estimates(obs, params, b, cfg)?;
    let dec = decompose_tensor(&est.t_proj, b, &cfg.decompose, mix(cfg.seed, 2))
        .map_err(Error::stage("decomposition"))?;
    // Canonical output: components by decreasing |λ|, each column's
    // largest-magnitude entry positive.
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| dec.weights[j].abs().total_cmp(&dec.weights[i].abs()));
    let d = params.d();
    let mut x_hat = DMatrix::zeros(d, b);
    let mut weights = Vec::with_capacity(b);
    for (c, &i) in order.iter().enumerate() {
        let mut x = &est.subspace.v * &dec.components[i];
        x /= x.norm();
        let lead = x.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let mut lam = dec.weights[i];
        if lead < 0.0 {
            x.neg_mut();
            if est.t_proj.order % 2 == 1 {
                lam = -lam;
            }
        }
        x_hat.set_column(c, &x);
        weights.push(lam);
    }
    let mut out = ReconstructionResult::new("tensor", x_hat);
    out.weights = weights;
    out.converged = dec.converged;
    if let Some(w) = est.subspace.warning {
        out.warnings.push(w);
    }
    if !dec.converged {
        out.warnings.push("tensor power iteration hit its iteration cap".into());
    }
    if !params.activation.is_lipschitz() {
        out.warnings.push(format!(
            "activation `{}` is not 1-Lipschitz; recovery guarantees do not apply",
            params.activation.name()
        ));
    }
    Ok(out)
}
