use nalgebra::{DMatrix, DVector};

use super::{Distance, GradMatchConfig};
use crate::net::{gradient, input_vjp, DataBatch, GradientObservation, NetworkParams};
use crate::{Error, Result};

/// Weights of the `a` and `W` groups.
///
/// Without reweighting both are 1. With reweighting each group gets its count
/// of nonzero target entries, normalised so the weights sum to one.
pub fn group_weights(target: &GradientObservation, reweight: bool) -> [f64; 2] {
    if !reweight {
        return [1.0, 1.0];
    }
    let na = target.g_a.iter().filter(|v| **v != 0.0).count() as f64;
    let nw = target.g_w.iter().filter(|v| **v != 0.0).count() as f64;
    let total = na + nw;
    if total == 0.0 {
        [0.5, 0.5]
    } else {
        [na / total, nw / total]
    }
}

/// Batch built from candidate columns without the unit-norm check.
pub(crate) fn candidate_batch(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DataBatch> {
    if x.ncols() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} candidates but {} labels",
            x.ncols(),
            y.len()
        )));
    }
    Ok(DataBatch {
        x: x.clone(),
        y: y.clone(),
    })
}

/// Gradient-matching distance and its gradient with respect to the candidates.
pub fn grad_match_loss(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    params: &NetworkParams,
    target: &GradientObservation,
    cfg: &GradMatchConfig,
) -> Result<(f64, DMatrix<f64>)> {
    if target.layout() != params.layout() {
        return Err(Error::LayoutMismatch("target does not match the network".into()));
    }
    let batch = candidate_batch(x, y)?;
    let g = gradient(params, &batch)?.flatten();
    let t = target.flatten();
    let m = params.m();
    let w = group_weights(target, cfg.group_reweighting);
    let mut cot = DVector::zeros(g.len());
    let mut value = 0.0;
    let groups = [(0, m), (m, g.len() - m)];
    for (gi, &(start, len)) in groups.iter().enumerate() {
        let gs = g.rows(start, len);
        let ts = t.rows(start, len);
        match cfg.distance {
            Distance::SquaredL2 => {
                let diff = gs - ts;
                value += w[gi] * diff.norm_squared();
                cot.rows_mut(start, len).copy_from(&(diff * (2.0 * w[gi])));
            }
            Distance::NegativeCosine => {
                let (ng, nt) = (gs.norm(), ts.norm());
                if nt == 0.0 {
                    continue;
                }
                if ng == 0.0 {
                    value += w[gi];
                    continue;
                }
                let c = gs.dot(&ts) / (ng * nt);
                value += w[gi] * (1.0 - c);
                // d(−cos)/dG = −(T/(‖G‖‖T‖) − cos·G/‖G‖²)
                let d = (ts / (ng * nt) - gs * (c / (ng * ng))) * (-w[gi]);
                cot.rows_mut(start, len).copy_from(&d);
            }
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let grad = input_vjp(params, &batch, &cot)?;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{sample_batch, sample_params, Activation};

    fn setup() -> (NetworkParams, DataBatch, GradientObservation) {
        let params = sample_params(5, 16, Activation::Softplus, 1).unwrap();
        let batch = sample_batch(5, 2, 2).unwrap();
        let g = gradient(&params, &batch).unwrap();
        (params, batch, g)
    }

    #[test]
    fn zero_at_truth() {
        let (params, batch, g) = setup();
        let (v, grad) = grad_match_loss(&batch.x, &batch.y, &params, &g, &GradMatchConfig::default()).unwrap();
        assert_eq!(v, 0.0);
        assert!(grad.norm() < 1e-10);
    }

    fn fd_check(cfg: &GradMatchConfig) {
        let (params, batch, g) = setup();
        let x0 = sample_batch(5, 2, 3).unwrap().x;
        let (_, grad) = grad_match_loss(&x0, &batch.y, &params, &g, cfg).unwrap();
        let h = 1e-6;
        let mut fd = DMatrix::zeros(5, 2);
        for idx in 0..10 {
            let mut p = x0.clone();
            p[idx] += h;
            let mut q = x0.clone();
            q[idx] -= h;
            let lp = grad_match_loss(&p, &batch.y, &params, &g, cfg).unwrap().0;
            let lq = grad_match_loss(&q, &batch.y, &params, &g, cfg).unwrap().0;
            fd[idx] = (lp - lq) / (2.0 * h);
        }
        let rel = (&fd - &grad).norm() / grad.norm();
        assert!(rel < 1e-5, "{cfg:?}: {rel}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for distance in [Distance::SquaredL2, Distance::NegativeCosine] {
            for group_reweighting in [false, true] {
                fd_check(&GradMatchConfig {
                    distance,
                    group_reweighting,
                    ..Default::default()
                });
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let (params, batch, g) = setup();
        let cfg = GradMatchConfig {
            distance: Distance::NegativeCosine,
            ..Default::default()
        };
        let x0 = sample_batch(5, 2, 4).unwrap().x;
        let base = grad_match_loss(&x0, &batch.y, &params, &g, &cfg).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let mut t = g.clone();
            t.scale(c);
            let (v, grad) = grad_match_loss(&x0, &batch.y, &params, &t, &cfg).unwrap();
            assert_eq!(v, base.0);
            assert_eq!(grad, base.1);
        }
        let mut t = g.clone();
        t.scale(3.7);
        let v = grad_match_loss(&x0, &batch.y, &params, &t, &cfg).unwrap().0;
        assert!((v - base.0).abs() < 1e-14);
    }

    #[test]
    fn reweighting_uses_nonzero_counts() {
        let (_, _, mut g) = setup();
        assert_eq!(group_weights(&g, false), [1.0, 1.0]);
        g.g_a[0] = 0.0;
        let w = group_weights(&g, true);
        assert!((w[0] - 15.0 / 95.0).abs() < 1e-15);
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let (params, batch, g) = setup();
        let y = DVector::from_element(3, 1.0);
        assert!(grad_match_loss(&batch.x, &y, &params, &g, &GradMatchConfig::default()).is_err());
    }
}
