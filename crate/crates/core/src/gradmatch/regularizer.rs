use nalgebra::DMatrix;

use super::FeatureMode;
use crate::{Error, Result};

const MIN_NORM: f64 = 1e-12;

/// Greedy one-to-one pairing of candidates with recovered directions by
/// descending squared cosine. `pair[i]` is the direction assigned to candidate `i`.
pub fn greedy_pairing(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (b, k) = (x.ncols(), z.ncols());
    let mut scores = Vec::with_capacity(b * k);
    for i in 0..b {
        let xi = x.column(i);
        let nx = xi.norm();
        for j in 0..k {
            let c = if nx < MIN_NORM { 0.0 } else { xi.dot(&z.column(j)) / nx };
            scores.push((c * c, i, j));
        }
    }
    scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pair = vec![None; b];
    let mut taken = vec![false; k];
    for (_, i, j) in scores {
        if pair[i].is_none() && !taken[j] {
            pair[i] = Some(j);
            taken[j] = true;
        }
    }
    pair
}

fn check(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "candidates have dimension {}, directions {}",
            x.nrows(),
            z.nrows()
        )));
    }
    if z.ncols() == 0 {
        return Err(Error::InvalidArgument("no recovered directions".into()));
    }
    for (j, col) in z.column_iter().enumerate() {
        if (col.norm() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!("direction {j} is not unit norm")));
        }
    }
    Ok(())
}

/// Feature-matching penalty averaged over candidates, with its gradient.
///
/// `pairing` is used by the squared-cosine mode; `None` recomputes it greedily.
/// Candidates with (near) zero norm contribute the maximal penalty 1 and no gradient.
pub fn feature_regularizer(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    mode: FeatureMode,
    pairing: Option<&[Option<usize>]>,
) -> Result<(f64, DMatrix<f64>)> {
    let b = x.ncols();
    let mut grad = DMatrix::zeros(x.nrows(), b);
    if mode == FeatureMode::Off || b == 0 {
        return Ok((0.0, grad));
    }
    check(x, z)?;
    let scale = 1.0 / b as f64;
    let mut value = 0.0;
    match mode {
        FeatureMode::Cosine2 => {
            let fresh;
            let pair = match pairing {
                Some(p) if p.len() == b => p,
                Some(_) => return Err(Error::DimensionMismatch("pairing length differs from B".into())),
                None => {
                    fresh = greedy_pairing(x, z);
                    &fresh[..]
                }
            };
            for i in 0..b {
                let Some(j) = pair[i] else { continue };
                let xi = x.column(i);
                let nx = xi.norm();
                if nx < MIN_NORM {
                    value += scale;
                    continue;
                }
                let zj = z.column(j);
                let c = xi.dot(&zj) / nx;
                value += scale * (1.0 - c * c);
                // ∂/∂x (1 − c²) = −2c (z − c·x/‖x‖)/‖x‖
                let g = (zj - xi * (c / nx)) * (-2.0 * c * scale / nx);
                grad.column_mut(i).copy_from(&g);
            }
        }
        FeatureMode::Subspace => {
            let svd = z.clone().svd(true, false);
            let u = svd.u.expect("requested U");
            let top = svd.singular_values.max();
            let keep: Vec<usize> = (0..svd.singular_values.len())
                .filter(|&k| svd.singular_values[k] > 1e-10 * top)
                .collect();
            let q = u.select_columns(keep.iter());
            for i in 0..b {
                let xi = x.column(i);
                let r = xi - &q * (q.transpose() * xi);
                value += scale * r.norm_squared();
                grad.column_mut(i).copy_from(&(r * (2.0 * scale)));
            }
        }
        FeatureMode::Off => unreachable!(),
    }
    Ok((value, grad))
}
