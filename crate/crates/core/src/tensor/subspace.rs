use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::rng_from;
use crate::{Error, Result};

/// Gaps between the `B`-th and `(B+1)`-th eigenvalue magnitudes below this
/// raise a warning.
pub const SPECTRAL_GAP_WARN: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Subspace {
    /// `d × B` with orthonormal columns, ordered by decreasing `|ritz|`.
    #[serde(with = "crate::serde_mat::columns")]
    pub v: DMatrix<f64>,
    /// Rayleigh–Ritz values `vᵢᵀ P̂ vᵢ`.
    pub ritz: Vec<f64>,
    /// Eigenvalues of `P̂` sorted by decreasing magnitude.
    pub spectrum: Vec<f64>,
    /// `|λ_B| − |λ_{B+1}|`; infinite when `B = d`.
    pub gap: f64,
    pub warning: Option<String>,
}

fn orthonormalize(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

/// Fixes the sign of each column so that its largest-magnitude entry is positive.
fn canonical_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut k = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[k].abs() {
                k = i;
            }
        }
        if col[k] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Top-`b` invariant subspace of a symmetric, possibly indefinite matrix by
/// orthogonal iteration on `P̂²`, followed by a Rayleigh–Ritz rotation.
pub fn estimate_subspace(p_hat: &DMatrix<f64>, b: usize, iters: usize, seed: u64) -> Result<Subspace> {
    let d = p_hat.nrows();
    if p_hat.ncols() != d {
        return Err(Error::DimensionMismatch("moment matrix must be square".into()));
    }
    if b == 0 || b > d {
        return Err(Error::InvalidArgument(format!("subspace rank {b} outside 1..={d}")));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("iters must be ≥ 1".into()));
    }
    let mut rng = rng_from(seed);
    let start = DMatrix::from_fn(d, b, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut v = orthonormalize(start);
    for _ in 0..iters {
        let y = p_hat * (p_hat * &v);
        if y.norm() < 1e-300 || !y.iter().all(|x| x.is_finite()) {
            break;
        }
        v = orthonormalize(y);
    }

    let h = v.transpose() * p_hat * &v;
    let h = (&h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].abs().total_cmp(&eig.eigenvalues[i].abs()));
    let rot = DMatrix::from_fn(b, b, |r, c| eig.eigenvectors[(r, order[c])]);
    let mut v = orthonormalize(&v * rot);
    // QR may flip column signs; re-derive them canonically.
    canonical_signs(&mut v);
    let ritz: Vec<f64> = (0..b)
        .map(|i| (v.column(i).transpose() * p_hat * v.column(i))[(0, 0)])
        .collect();

    let full = SymmetricEigen::new((p_hat + p_hat.transpose()) * 0.5);
    let mut spectrum: Vec<f64> = full.eigenvalues.iter().copied().collect();
    spectrum.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
    let gap = if b < d {
        spectrum[b - 1].abs() - spectrum[b].abs()
    } else {
        f64::INFINITY
    };
    let warning = (gap < SPECTRAL_GAP_WARN).then(|| {
        format!("ill-conditioned subspace: spectral gap {gap:e} between eigenvalues {b} and {}", b + 1)
    });
    Ok(Subspace {
        v,
        ritz,
        spectrum,
        gap,
        warning,
    })
}
