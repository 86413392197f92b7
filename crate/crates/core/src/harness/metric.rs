//! Permutation- and sign-resolved reconstruction error.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub rmse: f64,
    /// `perm[i]` is the reconstructed column assigned to true column `i`.
    pub perm: Vec<usize>,
    /// Sign applied to the assigned reconstruction.
    pub signs: Vec<f64>,
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, `O(n³)`). Returns `assign[row] = col`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // 1-based arrays; p[col] holds the row matched to col.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

fn sq_dist(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>, s: f64) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - s * y).powi(2)).sum()
}

/// `√((1/B) Σ_i ‖S_i − s_i Ŝ_{π(i)}‖²)` minimised over permutations `π` and,
/// when `sign_resolve`, over signs `s_i ∈ {±1}`.
pub fn min_perm_distance(s: &DMatrix<f64>, s_hat: &DMatrix<f64>, sign_resolve: bool) -> Result<Matching> {
    if s.shape() != s_hat.shape() {
        return Err(Error::DimensionMismatch(format!(
            "truth is {:?}, reconstruction is {:?}",
            s.shape(),
            s_hat.shape()
        )));
    }
    let b = s.ncols();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut cost = DMatrix::zeros(b, b);
    let mut sign = DMatrix::from_element(b, b, 1.0);
    for i in 0..b {
        for j in 0..b {
            let plus = sq_dist(s.column(i), s_hat.column(j), 1.0);
            if sign_resolve {
                let minus = sq_dist(s.column(i), s_hat.column(j), -1.0);
                if minus < plus {
                    cost[(i, j)] = minus;
                    sign[(i, j)] = -1.0;
                    continue;
                }
            }
            cost[(i, j)] = plus;
        }
    }
    let perm = hungarian(&cost);
    let mut total = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        total += cost[(i, j)];
    }
    Ok(Matching {
        rmse: (total / b as f64).sqrt(),
        signs: perm.iter().enumerate().map(|(i, &j)| sign[(i, j)]).collect(),
        perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(s: &DMatrix<f64>, s_hat: &DMatrix<f64>) -> f64 {
        let b = s.ncols();
        let mut idx: Vec<usize> = (0..b).collect();
        let mut best = f64::INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            for mask in 0..(1u32 << b) {
                let mut total = 0.0;
                for (i, &j) in perm.iter().enumerate() {
                    let sg = if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
                    total += sq_dist(s.column(i), s_hat.column(j), sg);
                }
                best = best.min(total);
            }
        });
        (best / b as f64).sqrt()
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn permuted_flipped_copy_is_zero() {
        let s = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.8, -0.6]);
        let mut s_hat = DMatrix::zeros(3, 3);
        s_hat.set_column(0, &(-s.column(2)));
        s_hat.set_column(1, &s.column(0));
        s_hat.set_column(2, &(-s.column(1)));
        let m = min_perm_distance(&s, &s_hat, true).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.perm, vec![1, 2, 0]);
        assert_eq!(m.signs, vec![1.0, -1.0, -1.0]);
    }

    #[test]
    fn two_sample_example() {
        let s = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let n = (1.0f64 + 0.01).sqrt();
        let s_hat = DMatrix::from_column_slice(2, 2, &[0.0, 1.0, 1.0 / n, 0.1 / n]);
        let m = min_perm_distance(&s, &s_hat, true).unwrap();
        assert_eq!(m.rmse, brute(&s, &s_hat));
        assert_eq!(m.perm, vec![1, 0]);
    }

    #[test]
    fn shape_mismatch() {
        let a = DMatrix::<f64>::zeros(2, 2);
        let b = DMatrix::<f64>::zeros(2, 3);
        assert!(min_perm_distance(&a, &b, true).is_err());
    }

    #[test]
    fn six_samples_match_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(77);
        let s = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let s_hat = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(min_perm_distance(&s, &s_hat, true).unwrap().rmse, brute(&s, &s_hat));
    }

    #[test]
    fn hungarian_on_rectangular_structure() {
        let cost = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        assert_eq!(hungarian(&cost), vec![1, 0, 2]);
    }
}
