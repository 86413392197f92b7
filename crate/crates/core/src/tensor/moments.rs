//! Hermite moment statistics of the `a`-gradient against the known weights.
//!
//! By Stein's identity, `(1/m) Σ_j g_j H_p(w_j)` concentrates around
//! `Σ_i r_i E[σ⁽ᵖ⁾] x_i^{⊗p}`, which exposes the training samples.

use nalgebra::{DMatrix, DVector};

use super::decompose::{unique_indices, SymTensor};
use crate::net::HermiteCoefficients;
use crate::{Error, Result};

fn check_shapes(g_a: &DVector<f64>, w: &DMatrix<f64>) -> Result<()> {
    if g_a.len() != w.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "g_a has {} entries, W has {} rows",
            g_a.len(),
            w.nrows()
        )));
    }
    if g_a.is_empty() {
        return Err(Error::InvalidArgument("empty gradient".into()));
    }
    Ok(())
}

fn unit_probe(probe: &DVector<f64>, d: usize) -> Result<DVector<f64>> {
    if probe.len() != d {
        return Err(Error::DimensionMismatch(format!(
            "probe has {} entries, expected {d}",
            probe.len()
        )));
    }
    let n = probe.norm();
    if !(n > 0.0) {
        return Err(Error::InvalidArgument("probe vector is zero".into()));
    }
    Ok(probe / n)
}

fn delta(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

/// Least-squares residual of `g` after regressing on the columns of `features`.
///
/// With `features` spanning Hermite polynomials of order below `p`, the
/// residual has the same `p`-th Hermite moment in expectation (orthogonality)
/// but a much smaller variance, since the low-order part of `g` dominates its
/// magnitude.
pub fn residualize(g: &DVector<f64>, features: &DMatrix<f64>) -> Result<DVector<f64>> {
    if features.nrows() != g.len() {
        return Err(Error::DimensionMismatch("features and gradient differ in length".into()));
    }
    let gram = features.tr_mul(features);
    let rhs = features.tr_mul(g);
    let coef = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::DegenerateObservation(e.into()))?,
    };
    Ok(g - features * coef)
}

/// `[1, w_j]` for every unit: Hermite polynomials of order 0 and 1.
pub fn linear_features(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, d) = w.shape();
    DMatrix::from_fn(m, d + 1, |j, k| if k == 0 { 1.0 } else { w[(j, k - 1)] })
}

/// All monomials of total degree `< order` in the projected weights `Vᵀw_j`.
pub fn projected_features(w: &DMatrix<f64>, v: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let wv = w * v;
    let b = v.ncols();
    let mut monomials: Vec<Vec<usize>> = vec![vec![]];
    for deg in 1..order {
        monomials.extend(unique_indices(deg, b));
    }
    DMatrix::from_fn(wv.nrows(), monomials.len(), |j, c| {
        monomials[c].iter().map(|&i| wv[(j, i)]).product()
    })
}

/// `P̂ = (1/m) Σ_j g_j H₂(w_j)` when `k₂ = 2`, or `(1/m) Σ_j g_j H₃(w_j)(I, I, a)`
/// when `k₂ = 3` (probe `a`, default `e₁`). Exactly symmetric.
pub fn build_moment_matrix(
    g_a: &DVector<f64>,
    w: &DMatrix<f64>,
    hermite: &HermiteCoefficients,
    probe: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    check_shapes(g_a, w)?;
    let (m, d) = w.shape();
    let mut p = DMatrix::zeros(d, d);
    let mut wj = vec![0.0; d];
    match hermite.k2 {
        2 => {
            let mut gsum = 0.0;
            for j in 0..m {
                let g = g_a[j];
                if g == 0.0 {
                    continue;
                }
                gsum += g;
                for (k, slot) in wj.iter_mut().enumerate() {
                    *slot = w[(j, k)];
                }
                for l in 0..d {
                    let gl = g * wj[l];
                    for k in 0..=l {
                        p[(k, l)] += gl * wj[k];
                    }
                }
            }
            for k in 0..d {
                p[(k, k)] -= gsum;
            }
        }
        3 => {
            let a = match probe {
                Some(a) => unit_probe(a, d)?,
                None => DVector::from_fn(d, |k, _| delta(k, 0)),
            };
            let mut ssum = 0.0;
            let mut cross = DVector::<f64>::zeros(d);
            for j in 0..m {
                let g = g_a[j];
                if g == 0.0 {
                    continue;
                }
                for (k, slot) in wj.iter_mut().enumerate() {
                    *slot = w[(j, k)];
                }
                let s: f64 = wj.iter().zip(a.iter()).map(|(x, y)| x * y).sum();
                ssum += g * s;
                for k in 0..d {
                    cross[k] += g * wj[k];
                }
                for l in 0..d {
                    let gl = g * s * wj[l];
                    for k in 0..=l {
                        p[(k, l)] += gl * wj[k];
                    }
                }
            }
            for l in 0..d {
                for k in 0..=l {
                    p[(k, l)] -= cross[k] * a[l] + cross[l] * a[k] + ssum * delta(k, l);
                }
            }
        }
        k => {
            return Err(Error::NoValidHermiteOrder {
                k_max: k,
                threshold: crate::net::ZERO_THRESHOLD,
            })
        }
    }
    let inv_m = 1.0 / m as f64;
    for l in 0..d {
        for k in 0..=l {
            let v = p[(k, l)] * inv_m;
            p[(k, l)] = v;
            p[(l, k)] = v;
        }
    }
    Ok(p)
}

/// Projected third-order statistic `T̂(V, V, V) ∈ ℝ^{B×B×B}`, computed in the
/// projected space. For `k₃ = 3` this is `(1/m) Σ g_j H₃(v_j)` with
/// `v_j = Vᵀw_j`; for `k₃ = 4` it is the fourth-order Hermite tensor
/// contracted with `probe` in its last slot.
pub fn build_projected_tensor(
    g_a: &DVector<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    hermite: &HermiteCoefficients,
    probe: &DVector<f64>,
) -> Result<SymTensor> {
    check_shapes(g_a, w)?;
    let (m, d) = w.shape();
    if v.nrows() != d {
        return Err(Error::DimensionMismatch("subspace and weights differ in d".into()));
    }
    let b = v.ncols();
    let wv = w * v;
    let idx3 = unique_indices(3, b);
    let inv_m = 1.0 / m as f64;
    match hermite.k3 {
        3 => {
            let mut m3 = vec![0.0; idx3.len()];
            let mut m1 = vec![0.0; b];
            for j in 0..m {
                let g = g_a[j];
                if g == 0.0 {
                    continue;
                }
                for (slot, ix) in m3.iter_mut().zip(&idx3) {
                    *slot += g * wv[(j, ix[0])] * wv[(j, ix[1])] * wv[(j, ix[2])];
                }
                for (i, slot) in m1.iter_mut().enumerate() {
                    *slot += g * wv[(j, i)];
                }
            }
            let lookup = |ix: &[usize]| idx3.iter().position(|u| u == ix).expect("sorted index");
            Ok(SymTensor::from_unique(3, b, |ix| {
                let (i, j, k) = (ix[0], ix[1], ix[2]);
                inv_m
                    * (m3[lookup(ix)]
                        - (m1[i] * delta(j, k) + m1[j] * delta(i, k) + m1[k] * delta(i, j)))
            }))
        }
        4 => {
            let a = unit_probe(probe, d)?;
            let at = v.tr_mul(&a);
            let norm = at.norm();
            if norm < 1e-6 {
                return Err(Error::ProbeOrthogonal(norm));
            }
            let s = w * &a;
            let idx2 = unique_indices(2, b);
            let mut a3 = vec![0.0; idx3.len()];
            let mut b2 = DMatrix::<f64>::zeros(b, b);
            let mut c1 = vec![0.0; b];
            let mut d0 = 0.0;
            for j in 0..m {
                let g = g_a[j];
                if g == 0.0 {
                    continue;
                }
                let gs = g * s[j];
                for (slot, ix) in a3.iter_mut().zip(&idx3) {
                    *slot += gs * wv[(j, ix[0])] * wv[(j, ix[1])] * wv[(j, ix[2])];
                }
                for ix in &idx2 {
                    b2[(ix[0], ix[1])] += g * wv[(j, ix[0])] * wv[(j, ix[1])];
                }
                for (i, slot) in c1.iter_mut().enumerate() {
                    *slot += gs * wv[(j, i)];
                }
                d0 += g;
            }
            for ix in &idx2 {
                b2[(ix[1], ix[0])] = b2[(ix[0], ix[1])];
            }
            let lookup = |ix: &[usize]| idx3.iter().position(|u| u == ix).expect("sorted index");
            Ok(SymTensor::from_unique(3, b, |ix| {
                let (i, j, k) = (ix[0], ix[1], ix[2]);
                let pairs = b2[(i, j)] * at[k] + b2[(i, k)] * at[j] + b2[(j, k)] * at[i];
                let singles = c1[i] * delta(j, k) + c1[j] * delta(i, k) + c1[k] * delta(i, j);
                let consts = delta(i, j) * at[k] + delta(i, k) * at[j] + delta(j, k) * at[i];
                inv_m * (a3[lookup(ix)] - pairs - singles + d0 * consts)
            }))
        }
        k => Err(Error::NoValidHermiteOrder {
            k_max: k,
            threshold: crate::net::ZERO_THRESHOLD,
        }),
    }
}

/// Projected fourth-order statistic `(1/m) Σ g_j H₄(w_j)(V, V, V, V)`, with no
/// probe contraction.
pub fn build_projected_tensor4(g_a: &DVector<f64>, w: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<SymTensor> {
    check_shapes(g_a, w)?;
    let m = w.nrows();
    if v.nrows() != w.ncols() {
        return Err(Error::DimensionMismatch("subspace and weights differ in d".into()));
    }
    let b = v.ncols();
    let wv = w * v;
    let idx4 = unique_indices(4, b);
    let mut m4 = vec![0.0; idx4.len()];
    let mut m2 = DMatrix::<f64>::zeros(b, b);
    let mut m0 = 0.0;
    for j in 0..m {
        let g = g_a[j];
        if g == 0.0 {
            continue;
        }
        for (slot, ix) in m4.iter_mut().zip(&idx4) {
            *slot += g * wv[(j, ix[0])] * wv[(j, ix[1])] * wv[(j, ix[2])] * wv[(j, ix[3])];
        }
        for p in 0..b {
            for q in p..b {
                m2[(p, q)] += g * wv[(j, p)] * wv[(j, q)];
            }
        }
        m0 += g;
    }
    for p in 0..b {
        for q in 0..p {
            m2[(p, q)] = m2[(q, p)];
        }
    }
    let inv_m = 1.0 / m as f64;
    let lookup = |ix: &[usize]| idx4.iter().position(|u| u == ix).expect("sorted index");
    Ok(SymTensor::from_unique(4, b, |ix| {
        let (i, j, k, l) = (ix[0], ix[1], ix[2], ix[3]);
        let pairs = m2[(i, j)] * delta(k, l)
            + m2[(i, k)] * delta(j, l)
            + m2[(i, l)] * delta(j, k)
            + m2[(j, k)] * delta(i, l)
            + m2[(j, l)] * delta(i, k)
            + m2[(k, l)] * delta(i, j);
        let consts = delta(i, j) * delta(k, l) + delta(i, k) * delta(j, l) + delta(i, l) * delta(j, k);
        inv_m * (m4[lookup(ix)] - pairs + m0 * consts)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{hermite_moments, Activation, DEFAULT_QUAD_NODES};

    fn coeffs(act: Activation) -> HermiteCoefficients {
        hermite_moments(&act, 4, DEFAULT_QUAD_NODES).unwrap()
    }

    /// Direct `d`-dimensional Hermite tensors, used as an oracle for the projected builders.
    fn h3(w: &[f64], i: usize, j: usize, k: usize) -> f64 {
        w[i] * w[j] * w[k] - (w[i] * delta(j, k) + w[j] * delta(i, k) + w[k] * delta(i, j))
    }

    fn h4(w: &[f64], i: usize, j: usize, k: usize, l: usize) -> f64 {
        w[i] * w[j] * w[k] * w[l]
            - (w[i] * w[j] * delta(k, l)
                + w[i] * w[k] * delta(j, l)
                + w[i] * w[l] * delta(j, k)
                + w[j] * w[k] * delta(i, l)
                + w[j] * w[l] * delta(i, k)
                + w[k] * w[l] * delta(i, j))
            + delta(i, j) * delta(k, l)
            + delta(i, k) * delta(j, l)
            + delta(i, l) * delta(j, k)
    }

    fn random_setup(m: usize, d: usize, b: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        use rand::Rng;
        let mut rng = crate::rng::rng_from(seed);
        let g = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let w = DMatrix::from_fn(m, d, |_, _| rng.random_range(-2.0..2.0));
        let v = DMatrix::from_fn(d, b, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        (g, w, v)
    }

    #[test]
    fn zero_gradient_gives_zero_statistics() {
        let (_, w, v) = random_setup(10, 4, 2, 1);
        let g = DVector::zeros(10);
        let h = coeffs(Activation::Softplus);
        assert_eq!(build_moment_matrix(&g, &w, &h, None).unwrap().amax(), 0.0);
        let probe = v.column(0).into_owned();
        assert_eq!(build_projected_tensor(&g, &w, &v, &h, &probe).unwrap().norm(), 0.0);
    }

    #[test]
    fn single_neuron_matrix() {
        let g = DVector::from_vec(vec![1.0]);
        let w = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let p = build_moment_matrix(&g, &w, &coeffs(Activation::Softplus), None).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, -1.0, -1.0]));
        assert_eq!(p, want);
    }

    #[test]
    fn third_order_matrix_matches_direct_contraction() {
        let (g, w, _) = random_setup(30, 4, 2, 2);
        let a = DVector::from_vec(vec![0.3, -0.5, 0.1, 0.8]);
        let au = a.normalize();
        let p = build_moment_matrix(&g, &w, &coeffs(Activation::Tanh), Some(&a)).unwrap();
        for k in 0..4 {
            for l in 0..4 {
                let mut want = 0.0;
                for j in 0..30 {
                    let wj: Vec<f64> = w.row(j).iter().copied().collect();
                    want += g[j] * (0..4).map(|q| h3(&wj, k, l, q) * au[q]).sum::<f64>();
                }
                assert!((p[(k, l)] - want / 30.0).abs() < 1e-12);
            }
        }
        assert_eq!(p, p.transpose());
    }

    #[test]
    fn projected_third_order_matches_full_tensor() {
        let (g, w, v) = random_setup(25, 5, 3, 3);
        let t = build_projected_tensor(&g, &w, &v, &coeffs(Activation::Exp), &v.column(0).into_owned())
            .unwrap();
        assert!(t.max_asymmetry() < 1e-10);
        for p in 0..3 {
            for q in 0..3 {
                for r in 0..3 {
                    let mut want = 0.0;
                    for j in 0..25 {
                        let wj: Vec<f64> = w.row(j).iter().copied().collect();
                        for i in 0..5 {
                            for k in 0..5 {
                                for l in 0..5 {
                                    want += g[j] * h3(&wj, i, k, l) * v[(i, p)] * v[(k, q)] * v[(l, r)];
                                }
                            }
                        }
                    }
                    assert!((t.get(&[p, q, r]) - want / 25.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn projected_fourth_order_with_probe_matches_full_tensor() {
        let (g, w, v) = random_setup(20, 4, 2, 4);
        let a = DVector::from_vec(vec![0.2, 0.4, -0.1, 0.9]).normalize();
        let t = build_projected_tensor(&g, &w, &v, &coeffs(Activation::Softplus), &a).unwrap();
        assert!(t.max_asymmetry() < 1e-10);
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    let mut want = 0.0;
                    for j in 0..20 {
                        let wj: Vec<f64> = w.row(j).iter().copied().collect();
                        for i in 0..4 {
                            for k in 0..4 {
                                for l in 0..4 {
                                    for o in 0..4 {
                                        want += g[j]
                                            * h4(&wj, i, k, l, o)
                                            * v[(i, p)]
                                            * v[(k, q)]
                                            * v[(l, r)]
                                            * a[o];
                                    }
                                }
                            }
                        }
                    }
                    assert!((t.get(&[p, q, r]) - want / 20.0).abs() < 1e-10, "{p}{q}{r}");
                }
            }
        }
    }

    #[test]
    fn projected_fourth_order_full_matches_direct() {
        let (g, w, v) = random_setup(15, 3, 2, 5);
        let t = build_projected_tensor4(&g, &w, &v).unwrap();
        assert!(t.max_asymmetry() < 1e-10);
        let mut want = 0.0;
        for j in 0..15 {
            let wj: Vec<f64> = w.row(j).iter().copied().collect();
            for i in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        for o in 0..3 {
                            want += g[j] * h4(&wj, i, k, l, o) * v[(i, 0)] * v[(k, 1)] * v[(l, 1)] * v[(o, 0)];
                        }
                    }
                }
            }
        }
        assert!((t.get(&[0, 1, 1, 0]) - want / 15.0).abs() < 1e-10);
    }

    #[test]
    fn orthogonal_probe_is_rejected() {
        let (g, w, _) = random_setup(10, 3, 1, 6);
        let v = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let a = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            build_projected_tensor(&g, &w, &v, &coeffs(Activation::Softplus), &a),
            Err(Error::ProbeOrthogonal(_))
        ));
    }
}
