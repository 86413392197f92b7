//! Gaussian derivative moments of an activation via Gauss–Hermite quadrature.
//!
//! By Stein's identity `E[σ(z) He_k(z)] = E[σ⁽ᵏ⁾(z)]` for `z ~ N(0, 1)`, so the
//! moments are obtained without differentiating σ more than the model needs.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::Activation;
use crate::{Error, Result};

/// Moments whose magnitude is below this are treated as exactly zero.
pub const ZERO_THRESHOLD: f64 = 1e-8;
pub const DEFAULT_QUAD_NODES: usize = 128;

/// Probabilists' Hermite polynomial `He_k(z)`.
pub fn hermite_poly(k: usize, z: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, z);
    if k == 0 {
        return prev;
    }
    for n in 1..k {
        let next = z * cur - n as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Nodes and weights for `E[h(z)] ≈ Σ w_i h(z_i)`, `z ~ N(0, 1)`.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }
}

/// Golub–Welsch: eigen-decomposition of the Jacobi matrix of the `He_k` family.
pub fn gauss_hermite(n: usize) -> GaussHermite {
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrise so odd integrands vanish to rounding.
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let z = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-z, w);
        pairs[j] = (z, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    }
}

/// First non-vanishing Gaussian derivative moments of an activation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HermiteCoefficients {
    /// Smallest order ≥ 2 with a non-zero moment.
    pub k2: usize,
    /// Smallest order ≥ 3 with a non-zero moment.
    pub k3: usize,
    /// `|E[σ^(k2)(z)]|`.
    pub nu: f64,
    /// `|E[σ^(k3)(z)]|`.
    pub lambda: f64,
    /// `E[σ(z) He_k(z)]` for `k = 0..=k_max`.
    pub raw: Vec<f64>,
}

impl HermiteCoefficients {
    pub fn nu_signed(&self) -> f64 {
        self.raw[self.k2]
    }

    pub fn lambda_signed(&self) -> f64 {
        self.raw[self.k3]
    }
}

pub fn hermite_moments(
    activation: &Activation,
    k_max: usize,
    quad_nodes: usize,
) -> Result<HermiteCoefficients> {
    if k_max < 4 {
        return Err(Error::InvalidArgument(format!("k_max must be ≥ 4, got {k_max}")));
    }
    if quad_nodes < 64 {
        return Err(Error::InvalidArgument(format!(
            "quad_nodes must be ≥ 64, got {quad_nodes}"
        )));
    }
    let gh = gauss_hermite(quad_nodes);
    let raw: Vec<f64> = (0..=k_max)
        .map(|k| gh.expect(|z| activation.value(z) * hermite_poly(k, z)))
        .collect();
    let first_nonzero = |from: usize| (from..=k_max).find(|&k| raw[k].abs() > ZERO_THRESHOLD);
    let no_order = || Error::NoValidHermiteOrder {
        k_max,
        threshold: ZERO_THRESHOLD,
    };
    let k2 = first_nonzero(2).ok_or_else(no_order)?;
    let k3 = first_nonzero(3).ok_or_else(no_order)?;
    if k2 > 3 || k3 > 4 {
        return Err(no_order());
    }
    Ok(HermiteCoefficients {
        k2,
        k3,
        nu: raw[k2].abs(),
        lambda: raw[k3].abs(),
        raw,
    })
}
