//! Symmetric tensors of order 3 and 4 in low dimension and their rank-`B`
//! decomposition by power iteration with deflation.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{mix, rng_from};
use crate::{Error, Result};

/// Dense symmetric tensor, stored row-major over all `dim^order` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymTensor {
    pub order: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

/// Sorted index tuples `i₁ ≤ … ≤ i_p`, one per orbit of the symmetric group.
pub(crate) fn unique_indices(order: usize, dim: usize) -> Vec<Vec<usize>> {
    fn rec(order: usize, dim: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for i in start..dim {
            cur.push(i);
            rec(order, dim, i, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(order, dim, 0, &mut Vec::new(), &mut out);
    out
}

fn permutations(ix: &[usize]) -> Vec<Vec<usize>> {
    if ix.len() <= 1 {
        return vec![ix.to_vec()];
    }
    let mut out = Vec::new();
    for k in 0..ix.len() {
        let mut rest = ix.to_vec();
        let head = rest.remove(k);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

impl SymTensor {
    pub fn zeros(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            data: vec![0.0; dim.pow(order as u32)],
        }
    }

    /// Builds a tensor from its values on sorted index tuples; every
    /// permutation receives the same value, so the result is exactly symmetric.
    pub fn from_unique(order: usize, dim: usize, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(order, dim);
        for ix in unique_indices(order, dim) {
            let v = f(&ix);
            for p in permutations(&ix) {
                let k = t.offset(&p);
                t.data[k] = v;
            }
        }
        t
    }

    fn offset(&self, ix: &[usize]) -> usize {
        ix.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    fn multi_index(&self, mut k: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = k % self.dim;
            k /= self.dim;
        }
    }

    pub fn get(&self, ix: &[usize]) -> f64 {
        self.data[self.offset(ix)]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest deviation between an entry and any of its index permutations.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for ix in unique_indices(self.order, self.dim) {
            let base = self.get(&ix);
            for p in permutations(&ix) {
                worst = worst.max((self.get(&p) - base).abs());
            }
        }
        worst
    }

    /// `T(I, u, …, u)`.
    pub fn contract(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        let mut ix = vec![0; self.order];
        for (k, &v) in self.data.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            self.multi_index(k, &mut ix);
            let mut prod = v;
            for &i in &ix[1..] {
                prod *= u[i];
            }
            out[ix[0]] += prod;
        }
        out
    }

    /// `T(u, …, u)`.
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        self.contract(u).dot(u)
    }

    /// `T += c · u^{⊗p}`.
    pub fn add_rank1(&mut self, c: f64, u: &DVector<f64>) {
        let mut ix = vec![0; self.order];
        for k in 0..self.data.len() {
            self.multi_index(k, &mut ix);
            self.data[k] += c * ix.iter().map(|&i| u[i]).product::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Random initialisations per component.
    pub restarts: usize,
    /// Power iterations per run.
    pub iters: usize,
    /// Stop when `1 − |⟨u_new, u⟩|` falls below this.
    pub tol: f64,
    /// Gauss–Seidel passes re-fitting each component against the others.
    pub refine_sweeps: usize,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            iters: 100,
            tol: 1e-10,
            refine_sweeps: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub weights: Vec<f64>,
    pub components: Vec<DVector<f64>>,
    /// False when some power-iteration run hit `iters`.
    pub converged: bool,
}

fn power_iterate(t: &SymTensor, mut u: DVector<f64>, iters: usize, tol: f64) -> (DVector<f64>, bool) {
    for _ in 0..iters {
        let next = t.contract(&u);
        let n = next.norm();
        if n == 0.0 || !n.is_finite() {
            return (u, false);
        }
        let next = next / n;
        let change = 1.0 - next.dot(&u).abs();
        u = next;
        if change < tol {
            return (u, true);
        }
    }
    (u, false)
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Rank-`b` decomposition `T ≈ Σ_i λ_i u_i^{⊗p}`.
pub fn decompose_tensor(t: &SymTensor, b: usize, cfg: &DecomposeConfig, seed: u64) -> Result<Decomposition> {
    if b == 0 || b > t.dim {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {b} components from a tensor of dimension {}",
            t.dim
        )));
    }
    if cfg.restarts == 0 || cfg.iters == 0 {
        return Err(Error::InvalidArgument("restarts and iters must be ≥ 1".into()));
    }
    let mut residual = t.clone();
    let mut weights = Vec::with_capacity(b);
    let mut components = Vec::with_capacity(b);
    let mut converged = true;
    for c in 0..b {
        let mut rng = rng_from(mix(seed, c as u64));
        let mut best: Option<(f64, DVector<f64>, bool)> = None;
        for _ in 0..cfg.restarts {
            let (u, ok) = power_iterate(&residual, random_unit(&mut rng, t.dim), cfg.iters, cfg.tol);
            let lam = residual.eval(&u);
            if best.as_ref().is_none_or(|(bl, _, _)| lam.abs() > bl.abs()) {
                best = Some((lam, u, ok));
            }
        }
        let (lam, u, ok) = best.expect("at least one restart");
        converged &= ok;
        residual.add_rank1(-lam, &u);
        weights.push(lam);
        components.push(u);
    }
    for _ in 0..cfg.refine_sweeps {
        for i in 0..b {
            let mut others = t.clone();
            for k in (0..b).filter(|&k| k != i) {
                others.add_rank1(-weights[k], &components[k]);
            }
            let (u, ok) = power_iterate(&others, components[i].clone(), cfg.iters, cfg.tol);
            converged &= ok;
            weights[i] = others.eval(&u);
            components[i] = u;
        }
    }
    Ok(Decomposition {
        weights,
        components,
        converged,
    })
}
