//! Derivatives of the parameter gradient with respect to the training inputs.

use nalgebra::{DMatrix, DVector};

use super::{DataBatch, NetworkParams};
use crate::{Error, Result};

/// Dense input-Jacobian of the flattened gradient.
///
/// Row `i·d + l` is the derivative with respect to coordinate `l` of sample
/// `i`; column `c` is flattened gradient coordinate `c`. The batched matrix is
/// the row-wise concatenation of per-sample blocks.
#[derive(Clone, Debug)]
pub struct InputJacobian {
    pub j: DMatrix<f64>,
    pub b: usize,
    pub d: usize,
}

impl InputJacobian {
    /// `J Jᵀ`, a `(Bd) × (Bd)` Gram matrix.
    pub fn gram(&self) -> DMatrix<f64> {
        &self.j * self.j.transpose()
    }

    /// Gram matrix restricted to the gradient coordinates where `keep` is true.
    pub fn gram_masked(&self, keep: &[bool]) -> Result<DMatrix<f64>> {
        if keep.len() != self.j.ncols() {
            return Err(Error::LayoutMismatch(format!(
                "mask has {} entries, Jacobian has {} gradient coordinates",
                keep.len(),
                self.j.ncols()
            )));
        }
        let kept: Vec<usize> = (0..keep.len()).filter(|&c| keep[c]).collect();
        let sub = self.j.select_columns(kept.iter());
        Ok(&sub * sub.transpose())
    }

    /// `‖J_S‖_F²` over the kept gradient coordinates.
    pub fn mass_masked(&self, keep: &[bool]) -> f64 {
        self.j
            .column_iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c.norm_squared())
            .sum()
    }

    /// `tr(J Jᵀ) = ‖J‖_F²`.
    pub fn trace_gram(&self) -> f64 {
        self.j.norm_squared()
    }
}

/// Per-sample quantities shared by the Jacobian and its transpose product.
struct SampleTerms {
    s: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    r: f64,
    /// `∇_x f = Σ_j a_j σ'(w_jᵀx) w_j`.
    h: DVector<f64>,
}

fn sample_terms(params: &NetworkParams, x: &[f64], y: f64) -> SampleTerms {
    let m = params.m();
    let u = params.preactivations(x);
    let act = &params.activation;
    let mut s = Vec::with_capacity(m);
    let mut s1 = Vec::with_capacity(m);
    let mut s2 = Vec::with_capacity(m);
    let mut f = 0.0;
    let mut as1 = DVector::zeros(m);
    for j in 0..m {
        let v = act.value(u[j]);
        f += params.a[j] * v;
        s.push(v);
        s1.push(act.first(u[j]));
        s2.push(act.second(u[j]).unwrap_or(f64::NAN));
        as1[j] = params.a[j] * s1[j];
    }
    SampleTerms {
        s,
        s1,
        s2,
        r: 2.0 * (f - y),
        h: params.w.tr_mul(&as1),
    }
}

fn check(params: &NetworkParams, batch: &DataBatch) -> Result<()> {
    if !params.activation.has_second() {
        return Err(Error::UnsupportedActivation(params.activation.name().into()));
    }
    if batch.d() != params.d() || batch.y.len() != batch.b() {
        return Err(Error::DimensionMismatch(format!(
            "batch d={} B={} labels={}, network d={}",
            batch.d(),
            batch.b(),
            batch.y.len(),
            params.d()
        )));
    }
    Ok(())
}

pub fn input_jacobian(params: &NetworkParams, batch: &DataBatch) -> Result<InputJacobian> {
    check(params, batch)?;
    let (m, d, b) = (params.m(), params.d(), batch.b());
    let layout = params.layout();
    let mut jac = DMatrix::zeros(b * d, layout.len());
    for i in 0..b {
        let x = batch.sample(i);
        let t = sample_terms(params, x, batch.y[i]);
        let row0 = i * d;
        for j in 0..m {
            let aj = params.a[j];
            // ∂g_a[j]/∂x = 2 s_j h + r s'_j w_j
            {
                let mut col = jac.column_mut(j);
                for l in 0..d {
                    col[row0 + l] = 2.0 * t.s[j] * t.h[l] + t.r * t.s1[j] * params.w[(j, l)];
                }
            }
            // ∂g_W[j,k]/∂x = a_j x_k (2 s'_j h + r s''_j w_j) + r a_j s'_j e_k
            for k in 0..d {
                let mut col = jac.column_mut(layout.w_index(j, k));
                let ax = aj * x[k];
                for l in 0..d {
                    col[row0 + l] =
                        ax * (2.0 * t.s1[j] * t.h[l] + t.r * t.s2[j] * params.w[(j, l)]);
                }
                col[row0 + k] += t.r * aj * t.s1[j];
            }
        }
    }
    Ok(InputJacobian { j: jac, b, d })
}

/// `Jᵀ`-free product: the gradient with respect to `X` of `⟨cot, G(X)⟩`, where
/// `cot` is a flattened cotangent on the gradient. Returns a `d × B` matrix.
pub fn input_vjp(
    params: &NetworkParams,
    batch: &DataBatch,
    cot: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check(params, batch)?;
    let layout = params.layout();
    if cot.len() != layout.len() {
        return Err(Error::LayoutMismatch(format!(
            "cotangent has {} entries, layout needs {}",
            cot.len(),
            layout.len()
        )));
    }
    let (m, d) = (layout.m, layout.d);
    let cot_a = cot.rows(0, m);
    let cot_w = DMatrix::from_row_slice(m, d, &cot.as_slice()[m..]);
    let mut out = DMatrix::zeros(d, batch.b());
    for i in 0..batch.b() {
        let x = batch.sample(i);
        let t = sample_terms(params, x, batch.y[i]);
        let c = &cot_w * DVector::from_column_slice(x);
        let mut alpha = 0.0;
        let mut beta = DVector::zeros(m);
        let mut gamma = DVector::zeros(m);
        for j in 0..m {
            let aj = params.a[j];
            alpha += cot_a[j] * t.s[j] + aj * t.s1[j] * c[j];
            beta[j] = cot_a[j] * t.s1[j] + aj * t.s2[j] * c[j];
            gamma[j] = aj * t.s1[j];
        }
        let mut g = params.w.tr_mul(&beta) * t.r;
        g += cot_w.tr_mul(&gamma) * t.r;
        g.axpy(2.0 * alpha, &t.h, 1.0);
        out.set_column(i, &g);
    }
    Ok(out)
}
