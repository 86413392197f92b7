use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Activation;
use crate::defenses::DefenseRecord;
use crate::rng::rng_from;
use crate::serde_mat;
use crate::{Error, Result};

/// Weights of `f(x) = Σ_j a_j σ(w_jᵀx)`. Row `j` of `w` is `w_j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkParams {
    #[serde(with = "serde_mat::vector")]
    pub a: DVector<f64>,
    #[serde(with = "serde_mat::rows")]
    pub w: DMatrix<f64>,
    pub activation: Activation,
}

impl NetworkParams {
    pub fn new(a: DVector<f64>, w: DMatrix<f64>, activation: Activation) -> Result<Self> {
        if a.len() != w.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "a has {} entries but W has {} rows",
                a.len(),
                w.nrows()
            )));
        }
        if a.is_empty() || w.ncols() == 0 {
            return Err(Error::InvalidArgument("m and d must be positive".into()));
        }
        Ok(Self { a, w, activation })
    }

    pub fn m(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn layout(&self) -> GradientLayout {
        GradientLayout {
            m: self.m(),
            d: self.d(),
        }
    }

    /// `w_jᵀx` for every hidden unit.
    pub(crate) fn preactivations(&self, x: &[f64]) -> DVector<f64> {
        let mut u = DVector::zeros(self.m());
        for (k, &xk) in x.iter().enumerate() {
            if xk != 0.0 {
                u.axpy(xk, &self.w.column(k), 1.0);
            }
        }
        u
    }

    fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let u = self.preactivations(x);
        let mut f = 0.0;
        for j in 0..self.m() {
            f += self.a[j] * self.activation.value(u[j]);
        }
        f
    }
}

/// `a_j ~ N(0, 1/m²)`, `w_j ~ N(0, I_d)`, drawn in that order from one stream.
pub fn sample_params(d: usize, m: usize, activation: Activation, seed: u64) -> Result<NetworkParams> {
    if d == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "network dimensions must be positive (d={d}, m={m})"
        )));
    }
    let mut rng = rng_from(seed);
    let scale = 1.0 / m as f64;
    let a = DVector::from_fn(m, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let mut w = DMatrix::zeros(m, d);
    for j in 0..m {
        for k in 0..d {
            w[(j, k)] = rng.sample(StandardNormal);
        }
    }
    Ok(NetworkParams { a, w, activation })
}

/// Training batch with unit-norm columns and ±1 labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataBatch {
    /// `d × B`, column `i` is `x_i`.
    #[serde(with = "serde_mat::columns")]
    pub x: DMatrix<f64>,
    #[serde(with = "serde_mat::vector")]
    pub y: DVector<f64>,
}

impl DataBatch {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} samples but {} labels",
                x.ncols(),
                y.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for (i, col) in x.column_iter().enumerate() {
            let n = col.norm();
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("sample {i} has norm {n}, expected 1")));
            }
        }
        if let Some(bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not ±1")));
        }
        Ok(Self { x, y })
    }

    pub fn b(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.nrows()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.x.as_slice()[i * d..(i + 1) * d]
    }

    /// `B`-th largest singular value of `X`; zero when `B > d`.
    pub fn pi_min(&self) -> f64 {
        let b = self.b();
        if b > self.d() {
            return 0.0;
        }
        let mut sv: Vec<f64> = self.x.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv[b - 1]
    }

    /// Concatenate two batches column-wise.
    pub fn concat(&self, other: &DataBatch) -> Result<DataBatch> {
        if self.d() != other.d() {
            return Err(Error::DimensionMismatch("batches differ in d".into()));
        }
        let mut x = DMatrix::zeros(self.d(), self.b() + other.b());
        x.columns_mut(0, self.b()).copy_from(&self.x);
        x.columns_mut(self.b(), other.b()).copy_from(&other.x);
        let y = DVector::from_iterator(x.ncols(), self.y.iter().chain(other.y.iter()).copied());
        Ok(DataBatch { x, y })
    }
}

fn unit_sphere(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Uniform samples on the unit sphere with independent uniform ±1 labels.
pub fn sample_batch(d: usize, b: usize, seed: u64) -> Result<DataBatch> {
    if d == 0 || b == 0 {
        return Err(Error::InvalidArgument(format!("d={d}, B={b} must be positive")));
    }
    let mut rng = rng_from(seed);
    let mut x = DMatrix::zeros(d, b);
    for i in 0..b {
        x.set_column(i, &unit_sphere(&mut rng, d));
    }
    let y = DVector::from_fn(b, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    DataBatch::new(x, y)
}

/// Sphere samples labelled by a random hyperplane through the origin.
pub fn linearly_separable_batch(d: usize, b: usize, seed: u64) -> Result<DataBatch> {
    if d == 0 || b == 0 {
        return Err(Error::InvalidArgument(format!("d={d}, B={b} must be positive")));
    }
    let mut rng = rng_from(seed);
    let normal = unit_sphere(&mut rng, d);
    let mut x = DMatrix::zeros(d, b);
    let mut y = DVector::zeros(b);
    for i in 0..b {
        let v = unit_sphere(&mut rng, d);
        y[i] = if v.dot(&normal) >= 0.0 { 1.0 } else { -1.0 };
        x.set_column(i, &v);
    }
    DataBatch::new(x, y)
}

pub fn forward(params: &NetworkParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.d() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} coordinates, network expects {}",
            x.len(),
            params.d()
        )));
    }
    Ok(params.forward_unchecked(x))
}

fn check_batch(params: &NetworkParams, batch: &DataBatch) -> Result<()> {
    if batch.d() != params.d() {
        return Err(Error::DimensionMismatch(format!(
            "batch has d={}, network expects {}",
            batch.d(),
            params.d()
        )));
    }
    if batch.y.len() != batch.b() {
        return Err(Error::DimensionMismatch("labels and samples differ in count".into()));
    }
    Ok(())
}

/// `Σ_i (y_i − f(x_i))²`.
pub fn batch_loss(params: &NetworkParams, batch: &DataBatch) -> Result<f64> {
    check_batch(params, batch)?;
    Ok((0..batch.b())
        .map(|i| (batch.y[i] - params.forward_unchecked(batch.sample(i))).powi(2))
        .sum())
}

/// Exact gradient of the unreduced squared loss.
pub fn gradient(params: &NetworkParams, batch: &DataBatch) -> Result<GradientObservation> {
    check_batch(params, batch)?;
    let (m, d) = (params.m(), params.d());
    let mut g_a = DVector::zeros(m);
    let mut g_w = DMatrix::zeros(m, d);
    let mut coef = DVector::zeros(m);
    for i in 0..batch.b() {
        let x = batch.sample(i);
        let u = params.preactivations(x);
        let mut f = 0.0;
        let mut s = Vec::with_capacity(m);
        for j in 0..m {
            let v = params.activation.value(u[j]);
            f += params.a[j] * v;
            s.push(v);
        }
        let r = 2.0 * (f - batch.y[i]);
        for j in 0..m {
            g_a[j] += r * s[j];
            coef[j] = r * params.a[j] * params.activation.first(u[j]);
        }
        for (k, &xk) in x.iter().enumerate() {
            g_w.column_mut(k).axpy(xk, &coef, 1.0);
        }
    }
    Ok(GradientObservation {
        g_a,
        g_w,
        provenance: Vec::new(),
    })
}

/// Shape of a flattened gradient: `g_a` (length `m`) then `g_W` row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientLayout {
    pub m: usize,
    pub d: usize,
}

impl GradientLayout {
    pub fn len(&self) -> usize {
        self.m + self.m * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `g_W[j, k]`.
    pub fn w_index(&self, j: usize, k: usize) -> usize {
        self.m + j * self.d + k
    }

    /// Hidden unit owning flat coordinate `idx`.
    pub fn unit_of(&self, idx: usize) -> usize {
        if idx < self.m {
            idx
        } else {
            (idx - self.m) / self.d
        }
    }
}

/// An observed (possibly defended) gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientObservation {
    #[serde(with = "serde_mat::vector")]
    pub g_a: DVector<f64>,
    #[serde(with = "serde_mat::rows")]
    pub g_w: DMatrix<f64>,
    #[serde(default)]
    pub provenance: Vec<DefenseRecord>,
}

impl GradientObservation {
    pub fn layout(&self) -> GradientLayout {
        GradientLayout {
            m: self.g_a.len(),
            d: self.g_w.ncols(),
        }
    }

    pub fn flatten(&self) -> DVector<f64> {
        let layout = self.layout();
        let mut v = DVector::zeros(layout.len());
        v.rows_mut(0, layout.m).copy_from(&self.g_a);
        for j in 0..layout.m {
            for k in 0..layout.d {
                v[layout.w_index(j, k)] = self.g_w[(j, k)];
            }
        }
        v
    }

    pub fn from_flat(
        layout: GradientLayout,
        v: &DVector<f64>,
        provenance: Vec<DefenseRecord>,
    ) -> Result<Self> {
        if v.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "flat vector has {} entries, layout needs {}",
                v.len(),
                layout.len()
            )));
        }
        let g_a = v.rows(0, layout.m).into_owned();
        let g_w = DMatrix::from_fn(layout.m, layout.d, |j, k| v[layout.w_index(j, k)]);
        Ok(Self { g_a, g_w, provenance })
    }

    pub fn norm(&self) -> f64 {
        (self.g_a.norm_squared() + self.g_w.norm_squared()).sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.g_a *= c;
        self.g_w *= c;
    }

    /// Coordinate-wise sum; layouts must agree. Provenance is dropped.
    pub fn add(&self, other: &GradientObservation) -> Result<Self> {
        if self.layout() != other.layout() {
            return Err(Error::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout(),
                other.layout()
            )));
        }
        Ok(Self {
            g_a: &self.g_a + &other.g_a,
            g_w: &self.g_w + &other.g_w,
            provenance: Vec::new(),
        })
    }
}
