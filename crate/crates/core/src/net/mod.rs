//! The two-layer forward model and its derivatives.
//!
//! Canonical gradient layout shared by every module: the flattened gradient is
//! all of `∂ℓ/∂a` (length `m`) followed by `∂ℓ/∂W` in row-major order (row `j`
//! is `∂ℓ/∂w_j`). The loss is the unreduced sum `ℓ = Σ_i (y_i − f(x_i))²` and
//! the residual convention is `r_i = 2(f(x_i) − y_i)`.

mod activation;
mod hermite;
mod jacobian;
mod model;

pub use activation::{Activation, CustomActivation};
pub use hermite::{
    gauss_hermite, hermite_moments, hermite_poly, GaussHermite, HermiteCoefficients,
    DEFAULT_QUAD_NODES, ZERO_THRESHOLD,
};
pub use jacobian::{input_jacobian, input_vjp, InputJacobian};
pub use model::{
    batch_loss, forward, gradient, linearly_separable_batch, sample_batch, sample_params,
    DataBatch, GradientLayout, GradientObservation, NetworkParams,
};
