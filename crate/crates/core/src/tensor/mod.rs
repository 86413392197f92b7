//! Moment-tensor reconstruction attack.
//!
//! The observed `a`-gradient is contracted with Hermite tensors of the known
//! first-layer weights. The resulting matrix reveals the span of the batch and
//! the projected tensor is decomposed into one component per sample.

mod attack;
mod decompose;
mod moments;
mod subspace;

pub use attack::{
    moment_estimates, tensor_attack, FourthOrder, MomentEstimates, ProbeChoice, TensorAttackConfig,
};
pub use decompose::{decompose_tensor, DecomposeConfig, Decomposition, SymTensor};
pub use moments::{
    build_moment_matrix, build_projected_tensor, build_projected_tensor4, linear_features, projected_features,
    residualize,
};
pub use subspace::{estimate_subspace, Subspace, SPECTRAL_GAP_WARN};
