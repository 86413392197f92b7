//! Information-theoretic lower bounds and the Gaussian-mechanism calculator.

mod cramer_rao;
mod dp;

pub use cramer_rao::{
    bound_under_defense, cramer_rao, cramer_rao_from_gram, rollout_jacobian, BoundReport, EIGEN_FLOOR,
};
pub use dp::{dp_delta, dp_report, estimate_sensitivity, required_sigma, DpReport, Sensitivity};
