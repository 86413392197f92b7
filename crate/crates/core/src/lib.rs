//! Gradient-leakage laboratory for two-layer networks.
//!
//! The crate treats the map from a training batch to its loss gradient as a
//! forward operator and studies how well it can be inverted:
//!
//! * [`net`] holds the two-layer model `f(x) = Σ_j a_j σ(w_jᵀx)`, its exact
//!   parameter gradients, the input-Jacobian of the gradient and the Gaussian
//!   Hermite moments of the activation.
//! * [`defenses`] transforms an observed gradient (noise, clipping, pruning,
//!   dropout) or produces one through training-side mechanisms (local and
//!   secure aggregation).
//! * [`tensor`] is the moment-tensor reconstruction attack.
//! * [`gradmatch`] is the optimisation-based gradient-matching attack with a
//!   feature-matching regulariser.
//! * [`bounds`] computes Cramér–Rao lower bounds per defense and the Gaussian
//!   mechanism calculator.
//! * [`harness`] wires everything into seeded trials, sweeps and reports.

pub mod bounds;
pub mod defenses;
mod error;
pub mod gradmatch;
pub mod harness;
pub mod net;
pub mod reconstruction;
pub mod rng;
pub mod serde_mat;
pub mod tensor;

pub use error::{Error, Result};
pub use reconstruction::ReconstructionResult;

pub use nalgebra::{DMatrix, DVector};
