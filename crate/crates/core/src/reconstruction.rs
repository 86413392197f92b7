use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::harness::min_perm_distance;
use crate::serde_mat;
use crate::Result;

/// Output of a reconstruction attack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub attack: String,
    /// `d × B`, unit-norm columns.
    #[serde(with = "serde_mat::columns")]
    pub x_hat: DMatrix<f64>,
    /// Component weights, when the attack produces them.
    pub weights: Vec<f64>,
    /// Per-column signs; meaningful only once `signs_resolved` is set.
    pub signs: Vec<f64>,
    pub signs_resolved: bool,
    /// Error against the ground truth, filled by [`ReconstructionResult::score`].
    pub rmse: Option<f64>,
    pub assignment: Option<Vec<usize>>,
    /// False when an iterative stage hit its iteration cap.
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl ReconstructionResult {
    pub(crate) fn new(attack: &str, x_hat: DMatrix<f64>) -> Self {
        let b = x_hat.ncols();
        Self {
            attack: attack.into(),
            x_hat,
            weights: Vec::new(),
            signs: vec![1.0; b],
            signs_resolved: false,
            rmse: None,
            assignment: None,
            converged: true,
            warnings: Vec::new(),
        }
    }

    /// Matches against the true samples and records the error, permutation and signs.
    pub fn score(&mut self, truth: &DMatrix<f64>, sign_resolve: bool) -> Result<f64> {
        let m = min_perm_distance(truth, &self.x_hat, sign_resolve)?;
        let mut signs = vec![1.0; self.x_hat.ncols()];
        for (i, &j) in m.perm.iter().enumerate() {
            signs[j] = m.signs[i];
        }
        self.signs = signs;
        self.signs_resolved = sign_resolve;
        self.assignment = Some(m.perm);
        self.rmse = Some(m.rmse);
        Ok(m.rmse)
    }
}
