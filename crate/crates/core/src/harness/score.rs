use serde::{Deserialize, Serialize};

use super::trial::TrialRecord;
use crate::{Error, Result};

/// How attacks are combined into a defense score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Error of the strongest (lowest-error) attack.
    #[default]
    StrongestAttackMin,
    /// Error of the weakest attack, the literal maximum over attacks.
    WeakestAttackMax,
}

impl ScoreMode {
    pub fn name(self) -> &'static str {
        match self {
            ScoreMode::StrongestAttackMin => "strongest-attack-min",
            ScoreMode::WeakestAttackMax => "weakest-attack-max",
        }
    }

    pub fn combine(self, rmses: &[f64]) -> Option<f64> {
        let it = rmses.iter().copied();
        match self {
            ScoreMode::StrongestAttackMin => it.reduce(f64::min),
            ScoreMode::WeakestAttackMax => it.reduce(f64::max),
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strongest-attack-min" | "min" => Ok(ScoreMode::StrongestAttackMin),
            "weakest-attack-max" | "max" => Ok(ScoreMode::WeakestAttackMax),
            _ => Err(Error::InvalidArgument(format!("unknown score mode `{s}`"))),
        }
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    (v[n / 2] + v[(n - 1) / 2]) / 2.0
}

/// Median over trials of the per-trial score. Trials in which no attack
/// produced an error value are skipped.
pub fn score_trials(per_trial: &[Vec<f64>], mode: ScoreMode) -> Result<f64> {
    let mut scores: Vec<f64> = per_trial.iter().filter_map(|r| mode.combine(r)).collect();
    if scores.is_empty() {
        return Err(Error::EmptyGroup("no trial has a scored attack".into()));
    }
    Ok(median(&mut scores))
}

/// Defense score `S_D` for the records of one defense.
pub fn defense_score(records: &[TrialRecord], mode: ScoreMode) -> Result<f64> {
    let per: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.attacks.iter().filter_map(|a| a.rmse).collect())
        .collect();
    score_trials(&per, mode)
}
