//! Experiment orchestration: seeded trials, defense scores, utility,
//! sweeps with checkpointing, and reports.
//!
//! Every random draw of a trial derives from `mix(base_seed, trial)`, so the
//! same trial index sees the same network and data at every grid point.

mod config;
mod metric;
mod report;
mod score;
mod sweep;
mod trial;
mod utility;

pub use config::{stable_hash, AttackSpec, ExperimentConfig, GradMatchSpec, UtilityConfig};
pub use metric::{hungarian, min_perm_distance, Matching};
pub use report::{read_rows, report, report_file, CsvRow, Report, ReportOptions, ReportRow};
pub use score::{defense_score, score_trials, ScoreMode};
pub use sweep::{
    csv_rows, sweep, workers_from_env, write_csv, Grid, Manifest, PointInfo, SweepConfig, SweepOptions,
    SweepSummary, CHECKPOINT_FILE, CSV_FILE, CSV_HEADER, JSON_FILE, MANIFEST_FILE,
};
pub use trial::{observe, run_trial, trial_seed, AttackOutcome, Observation, TrialRecord};
pub use utility::{utility_loss, UtilityOutcome};
