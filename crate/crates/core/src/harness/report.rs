use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::score::{median, score_trials, ScoreMode};
use crate::{Error, Result};

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub config_hash: String,
    pub trial: usize,
    pub d: usize,
    pub m: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub defense: String,
    pub defense_param: Option<f64>,
    pub attack: String,
    pub rmse: Option<f64>,
    pub rl_exact: Option<f64>,
    pub rl_loose: Option<f64>,
    pub utility_loss: Option<f64>,
    pub wall_ms: u64,
}

pub fn read_rows(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub mode: ScoreMode,
    /// Defenses whose median utility losses differ by at most this relative
    /// amount (chained in sorted order) share a utility class.
    pub utility_tolerance: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            mode: ScoreMode::StrongestAttackMin,
            utility_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub defense_param: Option<f64>,
    pub d: usize,
    pub m: usize,
    pub b: usize,
    pub trials: usize,
    /// Median over trials of the per-trial defense score.
    pub s_d: Option<f64>,
    /// Median RMSE of each attack.
    pub attack_medians: BTreeMap<String, f64>,
    pub utility_median: Option<f64>,
    pub rl_exact_median: Option<f64>,
    pub rl_loose_median: Option<f64>,
    pub utility_class: Option<usize>,
    /// 1 for the highest `S_D` inside the utility class.
    pub rank_in_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub utility_tolerance: f64,
    pub rows: Vec<ReportRow>,
}

fn med(mut v: Vec<f64>) -> Option<f64> {
    v.retain(|x| !x.is_nan());
    (!v.is_empty()).then(|| median(&mut v))
}

type Key = (String, Option<u64>, usize, usize, usize);

/// Aggregates result rows into one line per (defense, parameter, d, m, B).
pub fn report(rows: &[CsvRow], opts: ReportOptions) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::EmptyGroup("no result rows".into()));
    }
    let mut groups: BTreeMap<Key, Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.defense.clone(), r.defense_param.map(f64::to_bits), r.d, r.m, r.b);
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((defense, param, d, m, b), rs) in groups {
        // One entry per trial; the same trial index can come from several grid
        // points only if they share this key, which the hash separates.
        let mut per_trial: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
        let mut per_attack: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut utility: BTreeMap<(&str, usize), f64> = BTreeMap::new();
        let mut exact: BTreeMap<(&str, usize), f64> = BTreeMap::new();
        let mut loose: BTreeMap<(&str, usize), f64> = BTreeMap::new();
        for r in &rs {
            let k = (r.config_hash.as_str(), r.trial);
            let entry = per_trial.entry(k).or_default();
            if let Some(v) = r.rmse {
                entry.push(v);
                per_attack.entry(r.attack.clone()).or_default().push(v);
            }
            if let Some(u) = r.utility_loss {
                utility.insert(k, u);
            }
            if let Some(v) = r.rl_exact {
                exact.insert(k, v);
            }
            if let Some(v) = r.rl_loose {
                loose.insert(k, v);
            }
        }
        let trials: Vec<Vec<f64>> = per_trial.values().cloned().collect();
        out.push(ReportRow {
            defense,
            defense_param: param.map(f64::from_bits),
            d,
            m,
            b,
            trials: trials.len(),
            s_d: score_trials(&trials, opts.mode).ok(),
            attack_medians: per_attack
                .into_iter()
                .filter_map(|(a, v)| med(v).map(|x| (a, x)))
                .collect(),
            utility_median: med(utility.into_values().collect()),
            rl_exact_median: med(exact.into_values().collect()),
            rl_loose_median: med(loose.into_values().collect()),
            utility_class: None,
            rank_in_class: None,
        });
    }
    assign_classes(&mut out, opts.utility_tolerance);
    Ok(Report {
        mode: opts.mode.name().into(),
        utility_tolerance: opts.utility_tolerance,
        rows: out,
    })
}

fn assign_classes(rows: &mut [ReportRow], tol: f64) {
    let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].utility_median.is_some()).collect();
    idx.sort_by(|&a, &b| rows[a].utility_median.unwrap().total_cmp(&rows[b].utility_median.unwrap()));
    let mut class = 0;
    let mut prev: Option<f64> = None;
    for &i in &idx {
        let u = rows[i].utility_median.unwrap();
        if let Some(p) = prev {
            let scale = p.abs().max(u.abs()).max(f64::MIN_POSITIVE);
            if (u - p).abs() > tol * scale {
                class += 1;
            }
        }
        rows[i].utility_class = Some(class);
        prev = Some(u);
    }
    let classes = idx.iter().filter_map(|&i| rows[i].utility_class).max().map_or(0, |c| c + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = idx.iter().copied().filter(|&i| rows[i].utility_class == Some(c)).collect();
        members.sort_by(|&a, &b| {
            let sa = rows[a].s_d.unwrap_or(f64::NEG_INFINITY);
            let sb = rows[b].s_d.unwrap_or(f64::NEG_INFINITY);
            sb.total_cmp(&sa)
        });
        for (rank, i) in members.into_iter().enumerate() {
            rows[i].rank_in_class = Some(rank + 1);
        }
    }
}

pub fn report_file(path: &Path, opts: ReportOptions) -> Result<Report> {
    report(&read_rows(path)?, opts)
}

impl Report {
    /// Plain-text table.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        let mut s = String::new();
        let _ = writeln!(s, "score mode: {}   utility tolerance: {}", self.mode, self.utility_tolerance);
        let _ = writeln!(
            s,
            "{:<24} {:>10} {:>4} {:>7} {:>3} {:>6} {:>11} {:>11} {:>11} {:>6} {:>5}",
            "defense", "param", "d", "m", "B", "trials", "S_D", "utility", "R_L exact", "class", "rank"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10} {:>4} {:>7} {:>3} {:>6} {:>11} {:>11} {:>11} {:>6} {:>5}",
                r.defense,
                r.defense_param.map_or("-".into(), |p| format!("{p}")),
                r.d,
                r.m,
                r.b,
                r.trials,
                opt(r.s_d),
                opt(r.utility_median),
                opt(r.rl_exact_median),
                r.utility_class.map_or("-".into(), |c| c.to_string()),
                r.rank_in_class.map_or("-".into(), |c| c.to_string()),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(defense: &str, p: f64, trial: usize, attack: &str, rmse: f64, u: f64) -> CsvRow {
        CsvRow {
            config_hash: defense.into(),
            trial,
            d: 4,
            m: 64,
            b: 2,
            defense: defense.into(),
            defense_param: Some(p),
            attack: attack.into(),
            rmse: Some(rmse),
            rl_exact: None,
            rl_loose: None,
            utility_loss: Some(u),
            wall_ms: 0,
        }
    }

    #[test]
    fn scores_classes_and_ranks() {
        let rows = vec![
            row("prune_ratio", 0.9, 0, "tensor", 0.5, 1.0),
            row("prune_ratio", 0.9, 0, "gradmatch", 0.3, 1.0),
            row("prune_ratio", 0.9, 1, "tensor", 0.7, 1.0),
            row("dropout", 0.9, 0, "tensor", 0.2, 1.05),
            row("noise", 0.1, 0, "tensor", 0.1, 3.0),
        ];
        let r = report(&rows, ReportOptions::default()).unwrap();
        let get = |name: &str| r.rows.iter().find(|x| x.defense == name).unwrap();
        let prune = get("prune_ratio");
        assert_eq!(prune.trials, 2);
        assert_eq!(prune.s_d, Some(0.5)); // median of {0.3, 0.7}
        assert_eq!(prune.attack_medians["tensor"], 0.6);
        assert_eq!(prune.utility_class, get("dropout").utility_class);
        assert_ne!(prune.utility_class, get("noise").utility_class);
        assert_eq!(prune.rank_in_class, Some(1));
        assert_eq!(get("dropout").rank_in_class, Some(2));
        let max = report(
            &rows,
            ReportOptions {
                mode: ScoreMode::WeakestAttackMax,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(max.rows.iter().find(|x| x.defense == "prune_ratio").unwrap().s_d, Some(0.6));
        assert!(r.to_table().contains("prune_ratio"));
    }

    #[test]
    fn empty_input_errors() {
        assert!(report(&[], ReportOptions::default()).is_err());
    }
}
