use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{stable_hash, ExperimentConfig};
use super::trial::{run_trial, trial_seed, TrialRecord};
use crate::defenses::DefenseConfig;
use crate::{Error, Result};

pub const CSV_FILE: &str = "results.csv";
pub const JSON_FILE: &str = "results.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "results.jsonl";

pub const CSV_HEADER: [&str; 13] = [
    "config_hash",
    "trial",
    "d",
    "m",
    "B",
    "defense",
    "defense_param",
    "attack",
    "rmse",
    "rl_exact",
    "rl_loose",
    "utility_loss",
    "wall_ms",
];

/// Axes of the grid; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub d: Vec<usize>,
    pub m: Vec<usize>,
    pub b: Vec<usize>,
    /// Each entry is a full defense chain.
    pub defenses: Vec<Vec<DefenseConfig>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub grid: Grid,
    /// Write measured wall times into `wall_ms`. Off by default so outputs
    /// are byte-reproducible; the total always goes to the manifest.
    pub record_wall_time: bool,
    pub out: Option<PathBuf>,
}

impl SweepConfig {
    /// Cross product in the order `d`, `m`, `B`, defense chain (last fastest).
    pub fn points(&self) -> Vec<ExperimentConfig> {
        fn axis<T: Clone>(v: &[T], base: T) -> Vec<T> {
            if v.is_empty() {
                vec![base]
            } else {
                v.to_vec()
            }
        }
        let base = &self.base;
        let mut out = Vec::new();
        for d in axis(&self.grid.d, base.d) {
            for m in axis(&self.grid.m, base.m) {
                for b in axis(&self.grid.b, base.b) {
                    for defenses in axis(&self.grid.defenses, base.defenses.clone()) {
                        out.push(ExperimentConfig {
                            d,
                            m,
                            b,
                            defenses,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.points() {
            p.validate()?;
        }
        Ok(())
    }

    /// Hash of everything that determines the output rows.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = None;
        stable_hash(&c)
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub out: PathBuf,
    pub force: bool,
    pub workers: usize,
    /// Stop after this many new trials, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
}

impl SweepOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            out: out.into(),
            force: false,
            workers: workers_from_env(),
            stop_after: None,
        }
    }
}

/// Worker count from `INVGRAD_WORKERS`, defaulting to the available cores.
pub fn workers_from_env() -> usize {
    std::env::var("INVGRAD_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointInfo {
    pub index: usize,
    pub config_hash: String,
    pub d: usize,
    pub m: usize,
    pub b: usize,
    pub defense: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub sweep_hash: String,
    /// `running` until every row is written, then `complete`.
    pub status: String,
    pub base_seed: u64,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    pub points: Vec<PointInfo>,
    pub config: SweepConfig,
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub total_wall_ms: Option<u64>,
    pub rows: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    point: usize,
    trial: usize,
    record: TrialRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub out: PathBuf,
    pub points: usize,
    pub trials: usize,
    /// Trials run by this invocation.
    pub ran: usize,
    /// Trials found in the checkpoint.
    pub resumed: usize,
    pub complete: bool,
    pub rows: usize,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn fmt_float(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// CSV lines for one record, one per attack.
pub fn csv_rows(r: &TrialRecord) -> Vec<[String; 13]> {
    let (exact, loose) = match &r.bound {
        Some(b) => (Some(b.exact), Some(b.loose)),
        None => (None, None),
    };
    r.attacks
        .iter()
        .map(|a| {
            [
                r.config_hash.clone(),
                r.trial.to_string(),
                r.d.to_string(),
                r.m.to_string(),
                r.b.to_string(),
                r.defense.clone(),
                fmt_float(r.defense_param),
                a.attack.clone(),
                fmt_float(a.rmse),
                fmt_float(exact),
                fmt_float(loose),
                fmt_float(r.utility_loss),
                r.wall_ms.to_string(),
            ]
        })
        .collect()
}

pub fn write_csv(path: &Path, records: &[TrialRecord]) -> Result<usize> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    let mut n = 0;
    for r in records {
        for row in csv_rows(r) {
            w.write_record(&row)?;
            n += 1;
        }
    }
    w.flush()?;
    Ok(n)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<BTreeMap<(usize, usize), TrialRecord>> {
    let mut done = BTreeMap::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in BufReader::new(File::open(path)?).lines() {
        // A torn final line from an interrupted write is simply redone.
        if let Ok(c) = serde_json::from_str::<Checkpoint>(&line?) {
            done.entry((c.point, c.trial)).or_insert(c.record);
        }
    }
    Ok(done)
}

/// Prepares the output directory. Returns true when an interrupted run of
/// the same sweep should be resumed.
fn prepare_out(out: &Path, sweep_hash: &str, force: bool) -> Result<bool> {
    let files = [CSV_FILE, JSON_FILE, MANIFEST_FILE, CHECKPOINT_FILE];
    if force {
        for f in files {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        fs::create_dir_all(out)?;
        return Ok(false);
    }
    let manifest = out.join(MANIFEST_FILE);
    if manifest.exists() {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(&manifest)?))?;
        if m.status == "running" && m.sweep_hash == sweep_hash {
            return Ok(true);
        }
        return Err(Error::OutputExists(out.display().to_string()));
    }
    if files.iter().any(|f| out.join(f).exists()) {
        return Err(Error::OutputExists(out.display().to_string()));
    }
    fs::create_dir_all(out)?;
    Ok(false)
}

/// Runs every (point, trial) of the grid and writes the artifacts to `opts.out`.
pub fn sweep(cfg: &SweepConfig, opts: &SweepOptions) -> Result<SweepSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let points = cfg.points();
    let trials = cfg.base.trials;
    let sweep_hash = cfg.hash()?;
    let resume = prepare_out(&opts.out, &sweep_hash, opts.force)?;
    let ckpt_path = opts.out.join(CHECKPOINT_FILE);
    let done = if resume {
        read_checkpoint(&ckpt_path)?
    } else {
        BTreeMap::new()
    };
    let resumed = done.len();

    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").into(),
        sweep_hash,
        status: "running".into(),
        base_seed: cfg.base.base_seed,
        trials,
        trial_seeds: (0..trials).map(|t| trial_seed(cfg.base.base_seed, t)).collect(),
        points: points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                Ok(PointInfo {
                    index,
                    config_hash: p.hash()?,
                    d: p.d,
                    m: p.m,
                    b: p.b,
                    defense: p.defense_label(),
                })
            })
            .collect::<Result<_>>()?,
        config: cfg.clone(),
        workers: opts.workers,
        started_unix: now_unix(),
        finished_unix: None,
        total_wall_ms: None,
        rows: None,
    };
    write_json(&opts.out.join(MANIFEST_FILE), &manifest)?;

    let mut pending: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..trials).map(move |t| (p, t)))
        .filter(|k| !done.contains_key(k))
        .collect();
    if let Some(n) = opts.stop_after {
        pending.truncate(n);
    }
    // Rewrite the checkpoint without any torn line before appending.
    {
        let mut f = BufWriter::new(File::create(&ckpt_path)?);
        for ((point, trial), record) in &done {
            serde_json::to_writer(
                &mut f,
                &Checkpoint {
                    point: *point,
                    trial: *trial,
                    record: record.clone(),
                },
            )?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    let writer = Mutex::new(OpenOptions::new().append(true).open(&ckpt_path)?);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<((usize, usize), TrialRecord)>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&(point, trial)| {
                let mut record = run_trial(&points[point], trial)?;
                if !cfg.record_wall_time {
                    record.wall_ms = 0;
                }
                let mut line = serde_json::to_vec(&Checkpoint {
                    point,
                    trial,
                    record: record.clone(),
                })?;
                line.push(b'\n');
                let mut w = writer.lock().expect("checkpoint writer poisoned");
                w.write_all(&line)?;
                w.flush()?;
                Ok(((point, trial), record))
            })
            .collect()
    });
    let mut all = done;
    let ran = results.len();
    for r in results {
        let (k, rec) = r?;
        all.insert(k, rec);
    }

    let total = points.len() * trials;
    let complete = all.len() == total;
    let mut rows = 0;
    if complete {
        let records: Vec<TrialRecord> = all.into_values().collect();
        rows = write_csv(&opts.out.join(CSV_FILE), &records)?;
        write_json(&opts.out.join(JSON_FILE), &records)?;
        manifest.status = "complete".into();
        manifest.finished_unix = Some(now_unix());
        manifest.rows = Some(rows);
    }
    manifest.total_wall_ms = Some(start.elapsed().as_millis() as u64);
    write_json(&opts.out.join(MANIFEST_FILE), &manifest)?;
    Ok(SweepSummary {
        out: opts.out.clone(),
        points: points.len(),
        trials,
        ran,
        resumed,
        complete,
        rows,
    })
}
