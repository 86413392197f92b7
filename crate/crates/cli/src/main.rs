use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use invgrad::bounds::{bound_under_defense, dp_report, estimate_sensitivity, required_sigma};
use invgrad::gradmatch::grad_match_attack;
use invgrad::harness::{
    observe, report_file, sweep, trial_seed, ExperimentConfig, ReportOptions, ScoreMode, SweepConfig,
    SweepOptions,
};
use invgrad::net::{input_jacobian, sample_params, Activation};
use invgrad::rng::{mix, substream, Stream};
use invgrad::tensor::tensor_attack;
use serde_json::json;

#[derive(Parser)]
#[command(name = "invgrad", version, about = "Gradient inversion attacks, defenses and lower bounds for two-layer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    Tensor,
    Gradmatch,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Min,
    Max,
}

#[derive(clap::Args)]
struct Overrides {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(short = 'b', long = "batch")]
    b: Option<usize>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Trial index within the base seed.
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one attack on one seeded draw and print the reconstruction as JSON.
    Attack {
        #[command(flatten)]
        o: Overrides,
        #[arg(long, value_enum, default_value = "tensor")]
        attack: AttackKind,
    },
    /// Print the lower-bound report for one seeded draw.
    Bound {
        #[command(flatten)]
        o: Overrides,
        /// Observation noise std; defaults to the config's bound_sigma or the
        /// realised noise of its defense chain.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Gaussian-mechanism calculator: give σ² to get δ, or δ to get σ².
    DpCalc {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, conflicts_with = "sigma2")]
        delta: Option<f64>,
        #[arg(long)]
        sigma2: Option<f64>,
        /// Sensitivity Δ. Estimated from a sampled network when omitted.
        #[arg(long)]
        sensitivity: Option<f64>,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 1024)]
        m: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a grid of experiments and write results.csv, results.json and manifest.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[arg(long, env = "INVGRAD_WORKERS")]
        workers: Option<usize>,
    },
    /// Aggregate results.csv into per-defense scores and utility tables.
    Report {
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "min")]
        mode: Mode,
        #[arg(long, default_value_t = 0.1)]
        utility_tolerance: f64,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn experiment(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = o.d {
        cfg.d = d;
    }
    if let Some(m) = o.m {
        cfg.m = m;
    }
    if let Some(b) = o.b {
        cfg.b = b;
    }
    if let Some(s) = o.seed {
        cfg.base_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Attack { o, attack } => {
            let cfg = experiment(&o)?;
            let seed = trial_seed(cfg.base_seed, o.trial);
            let params = sample_params(cfg.d, cfg.m, cfg.activation, substream(seed, Stream::Params))?;
            let ob = observe(&cfg, &params, seed)?;
            let attack_seed = substream(seed, Stream::Attack);
            let b = ob.truth.b();
            let mut result = match attack {
                AttackKind::Tensor => {
                    let mut t = cfg.attacks.tensor.clone().unwrap_or_default();
                    t.seed = mix(attack_seed, 0);
                    let mut r = tensor_attack(&ob.obs, &params, b, &t)?;
                    r.score(&ob.truth.x, true)?;
                    r
                }
                AttackKind::Gradmatch => {
                    let spec = cfg.attacks.gradmatch.clone().unwrap_or_default();
                    let mut g = spec.config.clone();
                    g.seed = mix(attack_seed, 1);
                    let z = if spec.features_from_tensor {
                        let mut t = cfg.attacks.tensor.clone().unwrap_or_default();
                        t.seed = mix(attack_seed, 0);
                        Some(tensor_attack(&ob.obs, &params, b, &t)?.x_hat)
                    } else {
                        None
                    };
                    let mut target = ob.obs.clone();
                    target.scale(ob.gradient_scale);
                    let mut r = grad_match_attack(&target, &params, &ob.truth.y, &g, z.as_ref())?;
                    r.score(&ob.truth.x, spec.sign_resolve)?;
                    r
                }
            };
            result.warnings.sort();
            print(&result)
        }
        Command::Bound { o, sigma } => {
            let cfg = experiment(&o)?;
            let seed = trial_seed(cfg.base_seed, o.trial);
            let params = sample_params(cfg.d, cfg.m, cfg.activation, substream(seed, Stream::Params))?;
            let ob = observe(&cfg, &params, seed)?;
            let sigma = sigma
                .or(cfg.bound_sigma)
                .or_else(|| ob.obs.provenance.iter().rev().find_map(|r| r.noise_sigma).filter(|s| *s > 0.0));
            let Some(sigma) = sigma else {
                bail!("no noise level: pass --sigma, set bound_sigma, or add a noise defense");
            };
            let jac = input_jacobian(&params, &ob.truth)?;
            print(&bound_under_defense(&jac, sigma * ob.sigma_scale, ob.truth.b(), &ob.obs)?)
        }
        Command::DpCalc {
            epsilon,
            delta,
            sigma2,
            sensitivity,
            d,
            m,
            trials,
            seed,
        } => {
            let (sens, estimated) = match sensitivity {
                Some(s) => (s, None),
                None => {
                    let params = sample_params(d, m, Activation::Softplus, seed)?;
                    let est = estimate_sensitivity(&params, trials, mix(seed, 1))?;
                    (est.delta_hat, Some(json!({"d": d, "m": m, "trials": trials, "seed": seed})))
                }
            };
            let out = match (delta, sigma2) {
                (Some(delta), None) => {
                    let s2 = required_sigma(epsilon, delta, sens)?;
                    json!({"epsilon": epsilon, "delta": delta, "sensitivity": sens, "sigma2": s2,
                           "sigma": s2.sqrt(), "sensitivity_estimate": estimated})
                }
                (None, Some(s2)) => {
                    let r = dp_report(epsilon, s2, sens)?;
                    json!({"epsilon": epsilon, "sigma2": s2, "sensitivity": sens, "delta": r.delta,
                           "lambda_star": r.lambda_star, "valid": r.valid, "sensitivity_estimate": estimated})
                }
                _ => bail!("pass exactly one of --delta or --sigma2"),
            };
            print(&out)
        }
        Command::Sweep {
            config,
            out,
            seed,
            force,
            workers,
        } => {
            let mut cfg: SweepConfig = read_json(&config)?;
            if let Some(s) = seed {
                cfg.base.base_seed = s;
            }
            let Some(out) = out.or_else(|| cfg.out.clone()) else {
                bail!("no output directory: pass --out or set `out` in the config");
            };
            let mut opts = SweepOptions::new(out);
            opts.force = force;
            if let Some(w) = workers {
                opts.workers = w.max(1);
            }
            let summary = sweep(&cfg, &opts)?;
            print(&summary)
        }
        Command::Report {
            csv,
            mode,
            utility_tolerance,
            json,
        } => {
            let opts = ReportOptions {
                mode: match mode {
                    Mode::Min => ScoreMode::StrongestAttackMin,
                    Mode::Max => ScoreMode::WeakestAttackMax,
                },
                utility_tolerance,
            };
            let r = report_file(&csv, opts)?;
            if json {
                print(&r)
            } else {
                print!("{}", r.to_table());
                Ok(())
            }
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
