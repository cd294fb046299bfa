//! `psco`: generate synthetic data, train, evaluate, sweep and self-check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use psco_core::data::{generate_synthetic, load_dataset, write_atomic};
use psco_core::evaluation::{evaluate, AdaptConfig, EvalConfig, EvalReport};
use psco_core::oracle::selfcheck;
use psco_core::trainer::{format_metrics_log, EpochRecord};
use psco_core::{snapshot, Dataset, SyntheticSpec, TrainConfig, Trainer};

pub const SNAPSHOT_FILE: &str = "model.snap";
pub const METRICS_FILE: &str = "metrics.log";

#[derive(Debug, Parser)]
#[command(name = "psco", version, about = "Unsupervised meta-learning by pseudo-supervised contrast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (raw tensors plus manifest) from a spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; defaults to the spec file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a config file; writes model.snap and metrics.log into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a snapshot written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Few-shot evaluation of a trained snapshot.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        way: usize,
        #[arg(long)]
        shot: usize,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 15)]
        queries: usize,
        /// Adapt projector and predictor for this many iterations per episode.
        #[arg(long)]
        adapt: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant and oracle checks.
    Selfcheck,
    /// Train and evaluate every cell of a grid over K, m, τ and ε.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Labeled evaluation set; defaults to --dataset.
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 5)]
        shot: usize,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 15)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a named configuration preset as a config file.
    Config {
        #[arg(long)]
        preset: String,
    },
}

/// Sweep axes; an omitted axis keeps the base config's value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    shots: Option<Vec<usize>>,
    ema_momentum: Option<Vec<f64>>,
    tau_psco: Option<Vec<f64>>,
    epsilon: Option<Vec<f64>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_toml(&read_text(path)?).with_context(|| format!("invalid config {}", path.display()))
}

fn gen(spec: &Path, out: Option<&Path>) -> Result<()> {
    let spec_cfg: SyntheticSpec =
        toml::from_str(&read_text(spec)?).with_context(|| format!("invalid spec {}", spec.display()))?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => spec.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let (manifest, path) = generate_synthetic(&spec_cfg, &dir)?;
    println!("{} samples={} checksum={}", path.display(), manifest.n_samples, manifest.checksum);
    Ok(())
}

/// Keeps the records of epochs the trainer has already completed.
fn previous_records(out: &Path, completed: usize) -> Result<Vec<EpochRecord>> {
    let path = out.join(METRICS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for line in read_text(&path)?.lines().filter(|l| !l.trim().is_empty()) {
        let r: EpochRecord = line.parse()?;
        if r.epoch <= completed {
            records.push(r);
        }
    }
    Ok(records)
}

fn train_into(trainer: &mut Trainer, dataset: &Dataset, out: &Path, mut log: Vec<EpochRecord>) -> Result<Vec<EpochRecord>> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    snapshot::save(trainer, &out.join(SNAPSHOT_FILE))?;
    write_atomic(&out.join(METRICS_FILE), format_metrics_log(&log).as_bytes())?;
    while trainer.epoch < trainer.cfg.epochs {
        log.push(trainer.run_epoch(dataset)?);
        snapshot::save(trainer, &out.join(SNAPSHOT_FILE))?;
        write_atomic(&out.join(METRICS_FILE), format_metrics_log(&log).as_bytes())?;
    }
    Ok(log)
}

fn train(config: &Path, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = read_config(config)?;
    let data = load_dataset(dataset)?;
    let (mut trainer, log) = match resume {
        Some(snap) => {
            let mut t = snapshot::load(snap)?;
            if t.cfg.fingerprint() != cfg.fingerprint() {
                bail!("snapshot {} was written with a different config", snap.display());
            }
            t.cfg.epochs = cfg.epochs;
            let log = previous_records(out, t.epoch)?;
            (t, log)
        }
        None => (Trainer::new(cfg, data.kind)?, Vec::new()),
    };
    let log = train_into(&mut trainer, &data, out, log)?;
    match log.last() {
        Some(r) => println!("{r}"),
        None => println!("epoch=0 (initialized model written)"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_config(way: usize, shot: usize, episodes: usize, queries: usize, adapt: Option<usize>, seed: u64, tau: f64) -> EvalConfig {
    EvalConfig {
        n_query: queries,
        adapt: adapt.map(|iters| AdaptConfig::new(iters, tau)),
        ..EvalConfig::new(way, shot, episodes, seed)
    }
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(path) = out {
        write_atomic(path, format!("{report}\n").as_bytes())?;
    }
    Ok(())
}

fn cartesian(base: &TrainConfig, grid: &Grid) -> Vec<TrainConfig> {
    let axis = |v: &Option<Vec<f64>>, default: f64| v.clone().unwrap_or_else(|| vec![default]);
    let shots = grid.shots.clone().unwrap_or_else(|| vec![base.task.shots]);
    let mut cells = Vec::new();
    for &k in &shots {
        for m in axis(&grid.ema_momentum, base.task.ema_momentum) {
            for tau in axis(&grid.tau_psco, base.task.tau_psco) {
                for eps in axis(&grid.epsilon, base.sinkhorn.epsilon) {
                    let mut c = base.clone();
                    c.task.shots = k;
                    c.task.ema_momentum = m;
                    c.task.tau_psco = tau;
                    c.sinkhorn.epsilon = eps;
                    cells.push(c);
                }
            }
        }
    }
    cells
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    config: &Path,
    grid: &Path,
    dataset: &Path,
    eval_dataset: Option<&Path>,
    out: &Path,
    eval: impl Fn(f64) -> EvalConfig,
) -> Result<()> {
    let base = read_config(config)?;
    let grid: Grid = toml::from_str(&read_text(grid)?).with_context(|| format!("invalid grid {}", grid.display()))?;
    let train_data = load_dataset(dataset)?;
    let eval_data = match eval_dataset {
        Some(p) => load_dataset(p)?,
        None => train_data.clone(),
    };
    let cells = cartesian(&base, &grid);
    for c in &cells {
        c.validate()?;
    }
    let mut summary = String::new();
    for (i, cfg) in cells.into_iter().enumerate() {
        let dir = out.join(format!("cell-{i:03}"));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        let mut trainer = Trainer::new(cfg.clone(), train_data.kind)?;
        train_into(&mut trainer, &train_data, &dir, Vec::new())?;
        let report = evaluate(&eval_data, &trainer.state, &eval(cfg.task.tau_psco))?;
        write_atomic(&dir.join("report.txt"), format!("{report}\n").as_bytes())?;
        let line = format!(
            "cell={i} shots={} ema_momentum={} tau_psco={} epsilon={} {report}",
            cfg.task.shots, cfg.task.ema_momentum, cfg.task.tau_psco, cfg.sinkhorn.epsilon
        );
        println!("{line}");
        writeln!(summary, "{line}").expect("write to string");
    }
    write_atomic(&out.join("sweep.txt"), summary.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { spec, out } => gen(&spec, out.as_deref())?,
        Command::Train {
            config,
            dataset,
            out,
            resume,
        } => train(&config, &dataset, &out, resume.as_deref())?,
        Command::Eval {
            model,
            dataset,
            way,
            shot,
            episodes,
            queries,
            adapt,
            seed,
            out,
        } => {
            let trainer = snapshot::load(&model)?;
            let data = load_dataset(&dataset)?;
            let cfg = eval_config(way, shot, episodes, queries, adapt, seed, trainer.cfg.task.tau_psco);
            let report = evaluate(&data, &trainer.state, &cfg)?;
            write_report(&report, out.as_deref())?;
        }
        Command::Selfcheck => {
            let results = selfcheck();
            for r in &results {
                println!("{r}");
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::Sweep {
            config,
            grid,
            dataset,
            eval_dataset,
            out,
            way,
            shot,
            episodes,
            queries,
            seed,
        } => sweep(&config, &grid, &dataset, eval_dataset.as_deref(), &out, |tau| {
            eval_config(way, shot, episodes, queries, None, seed, tau)
        })?,
        Command::Config { preset } => print!("{}", TrainConfig::preset(&preset)?.to_toml()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let reason = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", reason.trim_start_matches("error: ").trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

/// Drops parser source excerpts (`12 | text`, `   | ^^^`) and joins the rest.
fn one_line(message: &str) -> String {
    message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.trim_start_matches(|c: char| c.is_ascii_digit()).trim_start().starts_with('|'))
        .collect::<Vec<_>>()
        .join(": ")
}
