//! `donut` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use donut::config::KeyValues;
use donut::detect::{self, DetectConfig, ScoreKind, ScoreSeries};
use donut::diagnostics::{self, AblationConfig, Experiment};
use donut::metrics::{self, GroundTruth};
use donut::model_io;
use donut::net::NetShape;
use donut::series::{self, RawSeries, SplitSpec};
use donut::synth::{self, SynthConfig};
use donut::train::{self, TrainConfig, TrainMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "donut", version, about = "Unsupervised anomaly detection for seasonal KPIs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic KPI series.
    Synth(SynthArgs),
    /// Train a model on the train/validation part of a series.
    Train(TrainArgs),
    /// Score every point of a series.
    Detect(DetectArgs),
    /// Compare scores with ground-truth labels.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the five technique variants.
    Ablate(AblateArgs),
    /// Export per-window posteriors and the time-gradient statistic.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random stream of the command.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn load(&self) -> Result<KeyValues> {
        let mut kv = match &self.config {
            Some(path) => KeyValues::load(path)?,
            None => KeyValues::default(),
        };
        for item in &self.set {
            let Some((k, v)) = item.split_once('=') else {
                return Err(Usage(format!("--set expects KEY=VALUE, got `{item}`")).into());
            };
            kv.set(k.trim(), v.trim());
        }
        if let Some(seed) = self.seed {
            kv.set("seed", seed);
        }
        Ok(kv)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output CSV.
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TrainArgs {
    /// Input series CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output model file.
    #[arg(long)]
    model: PathBuf,
    /// Training trace CSV; defaults to the model path with `.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fraction of anomaly labels kept for training (0 = unsupervised).
    #[arg(long)]
    label_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output `timestamp,score` CSV.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per score.
    #[arg(long, default_value_t = 1024)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    mcmc_iters: usize,
    /// Skip MCMC imputation of missing points.
    #[arg(long)]
    no_mcmc: bool,
    /// Score under the prior instead of the posterior.
    #[arg(long)]
    prior: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `timestamp,score` CSV.
    #[arg(long)]
    scores: PathBuf,
    /// Labeled series CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Also write the threshold sweep as CSV.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output CSV, one row per variant.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    label_ratio: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Monte Carlo samples per score.
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output latent CSV.
    #[arg(long, short)]
    out: PathBuf,
    /// Random window pairs for the time-gradient statistic.
    #[arg(long, default_value_t = 10_000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad invocation or configuration; exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<donut::Error>() {
        Some(donut::Error::InvalidConfig(_)) => 1,
        Some(donut::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn train_config(kv: &mut KeyValues) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let shape = NetShape {
        window: kv.get_or("window", d.shape.window)?,
        latent: kv.get_or("latent", d.shape.latent)?,
        hidden: kv.get_or("hidden", d.shape.hidden)?,
    };
    let cfg = TrainConfig {
        shape,
        epsilon: kv.get_or("epsilon", d.epsilon)?,
        batch_size: kv.get_or("batch_size", d.batch_size)?,
        epochs: kv.get_or("epochs", d.epochs)?,
        initial_lr: kv.get_or("initial_lr", d.initial_lr)?,
        lr_discount: kv.get_or("lr_discount", d.lr_discount)?,
        lr_every: kv.get_or("lr_every", d.lr_every)?,
        l2_coeff: kv.get_or("l2_coeff", d.l2_coeff)?,
        clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
        injection_lambda: kv.get_or("injection_lambda", d.injection_lambda)?,
        mc_samples: kv.get_or("mc_samples_train", d.mc_samples)?,
        seed: kv.get_or("seed", d.seed)?,
        early_stop: kv.get_or("early_stop", d.early_stop)?,
        mode: kv.get_or::<TrainMode>("mode", d.mode)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn split_spec(kv: &mut KeyValues) -> Result<SplitSpec> {
    let d = SplitSpec::default();
    Ok(SplitSpec::new(
        kv.get_or("split_train", d.train)?,
        kv.get_or("split_valid", d.valid)?,
        kv.get_or("split_test", d.test)?,
    )?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut kv = args.overrides.load()?;
    let cfg = SynthConfig::from_key_values(&mut kv)?;
    kv.finish()?;
    let raw = synth::generate(&cfg)?;
    raw.write_csv(&args.out)?;
    eprintln!(
        "wrote {} points ({} anomalous, {} missing) to {}",
        raw.len(),
        raw.anomaly_count(),
        raw.missing_count(),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut kv = args.overrides.load()?;
    if let Some(r) = args.label_ratio {
        kv.set("label_ratio", r);
    }
    if let Some(e) = args.epochs {
        kv.set("epochs", e);
    }
    let cfg = train_config(&mut kv)?;
    let label_ratio: f64 = kv.get_or("label_ratio", 0.0)?;
    let split = split_spec(&mut kv)?;
    kv.finish()?;

    let raw = RawSeries::read_csv(&args.data)?;
    let exp = Experiment::new(&raw, split, label_ratio, cfg.seed)?;
    let (params, trace) = train::train(&exp.train, &exp.valid, &cfg)?;
    model_io::save(&params, &args.model)?;

    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| args.model.with_extension("trace.csv"));
    let comments = vec![
        format!(
            "retained_labels={} original_labels={}",
            exp.retained_labels, exp.original_labels
        ),
        format!(
            "train_windows={} total_windows={} steps={} best_epoch={}",
            trace.train_windows,
            trace.total_windows,
            trace.steps,
            trace.best_epoch.map_or("none".into(), |e| e.to_string())
        ),
    ];
    write(&trace_path, &trace.to_csv(&comments))?;
    eprintln!(
        "trained {} epochs on {} windows; model {}, trace {}",
        trace.epochs.len(),
        trace.train_windows,
        args.model.display(),
        trace_path.display()
    );
    Ok(())
}

fn run_detect(args: &DetectArgs) -> Result<()> {
    let params = model_io::load(&args.model)?;
    let raw = RawSeries::read_csv(&args.data)?;
    let prepared = series::prepare(&raw, Some(params.stats))?;
    let cfg = DetectConfig {
        mcmc_iters: args.mcmc_iters,
        mc_samples: args.samples,
        seed: args.seed.unwrap_or(0),
        use_mcmc: !args.no_mcmc,
    };
    let kind = if args.prior {
        ScoreKind::Prior
    } else {
        ScoreKind::Reconstruction
    };
    let scores = detect::detect_with(&prepared, &params, &cfg, kind)?;
    let timestamps = (0..prepared.len()).map(|i| prepared.timestamp(i));
    write(&args.out, &scores.to_csv(timestamps))?;
    eprintln!("scored {} of {} points", scores.scored(), scores.len());
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let raw = RawSeries::read_csv(&args.truth)?;
    let (timestamps, scores) = ScoreSeries::read_csv(&args.scores)?;
    let index: std::collections::HashMap<i64, usize> = raw
        .timestamps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    let mut aligned = vec![None; raw.len()];
    for (t, s) in timestamps.iter().zip(&scores.scores) {
        let Some(&i) = index.get(t) else {
            bail!(donut::Error::Csv {
                line: 0,
                message: format!("score timestamp {t} does not appear in the truth series"),
            });
        };
        aligned[i] = *s;
    }
    let truth = GroundTruth::from_raw(&raw);
    let report = metrics::evaluate(&truth, &aligned);
    print!("{}", report.summary());
    if let Some(path) = &args.table {
        write(path, &report.table_csv())?;
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let mut kv = args.overrides.load()?;
    if let Some(r) = args.label_ratio {
        kv.set("label_ratio", r);
    }
    if let Some(e) = args.epochs {
        kv.set("epochs", e);
    }
    let train = train_config(&mut kv)?;
    let label_ratio = kv.get_or("label_ratio", 0.0)?;
    let split = split_spec(&mut kv)?;
    let detect = DetectConfig {
        mc_samples: args.samples.unwrap_or(kv.get_or("mc_samples", 1024)?),
        mcmc_iters: kv.get_or("mcmc_iters", 10)?,
        seed: train.seed,
        use_mcmc: true,
    };
    kv.finish()?;
    let raw = RawSeries::read_csv(&args.data)?;
    let rows = diagnostics::run_ablation(
        &raw,
        &AblationConfig {
            train,
            detect,
            split,
            label_ratio,
        },
    )?;
    let csv = diagnostics::ablation_csv(&rows);
    write(&args.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn run_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let params = model_io::load(&args.model)?;
    let raw = RawSeries::read_csv(&args.data)?;
    let prepared = series::prepare(&raw, Some(params.stats))?;
    let rows = diagnostics::export_latent(&prepared, &params)?;
    write(&args.out, &diagnostics::latent_csv(&rows))?;
    let tg = diagnostics::time_gradient(&rows, args.pairs, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    println!("windows: {}", rows.len());
    println!("adjacent-window mean distance: {}", tg.adjacent);
    println!("random-pair mean distance:     {}", tg.random);
    println!("ratio:                         {}", tg.ratio());
    Ok(())
}

/// The error chain joined with `: `, skipping causes that the previous
/// message already quotes.
fn message(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.ends_with(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            return ExitCode::from(if informational { 0 } else { 1 });
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Detect(a) => run_detect(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Diagnose(a) => run_diagnose(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
