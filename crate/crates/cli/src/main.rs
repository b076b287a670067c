//! `mechinfer` command-line driver.
//!
//! Every subcommand prints a one-line JSON summary on stdout and logs to
//! stderr. Exit status: 0 on success, 1 on usage errors, 2 on runtime
//! failures.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand};
use mechinfer::amortized::{
    fine_tune_with_model, train_inference_net, train_proxy, FineTuneConfig, InferenceNet, Proxy,
    TrainConfig,
};
use mechinfer::bench::{evaluate, init_thread_pool, landscape_slice, record_rng, EvalConfig, Method};
use mechinfer::fitting::{multi_start_fit, BfgsConfig};
use mechinfer::observation::{generate_dataset_par, generate_record, read_jsonl, write_jsonl};
use mechinfer::{Error, ModelId, ModelSpec, SolverConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "mechinfer", version, about = "Parameter inference for mechanistic ODE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset as JSON lines.
    GenData(GenData),
    /// Train the proxy network on noise-free model outputs.
    #[command(after_help = LOG_HELP)]
    TrainProxy(TrainProxy),
    /// Train the inference network through a frozen proxy.
    #[command(after_help = LOG_HELP)]
    TrainInfnet(TrainInfnet),
    /// Fine-tune an inference network against the ODE solver.
    #[command(after_help = LOG_HELP)]
    FineTune(FineTune),
    /// Multi-start BFGS fit of every record.
    #[command(after_help = "Output CSV: one row per record, `index,z_1,...,z_p` (latent estimate).")]
    Fit(Fit),
    /// Score and time one method on a test set.
    #[command(after_help = "Output CSV (--out): one row per record, `index,z_1,...,z_p` (latent estimate).")]
    Evaluate(Evaluate),
    /// Loss surface on a plane through three prior draws.
    #[command(after_help = "Output CSV columns: alpha,beta,loss (loss empty where the model fails).")]
    Landscape(Landscape),
}

const LOG_HELP: &str =
    "Training log CSV (--log) columns: epoch,train_loss,val_loss,wall_time (seconds since start).";

#[derive(Args)]
struct ModelArg {
    /// Model: mmk or ecoli.
    #[arg(long)]
    model: ModelId,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    model: ModelArg,
    /// Number of records.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainProxy {
    #[command(flatten)]
    model: ModelArg,
    /// Training records (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::proxy().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::proxy().epochs)]
    epochs: usize,
    /// Append per-epoch metrics to this CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainInfnet {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    train: PathBuf,
    /// Trained proxy weights.
    #[arg(long)]
    proxy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::inference().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::inference().epochs)]
    epochs: usize,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FineTune {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    train: PathBuf,
    /// Inference network to start from.
    #[arg(long)]
    infnet: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::inference().seed)]
    seed: u64,
    /// Optimizer steps; defaults to 5% of the network's training steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Fit {
    #[command(flatten)]
    model: ModelArg,
    /// Records to fit (JSON lines).
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = at_least_one())]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    model: ModelArg,
    /// bfgs, bfgs-N, deep-inference, deep-inference-mm, deep-inference-bfgs or oracle.
    #[arg(long)]
    method: Method,
    /// Starts for `--method bfgs`.
    #[arg(long, value_parser = at_least_one())]
    starts: Option<usize>,
    #[arg(long)]
    test: PathBuf,
    /// Inference network weights for the deep-inference methods.
    #[arg(long)]
    infnet: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write per-record estimates here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Landscape {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    seed: u64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(2..).map(|v| v as usize))]
    grid: usize,
    /// Take the observations from this dataset instead of simulating one
    /// record from the seed.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Record index within `--test`.
    #[arg(long, default_value_t = 0)]
    record: usize,
    #[arg(long)]
    out: PathBuf,
}

fn at_least_one() -> impl clap::builder::TypedValueParser<Value = usize> {
    clap::value_parser!(u64).range(1..).map(|v| v as usize)
}

/// Reports a flag combination clap cannot express and exits with status 1.
fn usage_error(msg: &str) -> ! {
    use clap::CommandFactory;
    Cli::command()
        .error(clap::error::ErrorKind::ArgumentConflict, msg)
        .print()
        .ok();
    std::process::exit(1)
}

type Outcome = Result<serde_json::Value, Error>;

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_records(path: &Path, spec: &ModelSpec) -> Result<Vec<mechinfer::DatasetRecord>, Error> {
    let records = read_jsonl(path).map_err(|e| match e {
        Error::Io(io) => Error::MissingArtifact(format!("{}: {io}", path.display())),
        e => e,
    })?;
    if let Some(r) = records.iter().find(|r| r.observations.model_id != spec.model_id) {
        return Err(Error::InvalidArgument(format!(
            "{} holds {} records, expected {}",
            path.display(),
            r.observations.model_id,
            spec.model_id
        )));
    }
    log::info!("read {} records from {}", records.len(), path.display());
    Ok(records)
}

fn gen_data(a: GenData) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let (records, stats) = generate_dataset_par(&spec, a.n, a.seed, &SolverConfig::default())?;
    write_jsonl(&records, &a.out)?;
    Ok(json!({
        "command": "gen-data",
        "model": spec.model_id,
        "n": records.len(),
        "seed": a.seed,
        "rejected": stats.rejected,
        "out": a.out,
    }))
}

fn train_proxy_cmd(a: TrainProxy) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let records = read_records(&a.train, &spec)?;
    let cfg = TrainConfig {
        seed: a.seed,
        epochs: a.epochs,
        ..TrainConfig::proxy()
    };
    let (proxy, log) = train_proxy(&records, &spec, &SolverConfig::default(), &cfg)?;
    proxy.save(&a.out)?;
    if let Some(path) = &a.log {
        log.append_csv(path)?;
    }
    let last = log.last();
    Ok(json!({
        "command": "train-proxy",
        "model": spec.model_id,
        "epochs": cfg.epochs,
        "train_mse": last.map(|e| e.train_loss),
        "val_mse": last.map(|e| e.val_loss),
        "out": a.out,
    }))
}

fn train_infnet_cmd(a: TrainInfnet) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let proxy = Proxy::load(&a.proxy, &spec)?;
    let records = read_records(&a.train, &spec)?;
    let cfg = TrainConfig {
        seed: a.seed,
        epochs: a.epochs,
        ..TrainConfig::inference()
    };
    let (infnet, log) = train_inference_net(&records, &proxy, &spec, &cfg)?;
    infnet.save(&a.out)?;
    if let Some(path) = &a.log {
        log.append_csv(path)?;
    }
    let last = log.last();
    Ok(json!({
        "command": "train-infnet",
        "model": spec.model_id,
        "epochs": cfg.epochs,
        "steps": infnet.train_steps,
        "train_loss": last.map(|e| e.train_loss),
        "val_loss": last.map(|e| e.val_loss),
        "out": a.out,
    }))
}

fn fine_tune_cmd(a: FineTune) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let infnet = InferenceNet::load(&a.infnet, &spec)?;
    let records = read_records(&a.train, &spec)?;
    let main = TrainConfig {
        seed: a.seed,
        ..TrainConfig::inference()
    };
    let mut cfg = FineTuneConfig::after(&main, infnet.train_steps);
    if let Some(steps) = a.steps {
        cfg.steps = steps;
        cfg.eval_every = (steps / 10).max(1);
    }
    let (tuned, report) = fine_tune_with_model(&infnet, &records, &spec, &SolverConfig::default(), &cfg)?;
    tuned.save(&a.out)?;
    if let Some(path) = &a.log {
        report.log.append_csv(path)?;
    }
    Ok(json!({
        "command": "fine-tune",
        "model": spec.model_id,
        "steps_run": report.steps_run,
        "best_step": report.best_step,
        "initial_val_r2": report.initial_val_r2,
        "best_val_r2": report.best_val_r2,
        "skipped": report.skipped,
        "out": a.out,
    }))
}

fn fit_cmd(a: Fit) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let records = read_records(&a.test, &spec)?;
    let solver = SolverConfig::default();
    let bfgs = BfgsConfig::default();
    let start = Instant::now();
    let mut out = create(&a.out)?;
    let mut converged = 0;
    for (i, r) in records.iter().enumerate() {
        let mut rng = record_rng(a.seed, i);
        let fit = multi_start_fit(&r.observations, &spec, a.starts, &mut rng, &solver, &bfgs);
        converged += fit.converged as usize;
        let cols: Vec<String> = fit.z_hat.0.iter().map(|v| format!("{v:.17e}")).collect();
        std::io::Write::write_all(&mut out, format!("{i},{}\n", cols.join(",")).as_bytes())?;
    }
    std::io::Write::flush(&mut out)?;
    Ok(json!({
        "command": "fit",
        "model": spec.model_id,
        "n": records.len(),
        "starts": a.starts,
        "converged": converged,
        "wall_time": start.elapsed().as_secs_f64(),
        "out": a.out,
    }))
}

fn evaluate_cmd(a: Evaluate) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let mut method = a.method;
    if let Some(starts) = a.starts {
        match method {
            Method::Bfgs { .. } => method = Method::Bfgs { starts },
            _ => usage_error("--starts only applies to --method bfgs"),
        }
    }
    let infnet = match (&a.infnet, method.needs_network()) {
        (Some(path), true) => Some(InferenceNet::load(path, &spec)?),
        (None, true) => usage_error(&format!("--infnet is required for --method {method}")),
        (_, false) => None,
    };
    let records = read_records(&a.test, &spec)?;
    let cfg = EvalConfig {
        seed: a.seed,
        ..Default::default()
    };
    let eval = evaluate(method, &records, &spec, infnet.as_ref(), &cfg)?;
    if let Some(path) = &a.out {
        eval.write_estimates(create(path)?)?;
    }
    Ok(serde_json::to_value(&eval.report)?)
}

fn landscape_cmd(a: Landscape) -> Outcome {
    let spec = ModelSpec::by_id(a.model.model);
    let solver = SolverConfig::default();
    let obs = match &a.test {
        Some(path) => {
            let records = read_records(path, &spec)?;
            records
                .into_iter()
                .nth(a.record)
                .ok_or_else(|| Error::InvalidArgument(format!("--record {} is out of range", a.record)))?
                .observations
        }
        None => generate_record(&spec, a.seed, &solver)?.0.observations,
    };
    let grid = landscape_slice(&spec, a.seed, a.grid, &solver, &obs)?;
    grid.write_csv(create(&a.out)?)?;
    Ok(json!({
        "command": "landscape",
        "model": spec.model_id,
        "seed": a.seed,
        "grid": a.grid,
        "failed_cells": grid.loss.iter().filter(|v| v.is_none()).count(),
        "local_minima": grid.local_minima().len(),
        "out": a.out,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainProxy(a) => train_proxy_cmd(a),
        Command::TrainInfnet(a) => train_infnet_cmd(a),
        Command::FineTune(a) => fine_tune_cmd(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Landscape(a) => landscape_cmd(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
