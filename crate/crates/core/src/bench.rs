//! Benchmark driver: runs an estimation method over a test set, scores it
//! and times it, and evaluates two-dimensional slices of the loss surface.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::amortized::InferenceNet;
use crate::error::{Error, Result};
use crate::fitting::{best_of, multi_start_runs, refine, BfgsConfig, FitResult, ModelObjective};
use crate::likelihood::{r_squared, to_latent, LatentParams};
use crate::model::{prior_sample, ModelSpec};
use crate::neural::Tensors;
use crate::observation::{record_seed, DatasetRecord, ObservationSet};
use crate::ode::SolverConfig;

/// Records at the start of a run whose timings are discarded.
pub const WARMUP_RECORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Best of `starts` BFGS runs from prior draws.
    Bfgs { starts: usize },
    DeepInference,
    /// Inference network fine-tuned against the solver.
    DeepInferenceMm,
    /// Network estimate refined by one BFGS run.
    DeepInferenceBfgs,
    /// Echoes the true parameters.
    Oracle,
}

impl Method {
    pub fn needs_network(self) -> bool {
        matches!(
            self,
            Method::DeepInference | Method::DeepInferenceMm | Method::DeepInferenceBfgs
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Bfgs { starts } => write!(f, "bfgs-{starts}"),
            Method::DeepInference => f.write_str("deep-inference"),
            Method::DeepInferenceMm => f.write_str("deep-inference-mm"),
            Method::DeepInferenceBfgs => f.write_str("deep-inference-bfgs"),
            Method::Oracle => f.write_str("oracle"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown method '{s}'"));
        Ok(match s {
            "bfgs" => Method::Bfgs { starts: 1 },
            "deep-inference" => Method::DeepInference,
            "deep-inference-mm" => Method::DeepInferenceMm,
            "deep-inference-bfgs" => Method::DeepInferenceBfgs,
            "oracle" => Method::Oracle,
            _ => {
                let starts: usize = s
                    .strip_prefix("bfgs-")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(bad)?;
                if starts == 0 {
                    return Err(bad());
                }
                Method::Bfgs { starts }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub solver: SolverConfig,
    pub bfgs: BfgsConfig,
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            solver: SolverConfig::default(),
            bfgs: BfgsConfig::default(),
            warmup: WARMUP_RECORDS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        Some(Summary {
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub model: String,
    pub n_records: usize,
    pub r2: f64,
    pub r2_std_err: f64,
    /// R² against the noise-free trajectories.
    pub r2_truth: f64,
    pub r2_truth_std_err: f64,
    pub n_failed: usize,
    /// Per-record seconds, warm-up records excluded.
    pub mean_time: f64,
    pub median_time: f64,
    /// BFGS iterations per record, summed over starts.
    pub iterations: Option<Summary>,
    pub config_hash: String,
    pub seed: u64,
}

/// Report plus the per-record data it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub estimates: Vec<LatentParams>,
    pub times: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl Evaluation {
    /// One line per record: index, then the latent estimate.
    pub fn write_estimates<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, z) in self.estimates.iter().enumerate() {
            let cols: Vec<String> = z.0.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{i},{}", cols.join(","))?;
        }
        Ok(())
    }
}

/// Hex SHA-256 over everything that determines a report apart from the
/// input files: method, model definition, solver and optimizer settings,
/// seed, and the network weights if any.
pub fn config_hash(method: Method, spec: &ModelSpec, cfg: &EvalConfig, infnet: Option<&InferenceNet>) -> String {
    let mut h = Sha256::new();
    h.update(method.to_string().as_bytes());
    h.update(serde_json::to_vec(spec).unwrap_or_default());
    h.update(serde_json::to_vec(cfg).unwrap_or_default());
    if let Some(net) = infnet.filter(|_| method.needs_network()) {
        for v in net.net.to_flat() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Start-draw stream for record `index` of a run seeded with `seed`.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(record_seed(seed, index as u64))
}

fn bfgs_runs(obs: &ObservationSet, spec: &ModelSpec, starts: usize, rng: &mut ChaCha8Rng, cfg: &EvalConfig) -> Vec<FitResult> {
    multi_start_runs(
        || ModelObjective::new(spec, obs, &cfg.solver),
        spec.param_dim(),
        starts,
        rng,
        &cfg.bfgs,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    method: Method,
    records: &[DatasetRecord],
    spec: &ModelSpec,
    cfg: &EvalConfig,
    infnet: Option<&InferenceNet>,
    estimates: Vec<LatentParams>,
    times: Vec<f64>,
    iterations: Vec<usize>,
) -> Result<Evaluation> {
    let scores = r_squared(records, &estimates, spec, &cfg.solver)?;
    let timed = if times.len() > cfg.warmup { &times[cfg.warmup..] } else { &times[..] };
    let time = Summary::of(timed).expect("at least one record");
    let iter_stats = if iterations.is_empty() {
        None
    } else {
        Summary::of(&iterations.iter().map(|&i| i as f64).collect::<Vec<_>>())
    };
    let report = EvalReport {
        method: method.to_string(),
        model: spec.model_id.to_string(),
        n_records: records.len(),
        r2: scores.observed.value,
        r2_std_err: scores.observed.std_err,
        r2_truth: scores.truth.value,
        r2_truth_std_err: scores.truth.std_err,
        n_failed: scores.n_failed,
        mean_time: time.mean,
        median_time: time.median,
        iterations: iter_stats,
        config_hash: config_hash(method, spec, cfg, infnet),
        seed: cfg.seed,
    };
    Ok(Evaluation {
        report,
        estimates,
        times,
        iterations,
    })
}

/// Runs `method` on every record serially (so timings are not skewed by
/// contention) and scores the estimates.
pub fn evaluate(
    method: Method,
    records: &[DatasetRecord],
    spec: &ModelSpec,
    infnet: Option<&InferenceNet>,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no test records".into()));
    }
    let net = match (method.needs_network(), infnet) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::MissingArtifact(format!("{method} needs an inference network")))
        }
        (true, Some(n)) => {
            if n.model != spec.model_id {
                return Err(Error::MissingArtifact(format!(
                    "inference network was trained for {}, not {}",
                    n.model, spec.model_id
                )));
            }
            if method == Method::DeepInferenceMm && !n.fine_tuned {
                return Err(Error::MissingArtifact(
                    "deep-inference-mm needs a fine-tuned inference network".into(),
                ));
            }
            Some(n)
        }
    };
    let mut estimates = Vec::with_capacity(records.len());
    let mut times = Vec::with_capacity(records.len());
    let mut iterations = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let obs = &r.observations;
        let start = Instant::now();
        let z = match method {
            Method::Bfgs { starts } => {
                let runs = bfgs_runs(obs, spec, starts, &mut record_rng(cfg.seed, i), cfg);
                iterations.push(runs.iter().map(|f| f.iterations).sum());
                best_of(&runs, starts).expect("starts >= 1").z_hat.clone()
            }
            Method::DeepInference | Method::DeepInferenceMm => net.expect("checked").infer(obs, spec)?,
            Method::DeepInferenceBfgs => {
                let z0 = net.expect("checked").infer(obs, spec)?;
                let fit = refine(&z0, obs, spec, &cfg.solver, &cfg.bfgs);
                iterations.push(fit.iterations);
                fit.z_hat
            }
            Method::Oracle => to_latent(&r.true_params, spec)?,
        };
        times.push(start.elapsed().as_secs_f64());
        estimates.push(z);
    }
    finish(method, records, spec, cfg, net, estimates, times, iterations)
}

/// Evaluates best-of-`k` BFGS for every `k` in `starts` from a single run of
/// `max(starts)` starts per record: best-of-k uses the first k starts, so
/// R² cannot decrease with k on the same seed. Start draws match
/// [`evaluate`] with [`Method::Bfgs`].
pub fn evaluate_bfgs_grid(
    starts: &[usize],
    records: &[DatasetRecord],
    spec: &ModelSpec,
    cfg: &EvalConfig,
) -> Result<Vec<Evaluation>> {
    let max = starts.iter().copied().max().unwrap_or(0);
    if max == 0 || records.is_empty() {
        return Err(Error::InvalidArgument("empty BFGS grid".into()));
    }
    let runs: Vec<Vec<FitResult>> = records
        .iter()
        .enumerate()
        .map(|(i, r)| bfgs_runs(&r.observations, spec, max, &mut record_rng(cfg.seed, i), cfg))
        .collect();
    starts
        .iter()
        .map(|&k| {
            let mut estimates = Vec::with_capacity(runs.len());
            let mut times = Vec::with_capacity(runs.len());
            let mut iterations = Vec::with_capacity(runs.len());
            for r in &runs {
                estimates.push(best_of(r, k).expect("k >= 1").z_hat.clone());
                times.push(r[..k].iter().map(|f| f.wall_time).sum());
                iterations.push(r[..k].iter().map(|f| f.iterations).sum());
            }
            finish(Method::Bfgs { starts: k }, records, spec, cfg, None, estimates, times, iterations)
        })
        .collect()
}

/// NLL over the affine slice `z0 + α(z1 − z0) + β(z2 − z0)` through three
/// prior draws, on an `n × n` grid of `α, β ∈ [−0.5, 1.5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub n: usize,
    pub anchors: [LatentParams; 3],
    /// Row-major by α; `None` where the model could not be integrated.
    pub loss: Vec<Option<f64>>,
}

pub const SLICE_RANGE: (f64, f64) = (-0.5, 1.5);

fn grid_coord(i: usize, n: usize) -> f64 {
    SLICE_RANGE.0 + (SLICE_RANGE.1 - SLICE_RANGE.0) * i as f64 / (n - 1) as f64
}

pub fn landscape_slice(
    spec: &ModelSpec,
    seed: u64,
    grid_n: usize,
    solver: &SolverConfig,
    obs: &ObservationSet,
) -> Result<LandscapeGrid> {
    if grid_n < 2 {
        return Err(Error::InvalidArgument(format!("grid size {grid_n} < 2")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || to_latent(&prior_sample(spec, &mut rng), spec);
    let anchors = [draw()?, draw()?, draw()?];
    let objective = ModelObjective::new(spec, obs, solver);
    let loss = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|cell| {
            let (a, b) = (grid_coord(cell / grid_n, grid_n), grid_coord(cell % grid_n, grid_n));
            let z: Vec<f64> = (0..spec.param_dim())
                .map(|k| {
                    let z0 = anchors[0].0[k];
                    z0 + a * (anchors[1].0[k] - z0) + b * (anchors[2].0[k] - z0)
                })
                .collect();
            Some(objective.loss(&z)).filter(|v| v.is_finite())
        })
        .collect();
    Ok(LandscapeGrid {
        n: grid_n,
        anchors,
        loss,
    })
}

impl LandscapeGrid {
    pub fn alpha(&self, i: usize) -> f64 {
        grid_coord(i, self.n)
    }

    pub fn beta(&self, j: usize) -> f64 {
        grid_coord(j, self.n)
    }

    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.loss[i * self.n + j]
    }

    /// CSV with columns `alpha,beta,loss`; failed cells leave `loss` empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "alpha,beta,loss")?;
        for i in 0..self.n {
            for j in 0..self.n {
                match self.at(i, j) {
                    Some(v) => writeln!(w, "{},{},{v}", self.alpha(i), self.beta(j))?,
                    None => writeln!(w, "{},{},", self.alpha(i), self.beta(j))?,
                }
            }
        }
        Ok(())
    }

    /// Interior cells strictly below all eight neighbours, all of which must
    /// have a value.
    pub fn local_minima(&self) -> Vec<(usize, usize)> {
        let mut found = Vec::new();
        for i in 1..self.n.saturating_sub(1) {
            for j in 1..self.n - 1 {
                let Some(v) = self.at(i, j) else { continue };
                let is_min = (i - 1..=i + 1).all(|a| {
                    (j - 1..=j + 1).all(|b| (a, b) == (i, j) || self.at(a, b).is_some_and(|u| v < u))
                });
                if is_min {
                    found.push((i, j));
                }
            }
        }
        found
    }
}

/// Sizes the global rayon pool from `MECHINFER_THREADS` when set.
pub fn init_thread_pool() -> Result<()> {
    let Ok(v) = std::env::var("MECHINFER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("MECHINFER_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}
