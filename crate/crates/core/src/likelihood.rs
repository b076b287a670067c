//! Gaussian noise model, negative log-likelihood, the prior-whitening
//! parameter transform and the noise-weighted R² used for benchmarking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, NaturalParams};
use crate::observation::{model_outputs, DatasetRecord, ObservationSet};
use crate::ode::SolverConfig;

/// Parameters mapped into the standard-normal image of the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentParams(pub Vec<f64>);

impl LatentParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `z_i = (ln θ_i − log_mean_i) / log_std_i`.
pub fn to_latent(theta: &NaturalParams, spec: &ModelSpec) -> Result<LatentParams> {
    if theta.len() != spec.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters for a {}-parameter model",
            theta.len(),
            spec.param_dim()
        )));
    }
    theta
        .0
        .iter()
        .zip(&spec.prior_meta)
        .enumerate()
        .map(|(index, (&value, p))| {
            if value > 0.0 && value.is_finite() {
                Ok((value.ln() - p.log_mean) / p.log_std)
            } else {
                Err(Error::NonPositiveParam { index, value })
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(LatentParams)
}

pub fn from_latent(z: &LatentParams, spec: &ModelSpec) -> NaturalParams {
    from_latent_slice(&z.0, spec)
}

pub(crate) fn from_latent_slice(z: &[f64], spec: &ModelSpec) -> NaturalParams {
    NaturalParams(
        z.iter()
            .zip(&spec.prior_meta)
            .map(|(&zi, p)| (p.log_mean + p.log_std * zi).exp())
            .collect(),
    )
}

/// Independent Gaussian measurement noise with a fixed std per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub std: Vec<f64>,
}

impl NoiseModel {
    pub fn from_spec(spec: &ModelSpec) -> Self {
        NoiseModel {
            std: spec.noise_std.clone(),
        }
    }
}

/// Model predictions at every observation for latent parameters `z`.
pub fn predict_observations(
    z: &LatentParams,
    obs: &ObservationSet,
    spec: &ModelSpec,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    predict_slice(&z.0, obs, spec, config)
}

pub(crate) fn predict_slice(
    z: &[f64],
    obs: &ObservationSet,
    spec: &ModelSpec,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    if z.len() != spec.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "latent vector of length {} for a {}-parameter model",
            z.len(),
            spec.param_dim()
        )));
    }
    let theta = from_latent_slice(z, spec);
    model_outputs(spec, &theta, obs, config).map_err(Error::EvalFailed)
}

/// Full Gaussian negative log-likelihood, constants included.
pub fn nll(obs: &ObservationSet, mu: &[f64], noise: &NoiseModel) -> f64 {
    assert_eq!(obs.len(), mu.len(), "one prediction per observation");
    let log_sqrt_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    obs.triplets
        .iter()
        .zip(mu)
        .map(|(o, &m)| {
            let s = noise.std[o.channel];
            let r = (o.value - m) / s;
            0.5 * r * r + s.ln() + log_sqrt_2pi
        })
        .sum()
}

/// The residual part of [`nll`]: `Σ (x − μ)² / (2σ²)`.
pub fn weighted_sse(obs: &ObservationSet, mu: &[f64], noise: &NoiseModel) -> f64 {
    obs.triplets
        .iter()
        .zip(mu)
        .map(|(o, &m)| {
            let r = (o.value - m) / noise.std[o.channel];
            0.5 * r * r
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub value: f64,
    pub std_err: f64,
}

/// R² against noisy observations and against the noise-free truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RSquaredReport {
    pub observed: RSquared,
    pub truth: RSquared,
    /// Records whose estimate could not be evaluated.
    pub n_failed: usize,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0x5EED_0F_B007;

/// Per-record sufficient statistics, one entry per channel.
#[derive(Debug, Clone)]
struct RecordStats {
    n: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    /// `Σ (x − μ̂)²`, or `None` when the estimate failed.
    sse: Option<Vec<f64>>,
}

fn record_stats(
    channels: &[usize],
    targets: &[f64],
    prediction: Option<&[f64]>,
    n_channels: usize,
) -> RecordStats {
    let mut st = RecordStats {
        n: vec![0.0; n_channels],
        sum: vec![0.0; n_channels],
        sum_sq: vec![0.0; n_channels],
        sse: prediction.map(|_| vec![0.0; n_channels]),
    };
    for (j, (&c, &x)) in channels.iter().zip(targets).enumerate() {
        st.n[c] += 1.0;
        st.sum[c] += x;
        st.sum_sq[c] += x * x;
        if let (Some(sse), Some(mu)) = (st.sse.as_mut(), prediction) {
            let r = x - mu[j];
            sse[c] += r * r;
        }
    }
    st
}

fn pooled_value(stats: &[RecordStats], picks: impl Iterator<Item = usize> + Clone, w: &[f64]) -> f64 {
    let nc = w.len();
    let mut n = vec![0.0; nc];
    let mut sum = vec![0.0; nc];
    let mut sum_sq = vec![0.0; nc];
    for i in picks.clone() {
        for c in 0..nc {
            n[c] += stats[i].n[c];
            sum[c] += stats[i].sum[c];
            sum_sq[c] += stats[i].sum_sq[c];
        }
    }
    let mean: Vec<f64> = (0..nc)
        .map(|c| if n[c] > 0.0 { sum[c] / n[c] } else { 0.0 })
        .collect();
    let mut sse = 0.0;
    for i in picks {
        let st = &stats[i];
        for c in 0..nc {
            let e = match &st.sse {
                Some(s) => s[c],
                None => st.sum_sq[c] - 2.0 * mean[c] * st.sum[c] + st.n[c] * mean[c] * mean[c],
            };
            sse += w[c] * e;
        }
    }
    let sst: f64 = (0..nc)
        .map(|c| w[c] * (sum_sq[c] - n[c] * mean[c] * mean[c]))
        .sum();
    1.0 - sse / sst
}

/// Pooled inverse-noise-variance weighted R² with a bootstrap standard
/// error over records. `predictions[i] = None` marks a failed estimate,
/// which is scored as the pooled channel-mean predictor.
pub fn pooled_r_squared(
    channels: &[Vec<usize>],
    targets: &[Vec<f64>],
    predictions: &[Option<Vec<f64>>],
    noise: &NoiseModel,
) -> RSquared {
    assert_eq!(channels.len(), targets.len());
    assert_eq!(channels.len(), predictions.len());
    let nc = noise.std.len();
    let w: Vec<f64> = noise.std.iter().map(|s| 1.0 / (s * s)).collect();
    let stats: Vec<RecordStats> = channels
        .iter()
        .zip(targets)
        .zip(predictions)
        .map(|((c, t), p)| record_stats(c, t, p.as_deref(), nc))
        .collect();
    let n = stats.len();
    let value = pooled_value(&stats, 0..n, &w);

    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut picks = vec![0usize; n];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for p in picks.iter_mut() {
            *p = rng.random_range(0..n);
        }
        boot.push(pooled_value(&stats, picks.iter().copied(), &w));
    }
    RSquared {
        value,
        std_err: std_dev(&boot),
    }
}

pub(crate) fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Scores predictions made for `records` (one optional prediction vector
/// per record, aligned with its triplets).
pub fn r_squared_from_predictions(
    records: &[DatasetRecord],
    predictions: &[Option<Vec<f64>>],
    spec: &ModelSpec,
    config: &SolverConfig,
) -> Result<RSquaredReport> {
    if records.len() != predictions.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    let noise = NoiseModel::from_spec(spec);
    let channels: Vec<Vec<usize>> = records
        .iter()
        .map(|r| r.observations.triplets.iter().map(|o| o.channel).collect())
        .collect();
    let observed: Vec<Vec<f64>> = records.iter().map(|r| r.observations.values()).collect();
    let truth: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| model_outputs(spec, &r.true_params, &r.observations, config))
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::EvalFailed)?;
    Ok(RSquaredReport {
        observed: pooled_r_squared(&channels, &observed, predictions, &noise),
        truth: pooled_r_squared(&channels, &truth, predictions, &noise),
        n_failed: predictions.iter().filter(|p| p.is_none()).count(),
    })
}

/// Evaluates the model at each estimate and scores it.
pub fn r_squared(
    records: &[DatasetRecord],
    estimates: &[LatentParams],
    spec: &ModelSpec,
    config: &SolverConfig,
) -> Result<RSquaredReport> {
    if records.len() != estimates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {} records",
            estimates.len(),
            records.len()
        )));
    }
    let predictions: Vec<Option<Vec<f64>>> = records
        .par_iter()
        .zip(estimates.par_iter())
        .map(|(r, z)| predict_observations(z, &r.observations, spec, config).ok())
        .collect();
    r_squared_from_predictions(records, &predictions, spec, config)
}
