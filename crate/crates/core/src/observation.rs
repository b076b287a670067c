//! Synthetic experiments with asynchronous single-channel measurements.
//!
//! Each experiment draws parameters from the prior, integrates the model
//! and samples `n_obs_total` noisy measurements at uniformly random times.
//! Every measurement carries exactly one channel; channels are assigned
//! round-robin and then shuffled, so per-channel counts differ by at most
//! one.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolverError};
use crate::model::{prior_sample, ModelId, ModelSpec, NaturalParams};
use crate::ode::{SolverConfig, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationTriplet {
    /// Hours since the start of the experiment.
    pub time: f64,
    /// Index into `ModelSpec::channel_names`.
    pub channel: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub model_id: ModelId,
    pub triplets: Vec<ObservationTriplet>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.triplets.iter().map(|o| o.value).collect()
    }

    pub fn channel_counts(&self, n_channels: usize) -> Vec<usize> {
        let mut counts = vec![0; n_channels];
        for o in &self.triplets {
            counts[o.channel] += 1;
        }
        counts
    }

    /// Sorted distinct observation times and, for each triplet, the index
    /// of its time in that list.
    pub fn time_grid(&self) -> (Vec<f64>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.triplets.len()).collect();
        order.sort_by(|&a, &b| self.triplets[a].time.total_cmp(&self.triplets[b].time));
        let mut times = Vec::with_capacity(order.len());
        let mut slot = vec![0; order.len()];
        for &j in &order {
            let t = self.triplets[j].time;
            if times.last() != Some(&t) {
                times.push(t);
            }
            slot[j] = times.len() - 1;
        }
        (times, slot)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.model_id != spec.model_id {
            return Err(Error::InvalidArgument(format!(
                "observations belong to model {}, not {}",
                self.model_id, spec.model_id
            )));
        }
        for o in &self.triplets {
            if o.channel >= spec.n_channels() {
                return Err(Error::InvalidArgument(format!("channel {} out of range", o.channel)));
            }
            if !(o.time >= 0.0 && o.time <= spec.horizon) || !o.value.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "observation at t = {} outside [0, {}] or non-finite",
                    o.time, spec.horizon
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub observations: ObservationSet,
    pub true_params: NaturalParams,
    pub seed: u64,
}

/// Noise-free channel values of `params` at each triplet's (time, channel).
pub fn model_outputs(
    spec: &ModelSpec,
    params: &NaturalParams,
    obs: &ObservationSet,
    config: &SolverConfig,
) -> std::result::Result<Vec<f64>, SolverError> {
    let (times, slot) = obs.time_grid();
    let traj = spec.simulate(params, &times, config)?;
    Ok(read_channels(spec, &traj, obs, &slot))
}

fn read_channels(
    spec: &ModelSpec,
    traj: &Trajectory,
    obs: &ObservationSet,
    slot: &[usize],
) -> Vec<f64> {
    obs.triplets
        .iter()
        .zip(slot)
        .map(|(o, &i)| traj.value(i, spec.channel_state(o.channel)))
        .collect()
}

/// Draws one experiment for `params`. `traj_source` integrates the model at
/// the given sorted, distinct query times.
pub fn sample_observations<F, R>(
    traj_source: F,
    params: &NaturalParams,
    spec: &ModelSpec,
    rng: &mut R,
) -> std::result::Result<ObservationSet, SolverError>
where
    F: FnOnce(&NaturalParams, &[f64]) -> std::result::Result<Trajectory, SolverError>,
    R: Rng + ?Sized,
{
    let n = spec.n_obs_total;
    let nc = spec.n_channels();
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=spec.horizon)).collect();
    let mut channels: Vec<usize> = (0..n).map(|i| i % nc).collect();
    channels.shuffle(rng);

    let mut set = ObservationSet {
        model_id: spec.model_id,
        triplets: times
            .iter()
            .zip(&channels)
            .map(|(&time, &channel)| ObservationTriplet {
                time,
                channel,
                value: 0.0,
            })
            .collect(),
    };
    let (grid, slot) = set.time_grid();
    let traj = traj_source(params, &grid)?;
    let clean = read_channels(spec, &traj, &set, &slot);
    for (o, mu) in set.triplets.iter_mut().zip(clean) {
        let eps: f64 = rng.sample(StandardNormal);
        o.value = mu + spec.noise_std[o.channel] * eps;
    }
    Ok(set)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of record `index` in a dataset generated from `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

const MAX_ATTEMPTS_PER_RECORD: usize = 100;
const MIN_DRAWS_FOR_OVERFLOW: usize = 20;

/// Builds the record for `seed`, redrawing parameters whose integration
/// fails. Returns the record and the number of rejected draws.
pub fn generate_record(
    spec: &ModelSpec,
    seed: u64,
    config: &SolverConfig,
) -> Result<(DatasetRecord, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for rejected in 0..MAX_ATTEMPTS_PER_RECORD {
        let theta = prior_sample(spec, &mut rng);
        let source = |p: &NaturalParams, q: &[f64]| spec.simulate(p, q, config);
        match sample_observations(source, &theta, spec, &mut rng) {
            Ok(observations) => {
                return Ok((
                    DatasetRecord {
                        observations,
                        true_params: theta,
                        seed,
                    },
                    rejected,
                ))
            }
            Err(e) => log::debug!("record seed {seed}: rejected draw ({e})"),
        }
    }
    Err(Error::RejectionOverflow {
        rejected: MAX_ATTEMPTS_PER_RECORD,
        draws: MAX_ATTEMPTS_PER_RECORD,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub accepted: usize,
    pub rejected: usize,
}

impl DatasetStats {
    pub fn draws(&self) -> usize {
        self.accepted + self.rejected
    }

    pub fn rejection_rate(&self) -> f64 {
        self.rejected as f64 / self.draws().max(1) as f64
    }

    fn check(&self) -> Result<()> {
        if self.draws() >= MIN_DRAWS_FOR_OVERFLOW && 2 * self.rejected > self.draws() {
            Err(Error::RejectionOverflow {
                rejected: self.rejected,
                draws: self.draws(),
            })
        } else {
            Ok(())
        }
    }
}

/// Streaming dataset generator; see [`generate_dataset`].
pub struct DatasetStream {
    spec: ModelSpec,
    config: SolverConfig,
    seed: u64,
    n: usize,
    next_index: usize,
    stats: DatasetStats,
    failed: bool,
}

impl DatasetStream {
    pub fn stats(&self) -> DatasetStats {
        self.stats
    }
}

impl Iterator for DatasetStream {
    type Item = Result<DatasetRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next_index >= self.n {
            return None;
        }
        let seed = record_seed(self.seed, self.next_index as u64);
        self.next_index += 1;
        let out = generate_record(&self.spec, seed, &self.config).and_then(|(rec, rejected)| {
            self.stats.accepted += 1;
            self.stats.rejected += rejected;
            self.stats.check().map(|_| rec)
        });
        self.failed = out.is_err();
        Some(out)
    }
}

/// Lazily generates `n` independent records from `seed`.
pub fn generate_dataset(
    spec: &ModelSpec,
    n: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<DatasetStream> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    Ok(DatasetStream {
        spec: spec.clone(),
        config: *config,
        seed,
        n,
        next_index: 0,
        stats: DatasetStats::default(),
        failed: false,
    })
}

/// Parallel counterpart of [`generate_dataset`]; produces identical records.
pub fn generate_dataset_par(
    spec: &ModelSpec,
    n: usize,
    seed: u64,
    config: &SolverConfig,
) -> Result<(Vec<DatasetRecord>, DatasetStats)> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let results: Vec<Result<(DatasetRecord, usize)>> = (0..n as u64)
        .into_par_iter()
        .map(|i| generate_record(spec, record_seed(seed, i), config))
        .collect();
    let mut stats = DatasetStats::default();
    let mut records = Vec::with_capacity(n);
    for r in results {
        let (rec, rejected) = r?;
        stats.accepted += 1;
        stats.rejected += rejected;
        records.push(rec);
    }
    stats.check()?;
    Ok((records, stats))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireObs {
    t: f64,
    c: u32,
    v: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    model: ModelId,
    seed: u64,
    params: Vec<f64>,
    obs: Vec<WireObs>,
}

/// Writes floats with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

pub fn write_record<W: Write>(mut writer: W, record: &DatasetRecord) -> Result<()> {
    let wire = WireRecord {
        model: record.observations.model_id,
        seed: record.seed,
        params: record.true_params.0.clone(),
        obs: record
            .observations
            .triplets
            .iter()
            .map(|o| WireObs {
                t: o.time,
                c: o.channel as u32,
                v: o.value,
            })
            .collect(),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut writer, SeventeenDigits);
    wire.serialize(&mut ser)?;
    writer.write_all(b"\n")?;
    Ok(())
}

pub fn write_jsonl<'a, I>(records: I, path: impl AsRef<Path>) -> Result<()>
where
    I: IntoIterator<Item = &'a DatasetRecord>,
{
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        write_record(&mut w, rec)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_record(line: &str) -> std::result::Result<DatasetRecord, String> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let spec = ModelSpec::by_id(wire.model);
    if wire.params.len() != spec.param_dim() {
        return Err(format!(
            "expected {} parameters for {}, found {}",
            spec.param_dim(),
            wire.model,
            wire.params.len()
        ));
    }
    if wire.params.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err("parameters must be finite and positive".into());
    }
    if wire.obs.len() != spec.n_obs_total {
        return Err(format!(
            "expected {} observations for {}, found {}",
            spec.n_obs_total,
            wire.model,
            wire.obs.len()
        ));
    }
    let observations = ObservationSet {
        model_id: wire.model,
        triplets: wire
            .obs
            .into_iter()
            .map(|o| ObservationTriplet {
                time: o.t,
                channel: o.c as usize,
                value: o.v,
            })
            .collect(),
    };
    observations.validate(&spec).map_err(|e| e.to_string())?;
    Ok(DatasetRecord {
        observations,
        true_params: NaturalParams(wire.params),
        seed: wire.seed,
    })
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line).map_err(|msg| Error::Schema { line: i + 1, msg })?);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    read_records(BufReader::new(File::open(path)?))
}
