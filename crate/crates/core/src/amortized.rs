//! Amortized inference: a proxy network that emulates the mechanistic
//! model, a Deep Set inference network trained through the frozen proxy,
//! and optional fine-tuning of that network against the real solver.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fitting::{ModelObjective, Objective, FD_STEP};
use crate::likelihood::{
    predict_observations, r_squared_from_predictions, to_latent, weighted_sse, LatentParams,
    NoiseModel,
};
use crate::model::{ModelId, ModelSpec};
use crate::neural::{
    load_weights, save_weights, Activation, Adam, AdamConfig, DeepSet, DeepSetGrad, Mlp, SetBatch,
    Tensors, WeightHeader,
};
use crate::observation::{model_outputs, DatasetRecord, ObservationSet};
use crate::ode::SolverConfig;

pub const PHI_WIDTH: usize = 64;
pub const RHO_WIDTH: usize = 64;
pub const PROXY_WIDTH: usize = 128;

/// Width of one triplet feature: normalized time, normalized value and a
/// one-hot channel.
pub fn feature_dim(spec: &ModelSpec) -> usize {
    2 + spec.n_channels()
}

/// One feature row per triplet, in triplet order.
pub fn featurize(obs: &ObservationSet, spec: &ModelSpec) -> Array2<f64> {
    let mut f = Array2::zeros((obs.len(), feature_dim(spec)));
    for (mut row, o) in f.outer_iter_mut().zip(&obs.triplets) {
        row[0] = o.time / spec.horizon;
        row[1] = o.value / spec.channel_scale[o.channel];
        row[2 + o.channel] = 1.0;
    }
    f
}

fn channel_of(feature_row: &[f64]) -> usize {
    feature_row[2..]
        .iter()
        .position(|&v| v > 0.5)
        .expect("features carry a one-hot channel")
}

/// Network emulating the model: `(z, t/horizon, one-hot channel)` to the
/// channel value divided by its scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Proxy {
    pub net: Mlp,
    pub model: ModelId,
    pub seed: u64,
}

impl Proxy {
    pub fn input_dim(spec: &ModelSpec) -> usize {
        spec.param_dim() + 1 + spec.n_channels()
    }

    pub fn new(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(
            &[Self::input_dim(spec), PROXY_WIDTH, PROXY_WIDTH, 1],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        Proxy {
            net,
            model: spec.model_id,
            seed,
        }
    }

    /// Emulated channel values at each triplet of `obs` for latent `z`.
    pub fn predict(&self, z: &LatentParams, obs: &ObservationSet, spec: &ModelSpec) -> Result<Vec<f64>> {
        let features = featurize(obs, spec);
        let z = Array2::from_shape_vec((1, z.0.len()), z.0.clone())
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let out = self.net.predict(proxy_inputs(z.view(), &features, &[0, obs.len()]).view())?;
        Ok(obs
            .triplets
            .iter()
            .zip(out.column(0))
            .map(|(o, v)| v * spec.channel_scale[o.channel])
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = WeightHeader::new("proxy", self.model.as_str(), self.seed, &[("proxy", &self.net)]);
        save_weights(path, &header, &[&self.net])
    }

    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let (header, mut nets) = load_weights(path)?;
        check_header(&header, "proxy", spec, 1)?;
        let net = nets.pop().expect("one network");
        if net.input_dim() != Self::input_dim(spec) || net.output_dim() != 1 {
            return Err(Error::WeightFormat("proxy dimensions do not fit the model".into()));
        }
        Ok(Proxy {
            net,
            model: spec.model_id,
            seed: header.seed,
        })
    }
}

fn check_header(header: &WeightHeader, kind: &str, spec: &ModelSpec, n_nets: usize) -> Result<()> {
    if header.kind != kind {
        return Err(Error::WeightFormat(format!("expected {kind} weights, found {}", header.kind)));
    }
    if header.model != spec.model_id.as_str() {
        return Err(Error::WeightFormat(format!(
            "weights were trained for {}, not {}",
            header.model, spec.model_id
        )));
    }
    if header.nets.len() != n_nets {
        return Err(Error::WeightFormat(format!(
            "expected {n_nets} networks, found {}",
            header.nets.len()
        )));
    }
    Ok(())
}

/// Proxy input rows for the feature rows of a set batch: set `b` contributes
/// `z[b] ⧺ t ⧺ one-hot` for each of its rows.
fn proxy_inputs(z: ArrayView2<f64>, features: &Array2<f64>, offsets: &[usize]) -> Array2<f64> {
    let p = z.ncols();
    let n_ch = features.ncols() - 2;
    let mut x = Array2::zeros((features.nrows(), p + 1 + n_ch));
    for b in 0..offsets.len() - 1 {
        for r in offsets[b]..offsets[b + 1] {
            let mut row = x.row_mut(r);
            row.slice_mut(s![..p]).assign(&z.row(b));
            row[p] = features[[r, 0]];
            row.slice_mut(s![p + 1..]).assign(&features.slice(s![r, 2..]));
        }
    }
    x
}

/// Deep Set mapping a featurized observation set to latent parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNet {
    pub net: DeepSet,
    pub model: ModelId,
    pub seed: u64,
    /// Optimizer steps of the proxy-based training phase.
    pub train_steps: u64,
    pub fine_tuned: bool,
}

impl InferenceNet {
    pub fn new(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Mlp::new(
            &[feature_dim(spec), PHI_WIDTH, PHI_WIDTH, PHI_WIDTH],
            Activation::Tanh,
            Activation::Tanh,
            &mut rng,
        );
        let rho = Mlp::new(
            &[PHI_WIDTH, RHO_WIDTH, spec.param_dim()],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        );
        InferenceNet {
            net: DeepSet::new(phi, rho).expect("matching widths"),
            model: spec.model_id,
            seed,
            train_steps: 0,
            fine_tuned: false,
        }
    }

    /// Latent estimate for one observation set; never calls the solver.
    pub fn infer(&self, obs: &ObservationSet, spec: &ModelSpec) -> Result<LatentParams> {
        let z = self.net.forward(featurize(obs, spec).view())?;
        Ok(LatentParams(z.to_vec()))
    }

    pub fn infer_batch(&self, sets: &[&ObservationSet], spec: &ModelSpec) -> Result<Vec<LatentParams>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(512) {
            let features: Vec<Array2<f64>> = chunk.iter().map(|o| featurize(o, spec)).collect();
            let views: Vec<_> = features.iter().map(|f| f.view()).collect();
            let cache = self.net.forward_batch(&SetBatch::new(&views)?)?;
            out.extend(cache.output().outer_iter().map(|r| LatentParams(r.to_vec())));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = WeightHeader::new(
            "infnet",
            self.model.as_str(),
            self.seed,
            &[("phi", &self.net.phi), ("rho", &self.net.rho)],
        );
        header.metadata.insert("train_steps".into(), self.train_steps.into());
        header.metadata.insert("fine_tuned".into(), self.fine_tuned.into());
        save_weights(path, &header, &[&self.net.phi, &self.net.rho])
    }

    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let (header, mut nets) = load_weights(path)?;
        check_header(&header, "infnet", spec, 2)?;
        let rho = nets.pop().expect("two networks");
        let phi = nets.pop().expect("two networks");
        if phi.input_dim() != feature_dim(spec) || rho.output_dim() != spec.param_dim() {
            return Err(Error::WeightFormat("inference network dimensions do not fit the model".into()));
        }
        let net = DeepSet::new(phi, rho).map_err(|e| Error::WeightFormat(e.to_string()))?;
        Ok(InferenceNet {
            net,
            model: spec.model_id,
            seed: header.seed,
            train_steps: header.metadata.get("train_steps").and_then(|v| v.as_u64()).unwrap_or(0),
            fine_tuned: header.metadata.get("fine_tuned").and_then(|v| v.as_bool()).unwrap_or(false),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the last epoch relative to `lr`; the rate decays
    /// geometrically in between.
    pub final_lr_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn proxy() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            lr: 2e-3,
            final_lr_fraction: 0.05,
            val_fraction: 0.05,
            seed: 11,
        }
    }

    pub fn inference() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            final_lr_fraction: 0.05,
            val_fraction: 0.05,
            seed: 12,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr;
        }
        self.lr * self.final_lr_fraction.powf(epoch as f64 / (self.epochs - 1) as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!("bad training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// Appends rows to a CSV file, writing the header if the file is new.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "epoch,train_loss,val_loss,wall_time")?;
        }
        for e in &self.epochs {
            writeln!(f, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.wall_time)?;
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` split into (train, validation).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if val_fraction > 0.0 && n >= 2 {
        ((n as f64 * val_fraction).ceil() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let train = idx.split_off(n_val);
    (train, idx)
}

fn check_finite(loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} became {loss}")))
    }
}

/// Mean squared error of `net` on the rows `idx` of `(x, y)`.
fn regression_mse(net: &Mlp, x: &Array2<f64>, y: &Array1<f64>, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sse = 0.0;
    for chunk in idx.chunks(4096) {
        let pred = net.predict(x.select(Axis(0), chunk).view())?;
        sse += chunk
            .iter()
            .zip(pred.column(0))
            .map(|(&i, p)| (p - y[i]).powi(2))
            .sum::<f64>();
    }
    Ok(sse / idx.len() as f64)
}

/// Minibatch Adam on mean squared error of a scalar-output network.
fn train_regressor(
    net: &mut Mlp,
    x: &Array2<f64>,
    y: &Array1<f64>,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<(TrainLog, u64)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
    let mut adam = Adam::new(net.n_params(), AdamConfig::default());
    let mut order = train.to_vec();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let cache = net.forward(x.select(Axis(0), batch).view())?;
            let mut d = cache.output().clone();
            for (g, &i) in d.column_mut(0).iter_mut().zip(batch) {
                let r = *g - y[i];
                sse += r * r;
                *g = 2.0 * r / batch.len() as f64;
            }
            let (_, grads) = net.backward(&cache, d.view())?;
            adam.step(net, &grads, lr);
        }
        let train_loss = sse / order.len().max(1) as f64;
        check_finite(train_loss, "training MSE")?;
        let val_loss = regression_mse(net, x, y, val)?;
        if !val.is_empty() {
            check_finite(val_loss, "validation MSE")?;
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((log, adam.steps() as u64))
}

/// Proxy training pairs: inputs `(z_true, t, one-hot)` and noise-free
/// normalized targets, one row per (record, triplet). Returns the row range
/// of each record; records the solver cannot reproduce get an empty range.
fn proxy_pairs(
    records: &[DatasetRecord],
    spec: &ModelSpec,
    solver: &SolverConfig,
) -> Result<(Array2<f64>, Array1<f64>, Vec<std::ops::Range<usize>>)> {
    let per_record: Vec<Option<(Array2<f64>, Vec<f64>)>> = records
        .par_iter()
        .map(|r| {
            let z = to_latent(&r.true_params, spec).ok()?;
            let truth = model_outputs(spec, &r.true_params, &r.observations, solver).ok()?;
            let features = featurize(&r.observations, spec);
            let zrow = Array2::from_shape_vec((1, z.0.len()), z.0).ok()?;
            let x = proxy_inputs(zrow.view(), &features, &[0, features.nrows()]);
            let y = r
                .observations
                .triplets
                .iter()
                .zip(truth)
                .map(|(o, v)| v / spec.channel_scale[o.channel])
                .collect();
            Some((x, y))
        })
        .collect();
    let n_rows: usize = per_record.iter().flatten().map(|(x, _)| x.nrows()).sum();
    let mut x = Array2::zeros((n_rows, Proxy::input_dim(spec)));
    let mut y = Vec::with_capacity(n_rows);
    let mut ranges = Vec::with_capacity(records.len());
    let mut at = 0;
    for item in per_record {
        match item {
            Some((xr, yr)) => {
                x.slice_mut(s![at..at + xr.nrows(), ..]).assign(&xr);
                ranges.push(at..at + xr.nrows());
                at += xr.nrows();
                y.extend(yr);
            }
            None => ranges.push(at..at),
        }
    }
    let skipped = ranges.iter().filter(|r| r.is_empty()).count();
    if skipped > 0 {
        log::warn!("{skipped} records could not be simulated and were left out of proxy training");
    }
    Ok((x, Array1::from(y), ranges))
}

/// Fits the proxy to noise-free model outputs at the records' own
/// observation points.
pub fn train_proxy(
    records: &[DatasetRecord],
    spec: &ModelSpec,
    solver: &SolverConfig,
    cfg: &TrainConfig,
) -> Result<(Proxy, TrainLog)> {
    cfg.validate()?;
    if records.len() < cfg.batch_size.min(2) {
        return Err(Error::InvalidArgument("too few records to train on".into()));
    }
    let (x, y, ranges) = proxy_pairs(records, spec, solver)?;
    let (train_rec, val_rec) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let rows = |recs: &[usize]| -> Vec<usize> { recs.iter().flat_map(|&r| ranges[r].clone()).collect() };
    let (train, val) = (rows(&train_rec), rows(&val_rec));
    let mut proxy = Proxy::new(spec, cfg.seed);
    let (log, _) = train_regressor(&mut proxy.net, &x, &y, &train, &val, cfg)?;
    Ok((proxy, log))
}

/// Mean squared normalized error of the proxy against the solver, per
/// channel, at the observation points of `records` and their true
/// parameters.
pub fn proxy_channel_mse(
    proxy: &Proxy,
    records: &[DatasetRecord],
    spec: &ModelSpec,
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    let mut sse = vec![0.0; spec.n_channels()];
    let mut count = vec![0usize; spec.n_channels()];
    for r in records {
        let z = to_latent(&r.true_params, spec)?;
        let truth = model_outputs(spec, &r.true_params, &r.observations, solver).map_err(Error::EvalFailed)?;
        let pred = proxy.predict(&z, &r.observations, spec)?;
        for ((o, t), p) in r.observations.triplets.iter().zip(truth).zip(pred) {
            let scale = spec.channel_scale[o.channel];
            sse[o.channel] += ((t - p) / scale).powi(2);
            count[o.channel] += 1;
        }
    }
    Ok(sse.iter().zip(count).map(|(s, n)| s / n.max(1) as f64).collect())
}

/// Featurized records together with the per-channel loss weights
/// `scale² / σ²` used on normalized residuals.
struct SetData {
    features: Vec<Array2<f64>>,
    weights: Vec<f64>,
}

impl SetData {
    fn new(records: &[DatasetRecord], spec: &ModelSpec) -> Self {
        SetData {
            features: records.iter().map(|r| featurize(&r.observations, spec)).collect(),
            weights: spec
                .channel_scale
                .iter()
                .zip(&spec.noise_std)
                .map(|(k, s)| (k / s).powi(2))
                .collect(),
        }
    }

    fn batch(&self, idx: &[usize]) -> Result<SetBatch> {
        let views: Vec<_> = idx.iter().map(|&i| self.features[i].view()).collect();
        SetBatch::new(&views)
    }
}

/// Mean over sets of `Σ_j w_c (v_j − proxy_j)² / 2`, the weighted squared
/// error of the proxy prediction at the network's estimate, and optionally
/// the gradient w.r.t. the Deep Set parameters. The proxy stays constant.
fn proxy_loss(
    net: &DeepSet,
    proxy: &Mlp,
    batch: &SetBatch,
    weights: &[f64],
    grads: Option<&mut DeepSetGrad>,
) -> Result<f64> {
    let cache = net.forward_batch(batch)?;
    let z = cache.output();
    let features = batch.features();
    let offsets = batch.offsets();
    let n_sets = batch.n_sets() as f64;
    let inputs = proxy_inputs(z.view(), features, offsets);
    let p_cache = proxy.forward(inputs.view())?;
    let pred = p_cache.output();
    let mut loss = 0.0;
    let mut d_pred = Array2::zeros(pred.dim());
    for r in 0..features.nrows() {
        let w = weights[channel_of(features.row(r).as_slice().expect("contiguous"))];
        let res = features[[r, 1]] - pred[[r, 0]];
        loss += 0.5 * w * res * res;
        d_pred[[r, 0]] = -w * res / n_sets;
    }
    if let Some(grads) = grads {
        let d_inputs = proxy.backward_input(&p_cache, d_pred.view())?;
        let p = z.ncols();
        let mut d_z = Array2::zeros(z.dim());
        for b in 0..batch.n_sets() {
            let rows = d_inputs.slice(s![offsets[b]..offsets[b + 1], ..p]);
            d_z.row_mut(b).assign(&rows.sum_axis(Axis(0)));
        }
        net.backward_into(&cache, d_z.view(), grads)?;
    }
    Ok(loss / n_sets)
}

fn mean_proxy_loss(net: &DeepSet, proxy: &Mlp, data: &SetData, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        total += proxy_loss(net, proxy, &data.batch(chunk)?, &data.weights, None)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains the Deep Set by backpropagating the weighted squared error of the
/// frozen proxy's emulated observations.
pub fn train_inference_net(
    records: &[DatasetRecord],
    proxy: &Proxy,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(InferenceNet, TrainLog)> {
    cfg.validate()?;
    if proxy.model != spec.model_id || proxy.net.input_dim() != Proxy::input_dim(spec) {
        return Err(Error::DimensionMismatch("proxy was built for another model".into()));
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument("too few records to train on".into()));
    }
    let start = Instant::now();
    let data = SetData::new(records, spec);
    let (mut order, val) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let mut infnet = InferenceNet::new(spec, cfg.seed);
    let mut adam = Adam::new(infnet.net.n_params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9);
    let mut grads = infnet.net.zero_grad();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            grads.scale(0.0);
            let batch = data.batch(chunk)?;
            total += proxy_loss(&infnet.net, &proxy.net, &batch, &data.weights, Some(&mut grads))?
                * chunk.len() as f64;
            adam.step(&mut infnet.net, &grads, lr);
        }
        let train_loss = total / order.len() as f64;
        check_finite(train_loss, "training loss")?;
        let val_loss = mean_proxy_loss(&infnet.net, &proxy.net, &data, &val)?;
        if !val.is_empty() {
            check_finite(val_loss, "validation loss")?;
        }
        log::debug!("epoch {epoch}: train {train_loss:.4e} val {val_loss:.4e}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    infnet.train_steps = adam.steps() as u64;
    Ok((infnet, log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Validation R² is checked every `eval_every` steps.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub fd_step: f64,
}

impl FineTuneConfig {
    /// 5% of the main phase's optimizer steps at a tenth of the learning
    /// rate it finished with.
    pub fn after(main: &TrainConfig, main_steps: u64) -> Self {
        let steps = ((main_steps as f64) * 0.05).ceil() as usize;
        FineTuneConfig {
            steps,
            batch_size: main.batch_size,
            lr: main.lr_at(main.epochs.saturating_sub(1)) / 10.0,
            eval_every: (steps / 10).max(1),
            patience: 3,
            val_fraction: main.val_fraction,
            seed: main.seed ^ 0xF1E,
            fd_step: FD_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneReport {
    pub initial_val_r2: f64,
    pub best_val_r2: f64,
    /// Step at which the returned parameters were taken; 0 means unchanged.
    pub best_step: usize,
    pub steps_run: usize,
    /// Record evaluations dropped because the solver failed.
    pub skipped: usize,
    pub log: TrainLog,
}

/// Mean NLL under the real model at the network's estimates for the sets
/// `idx`, and the Deep Set gradient obtained by chaining finite-difference
/// latent gradients into the network's backward pass. Records the solver
/// cannot evaluate are skipped and counted.
#[allow(clippy::too_many_arguments)]
fn model_loss(
    net: &DeepSet,
    records: &[DatasetRecord],
    data: &SetData,
    idx: &[usize],
    spec: &ModelSpec,
    solver: &SolverConfig,
    fd_step: f64,
    grads: &mut DeepSetGrad,
) -> Result<(f64, usize)> {
    let batch = data.batch(idx)?;
    let cache = net.forward_batch(&batch)?;
    let z = cache.output();
    let per_record: Vec<(f64, Vec<f64>)> = idx
        .par_iter()
        .enumerate()
        .map(|(b, &i)| {
            let zb = z.row(b).to_vec();
            ModelObjective::new(spec, &records[i].observations, solver)
                .with_step(fd_step)
                .loss_and_grad(&zb)
        })
        .collect();
    let ok: Vec<bool> = per_record
        .iter()
        .map(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()))
        .collect();
    let n_ok = ok.iter().filter(|&&b| b).count();
    let skipped = idx.len() - n_ok;
    if n_ok == 0 {
        return Ok((f64::NAN, skipped));
    }
    let mut d_z = Array2::zeros(z.dim());
    let mut loss = 0.0;
    for (b, (f, g)) in per_record.iter().enumerate() {
        if ok[b] {
            loss += f;
            for (d, gi) in d_z.row_mut(b).iter_mut().zip(g) {
                *d = gi / n_ok as f64;
            }
        }
    }
    net.backward_into(&cache, d_z.view(), grads)?;
    Ok((loss / n_ok as f64, skipped))
}

/// Pooled R² (against noisy observations) and mean weighted squared error
/// of the network's estimates on `records`.
fn validation_score(
    infnet: &InferenceNet,
    records: &[DatasetRecord],
    spec: &ModelSpec,
    solver: &SolverConfig,
) -> Result<(f64, f64)> {
    let sets: Vec<&ObservationSet> = records.iter().map(|r| &r.observations).collect();
    let estimates = infnet.infer_batch(&sets, spec)?;
    let predictions: Vec<Option<Vec<f64>>> = records
        .par_iter()
        .zip(&estimates)
        .map(|(r, z)| predict_observations(z, &r.observations, spec, solver).ok())
        .collect();
    let noise = NoiseModel::from_spec(spec);
    let (sse, n) = records
        .iter()
        .zip(&predictions)
        .filter_map(|(r, p)| p.as_ref().map(|p| weighted_sse(&r.observations, p, &noise)))
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let report = r_squared_from_predictions(records, &predictions, spec, solver)?;
    Ok((report.observed.value, sse / n.max(1) as f64))
}

/// Continues training against the real solver, keeping the parameters with
/// the best validation R² seen (the starting point included).
pub fn fine_tune_with_model(
    infnet: &InferenceNet,
    records: &[DatasetRecord],
    spec: &ModelSpec,
    solver: &SolverConfig,
    cfg: &FineTuneConfig,
) -> Result<(InferenceNet, FineTuneReport)> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("bad fine-tuning configuration {cfg:?}")));
    }
    let start = Instant::now();
    let data = SetData::new(records, spec);
    let (mut order, val_idx) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<DatasetRecord> = val_idx.iter().map(|&i| records[i].clone()).collect();
    let (initial_r2, initial_sse) = if cfg.steps > 0 {
        validation_score(infnet, &val, spec, solver)?
    } else {
        (f64::NAN, f64::NAN)
    };

    let mut current = infnet.clone();
    let mut best = infnet.clone();
    let mut report = FineTuneReport {
        initial_val_r2: initial_r2,
        best_val_r2: initial_r2,
        best_step: 0,
        steps_run: 0,
        skipped: 0,
        log: TrainLog::default(),
    };
    report.log.epochs.push(EpochLog {
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: initial_sse,
        wall_time: start.elapsed().as_secs_f64(),
    });
    let mut adam = Adam::new(current.net.n_params(), AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = current.net.zero_grad();
    let mut cursor = order.len();
    let mut since_eval = (0.0, 0usize);
    let mut stale = 0;
    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let chunk = &order[cursor..(cursor + cfg.batch_size).min(order.len())];
        cursor += chunk.len();
        grads.scale(0.0);
        let (loss, skipped) = model_loss(
            &current.net,
            records,
            &data,
            chunk,
            spec,
            solver,
            cfg.fd_step,
            &mut grads,
        )?;
        report.skipped += skipped;
        report.steps_run = step;
        if loss.is_finite() {
            adam.step(&mut current.net, &grads, cfg.lr);
            since_eval = (since_eval.0 + loss, since_eval.1 + 1);
        }
        if !current.net.is_finite() {
            return Err(Error::Diverged("fine-tuning produced non-finite weights".into()));
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (r2, sse) = validation_score(&current, &val, spec, solver)?;
            report.log.epochs.push(EpochLog {
                epoch: step,
                train_loss: since_eval.0 / since_eval.1.max(1) as f64,
                val_loss: sse,
                wall_time: start.elapsed().as_secs_f64(),
            });
            since_eval = (0.0, 0);
            log::debug!("fine-tune step {step}: val R² {r2:.5}");
            if r2 > report.best_val_r2 {
                report.best_val_r2 = r2;
                report.best_step = step;
                best = current.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if report.steps_run > 0 {
        best.fine_tuned = true;
    }
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::nll;
    use crate::model::NaturalParams;
    use crate::observation::{generate_dataset_par, ObservationTriplet};

    fn mmk_records(n: usize, seed: u64) -> Vec<DatasetRecord> {
        generate_dataset_par(&ModelSpec::mmk(), n, seed, &SolverConfig::default())
            .unwrap()
            .0
    }

    #[test]
    fn features_of_simple_triplets() {
        let spec = ModelSpec::mmk();
        let obs = ObservationSet {
            model_id: ModelId::Mmk,
            triplets: vec![
                ObservationTriplet { time: 0.0, channel: 0, value: 0.0 },
                ObservationTriplet { time: spec.horizon, channel: 1, value: 0.5 },
            ],
        };
        let f = featurize(&obs, &spec);
        assert_eq!(f.row(0).to_vec(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(f.row(1).to_vec(), vec![1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn mmk_feature_set_shape() {
        let spec = ModelSpec::mmk();
        let r = &mmk_records(1, 3)[0];
        let f = featurize(&r.observations, &spec);
        assert_eq!(f.dim(), (14, 4));
        for row in f.outer_iter() {
            assert!((0.0..=1.0).contains(&row[0]));
            assert_eq!(row.slice(s![2..]).sum(), 1.0);
        }
    }

    #[test]
    fn constant_targets_are_learned_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((2000, 6), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let y = Array1::from_elem(2000, 0.37);
        let (train, val) = split_indices(2000, 0.1, 2);
        let mut net = Mlp::new(&[6, 32, 32, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            lr: 1e-2,
            final_lr_fraction: 0.1,
            val_fraction: 0.1,
            seed: 3,
        };
        let (log, _) = train_regressor(&mut net, &x, &y, &train, &val, &cfg).unwrap();
        assert!(log.last().unwrap().val_loss < 1e-4, "{:?}", log);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (train, val) = split_indices(100, 0.05, 9);
        assert_eq!(val.len(), 5);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.05, 9), (train, val));
    }

    /// Proxy stand-in that calls the solver, with its exact latent gradient
    /// replaced by finite differences.
    fn exact_loss(spec: &ModelSpec, r: &DatasetRecord, z: &LatentParams) -> f64 {
        let noise = NoiseModel::from_spec(spec);
        let mu = predict_observations(z, &r.observations, spec, &SolverConfig::default()).unwrap();
        weighted_sse(&r.observations, &mu, &noise)
    }

    #[test]
    fn perfect_proxy_loss_vanishes_on_noiseless_data() {
        let spec = ModelSpec::mmk();
        let cfg = SolverConfig::default();
        for mut r in mmk_records(5, 4) {
            let truth = model_outputs(&spec, &r.true_params, &r.observations, &cfg).unwrap();
            for (o, v) in r.observations.triplets.iter_mut().zip(truth) {
                o.value = v;
            }
            let z = to_latent(&r.true_params, &spec).unwrap();
            assert_eq!(exact_loss(&spec, &r, &z), 0.0);
        }
    }

    #[test]
    fn loss_matches_nll_up_to_constants() {
        let spec = ModelSpec::mmk();
        let noise = NoiseModel::from_spec(&spec);
        let constant: f64 = |obs: &ObservationSet| -> f64 {
            obs.triplets
                .iter()
                .map(|o| 0.5 * (2.0 * std::f64::consts::PI).ln() + noise.std[o.channel].ln())
                .sum()
        }(&mmk_records(1, 5)[0].observations);
        for r in mmk_records(10, 5) {
            let z = LatentParams(vec![0.3, -0.2, 0.1]);
            let mu = predict_observations(&z, &r.observations, &spec, &SolverConfig::default()).unwrap();
            let full = nll(&r.observations, &mu, &noise);
            let dropped = exact_loss(&spec, &r, &z);
            assert!((full - dropped - constant).abs() <= 1e-8 * full.abs().max(1.0));
        }
    }

    #[test]
    fn proxy_loss_gradient_matches_finite_differences() {
        let spec = ModelSpec::mmk();
        let records = mmk_records(6, 6);
        let data = SetData::new(&records, &spec);
        let proxy = Proxy::new(&spec, 7);
        let infnet = InferenceNet::new(&spec, 8);
        let idx: Vec<usize> = (0..6).collect();
        let batch = data.batch(&idx).unwrap();
        let mut grads = infnet.net.zero_grad();
        let loss = proxy_loss(&infnet.net, &proxy.net, &batch, &data.weights, Some(&mut grads)).unwrap();
        // Rounding in the difference quotient grows with the loss value.
        let floor = 1e-3 * loss.max(1.0);
        let analytic = grads.to_flat();
        let mut probe = infnet.net.clone();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut k;
        for ti in 0..probe.tensors().len() {
            // Every bias entry and a stride through each weight matrix.
            let stride = if ti % 2 == 0 { 7 } else { 1 };
            for i in (0..probe.tensors()[ti].len()).step_by(stride) {
                k = probe.tensors()[..ti].iter().map(|t| t.len()).sum::<usize>() + i;
                let v = probe.tensors()[ti][i];
                probe.tensors_mut()[ti][i] = v + h;
                let fp = proxy_loss(&probe, &proxy.net, &batch, &data.weights, None).unwrap();
                probe.tensors_mut()[ti][i] = v - h;
                let fm = proxy_loss(&probe, &proxy.net, &batch, &data.weights, None).unwrap();
                probe.tensors_mut()[ti][i] = v;
                let fd = (fp - fm) / (2.0 * h);
                worst = worst.max((analytic[k] - fd).abs() / analytic[k].abs().max(fd.abs()).max(floor));
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn composite_model_gradient_matches_finite_differences() {
        let spec = ModelSpec::mmk();
        let solver = SolverConfig::default();
        let records = mmk_records(4, 9);
        let data = SetData::new(&records, &spec);
        let infnet = InferenceNet::new(&spec, 10);
        let idx: Vec<usize> = (0..4).collect();
        let mut grads = infnet.net.zero_grad();
        let (loss, skipped) =
            model_loss(&infnet.net, &records, &data, &idx, &spec, &solver, FD_STEP, &mut grads).unwrap();
        assert_eq!(skipped, 0);
        assert!(loss.is_finite());
        let analytic = grads.to_flat();
        let mean_nll = |net: &DeepSet| {
            let mut g = net.zero_grad();
            model_loss(net, &records, &data, &idx, &spec, &solver, FD_STEP, &mut g).unwrap().0
        };
        let n_params = infnet.net.n_params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut probe = infnet.net.clone();
        let h = 1e-4;
        let mut checked = 0;
        while checked < 10 {
            let k = rand::Rng::random_range(&mut rng, 0..n_params);
            if analytic[k].abs() < 1e-3 {
                continue;
            }
            let (mut ti, mut i) = (0, k);
            while i >= probe.tensors()[ti].len() {
                i -= probe.tensors()[ti].len();
                ti += 1;
            }
            let v = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = v + h;
            let fp = mean_nll(&probe);
            probe.tensors_mut()[ti][i] = v - h;
            let fm = mean_nll(&probe);
            probe.tensors_mut()[ti][i] = v;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (analytic[k] - fd).abs() <= 5e-2 * fd.abs().max(analytic[k].abs()),
                "weight {k}: {} vs {fd}",
                analytic[k]
            );
            checked += 1;
        }
    }

    #[test]
    fn zero_fine_tuning_steps_keep_parameters() {
        let spec = ModelSpec::mmk();
        let records = mmk_records(20, 12);
        let infnet = InferenceNet::new(&spec, 13);
        let mut cfg = FineTuneConfig::after(&TrainConfig::inference(), 0);
        assert_eq!(cfg.steps, 0);
        cfg.val_fraction = 0.2;
        let (tuned, report) =
            fine_tune_with_model(&infnet, &records, &spec, &SolverConfig::default(), &cfg).unwrap();
        assert_eq!(tuned, infnet);
        assert_eq!(report.best_step, 0);
    }

    #[test]
    fn fine_tuning_never_lowers_validation_r2() {
        let spec = ModelSpec::mmk();
        let records = mmk_records(80, 14);
        let infnet = InferenceNet::new(&spec, 15);
        let cfg = FineTuneConfig {
            steps: 6,
            batch_size: 16,
            lr: 1e-3,
            eval_every: 2,
            patience: 3,
            val_fraction: 0.25,
            seed: 16,
            fd_step: FD_STEP,
        };
        let (_, report) =
            fine_tune_with_model(&infnet, &records, &spec, &SolverConfig::default(), &cfg).unwrap();
        assert!(report.best_val_r2 >= report.initial_val_r2);
        assert!(report.log.epochs.len() >= 2);
    }

    #[test]
    fn inference_is_permutation_invariant_and_solver_free() {
        let spec = ModelSpec::mmk();
        let infnet = InferenceNet::new(&spec, 17);
        let r = &mmk_records(1, 18)[0];
        let before = crate::ode::invocation_count();
        let a = infnet.infer(&r.observations, &spec).unwrap();
        let mut shuffled = r.observations.clone();
        shuffled.triplets.reverse();
        let b = infnet.infer(&shuffled, &spec).unwrap();
        assert_eq!(crate::ode::invocation_count(), before);
        assert_eq!(a, b);
        let batch = infnet.infer_batch(&[&r.observations, &shuffled], &spec).unwrap();
        assert_eq!(batch[0], batch[1]);
    }

    #[test]
    fn weights_round_trip_and_check_kind() {
        let spec = ModelSpec::mmk();
        let dir = tempfile::tempdir().unwrap();
        let proxy = Proxy::new(&spec, 1);
        let mut infnet = InferenceNet::new(&spec, 2);
        infnet.train_steps = 1234;
        infnet.fine_tuned = true;
        let (pp, ip) = (dir.path().join("proxy.bin"), dir.path().join("infnet.bin"));
        proxy.save(&pp).unwrap();
        infnet.save(&ip).unwrap();
        assert_eq!(Proxy::load(&pp, &spec).unwrap(), proxy);
        assert_eq!(InferenceNet::load(&ip, &spec).unwrap(), infnet);
        assert!(matches!(Proxy::load(&ip, &spec), Err(Error::WeightFormat(_))));
        assert!(matches!(InferenceNet::load(&ip, &ModelSpec::ecoli()), Err(Error::WeightFormat(_))));
    }

    #[test]
    fn proxy_predict_uses_channel_scale() {
        let spec = ModelSpec::ecoli();
        let mut proxy = Proxy::new(&spec, 3);
        for t in proxy.net.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = proxy.net.layers.len() - 1;
        proxy.net.layers[last].bias[0] = 0.5;
        let obs = ObservationSet {
            model_id: ModelId::Ecoli,
            triplets: (0..4)
                .map(|c| ObservationTriplet { time: 1.0, channel: c, value: 0.0 })
                .collect(),
        };
        let z = to_latent(&NaturalParams(vec![1.0; 13]), &spec).unwrap();
        let out = proxy.predict(&z, &obs, &spec).unwrap();
        let expect: Vec<f64> = spec.channel_scale.iter().map(|s| 0.5 * s).collect();
        assert_eq!(out, expect);
    }
}
