//! Mechanistic growth models: right-hand sides, parameter layouts, priors
//! and observation schemas.
//!
//! Two models are provided. `mmk` is Michaelis-Menten substrate conversion
//! with states `(S, P)`. `ecoli` is a four-state overflow-metabolism batch
//! model with biomass, substrate, acetate and dissolved oxygen tension.
//! Parameter vectors list kinetic constants first and the unknown initial
//! conditions last; fixed initial conditions are not part of the vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SolverError};
use crate::ode::{self, SolverConfig, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelId {
    Mmk,
    Ecoli,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Mmk => "mmk",
            ModelId::Ecoli => "ecoli",
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmk" => Ok(ModelId::Mmk),
            "ecoli" => Ok(ModelId::Ecoli),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected 'mmk' or 'ecoli')"
            ))),
        }
    }
}

/// Log-normal prior of one parameter: `ln θ ~ N(log_mean, log_std²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub log_mean: f64,
    pub log_std: f64,
}

impl PriorMeta {
    fn around(median: f64, log_std: f64) -> Self {
        PriorMeta {
            log_mean: median.ln(),
            log_std,
        }
    }
}

/// Static description of a model and its measurement protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: ModelId,
    pub state_names: Vec<String>,
    /// Observed channels; each name must also appear in `state_names`.
    pub channel_names: Vec<String>,
    pub param_names: Vec<String>,
    /// Experiment length in hours.
    pub horizon: f64,
    pub n_obs_total: usize,
    pub prior_meta: Vec<PriorMeta>,
    /// Absolute measurement noise per channel, in channel units.
    pub noise_std: Vec<f64>,
    /// Normalization constant per channel for network features.
    pub channel_scale: Vec<f64>,
}

/// Model parameters in physical units, ordered as `ModelSpec::param_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NaturalParams(pub Vec<f64>);

impl NaturalParams {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl ModelSpec {
    pub fn mmk() -> Self {
        ModelSpec {
            model_id: ModelId::Mmk,
            state_names: names(&["S", "P"]),
            channel_names: names(&["S", "P"]),
            param_names: names(&["Vmax", "Km", "S0"]),
            horizon: 2.0,
            n_obs_total: 14,
            prior_meta: vec![
                PriorMeta::around(1.0, 2.0),
                PriorMeta::around(0.5, 2.0),
                PriorMeta::around(1.0, 0.3),
            ],
            noise_std: vec![0.02, 0.02],
            channel_scale: vec![1.0, 1.0],
        }
    }

    pub fn ecoli() -> Self {
        let medians = [
            1.2,    // qs_max, g/g/h
            0.1,    // Ks, g/L
            0.6,    // qs_ox_cap, g/g/h
            0.5,    // Yas, g/g
            0.3,    // qa_max, g/g/h
            0.2,    // Ka, g/L
            0.5,    // Yxs_ox, g/g
            0.15,   // Yxs_of, g/g
            0.3,    // Yxa, g/g
            60.0,   // kLa, 1/h
            1000.0, // ko, %·L/g
            0.3,    // X0, g/L
            5.0,    // S0, g/L
        ];
        ModelSpec {
            model_id: ModelId::Ecoli,
            state_names: names(&["X", "S", "A", "DOT"]),
            channel_names: names(&["X", "S", "A", "DOT"]),
            param_names: names(&[
                "qs_max",
                "Ks",
                "qs_ox_cap",
                "Yas",
                "qa_max",
                "Ka",
                "Yxs_ox",
                "Yxs_of",
                "Yxa",
                "kLa",
                "ko",
                "X0",
                "S0",
            ]),
            horizon: 6.0,
            n_obs_total: 30,
            // wide on kinetics and yields; oxygen transfer and initial conditions stay narrow
            prior_meta: medians
                .iter()
                .enumerate()
                .map(|(i, &m)| PriorMeta::around(m, if i < 9 { 1.5 } else { 0.3 }))
                .collect(),
            noise_std: vec![0.1, 0.05, 0.02, 2.0],
            channel_scale: vec![2.0, 5.0, 1.0, 100.0],
        }
    }

    pub fn by_id(id: ModelId) -> Self {
        match id {
            ModelId::Mmk => Self::mmk(),
            ModelId::Ecoli => Self::ecoli(),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.param_names.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    /// State index measured by channel `c`.
    pub fn channel_state(&self, c: usize) -> usize {
        let name = &self.channel_names[c];
        self.state_names
            .iter()
            .position(|s| s == name)
            .expect("channel without a state; ModelSpec::validate rejects this")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let expected = Self::by_id(self.model_id);
        if self.state_names != expected.state_names || self.param_names != expected.param_names {
            return bad(format!(
                "state/parameter layout does not match the built-in {} model",
                self.model_id
            ));
        }
        if self.channel_names.is_empty() {
            return bad("no observed channels".into());
        }
        for name in &self.channel_names {
            if !self.state_names.contains(name) {
                return bad(format!("channel '{name}' is not a state variable"));
            }
        }
        let nc = self.n_channels();
        if self.noise_std.len() != nc || self.channel_scale.len() != nc {
            return bad("noise_std and channel_scale need one entry per channel".into());
        }
        if self.prior_meta.len() != self.param_dim() {
            return bad("prior_meta needs one entry per parameter".into());
        }
        if self.noise_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("noise_std entries must be positive".into());
        }
        if self.channel_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("channel_scale entries must be positive".into());
        }
        if self
            .prior_meta
            .iter()
            .any(|p| !(p.log_std > 0.0 && p.log_std.is_finite() && p.log_mean.is_finite()))
        {
            return bad("prior log_std entries must be positive".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.n_obs_total == 0 {
            return bad("horizon and n_obs_total must be positive".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Full initial state vector, combining inferred and fixed initial conditions.
    pub fn initial_state(&self, params: &NaturalParams) -> Vec<f64> {
        let p = params.as_slice();
        match self.model_id {
            ModelId::Mmk => vec![p[2], 0.0],
            ModelId::Ecoli => vec![p[11], p[12], 0.0, 100.0],
        }
    }

    pub fn rhs(&self, params: &NaturalParams, state: &[f64], d_state: &mut [f64]) {
        match self.model_id {
            ModelId::Mmk => mmk_rhs(state, params.as_slice(), d_state),
            ModelId::Ecoli => ecoli_rhs(state, params.as_slice(), d_state),
        }
    }

    /// Integrates the model from its initial state and evaluates it at `query_times`.
    pub fn simulate(
        &self,
        params: &NaturalParams,
        query_times: &[f64],
        config: &SolverConfig,
    ) -> std::result::Result<Trajectory, SolverError> {
        let y0 = self.initial_state(params);
        let traj = ode::integrate(
            |_t, y, dy| self.rhs(params, y, dy),
            &y0,
            self.horizon,
            config,
            query_times,
        )?;
        Ok(traj.with_model(self.model_id))
    }
}

/// Michaelis-Menten conversion `S -> P`. `params = [Vmax, Km, ..]`.
pub fn mmk_rhs(state: &[f64], params: &[f64], d_state: &mut [f64]) {
    let s = state[0].max(0.0);
    let (vmax, km) = (params[0], params[1]);
    let rate = vmax * s / (km + s);
    d_state[0] = -rate;
    d_state[1] = rate;
}

/// Overflow-metabolism batch model with states `[X, S, A, DOT]`.
///
/// Substrate uptake saturates at `qs_max`; uptake beyond the oxidative
/// capacity `qs_ox_cap` is diverted to acetate. Acetate is re-consumed with
/// a rate that is repressed while overflow is active. Oxygen demand comes
/// from oxidative substrate use and acetate consumption.
pub fn ecoli_rhs(state: &[f64], params: &[f64], d_state: &mut [f64]) {
    let x = state[0].max(0.0);
    let s = state[1].max(0.0);
    let a = state[2].max(0.0);
    let dot = state[3];
    let [qs_max, ks, qs_ox_cap, yas, qa_max, ka, yxs_ox, yxs_of, yxa, kla, ko] =
        <[f64; 11]>::try_from(&params[..11]).expect("ecoli parameter vector too short");

    let qs = qs_max * s / (s + ks);
    let qs_ox = qs.min(qs_ox_cap);
    let qs_of = qs - qs_ox;
    let qa = qa_max * a / (a + ka) * (1.0 - qs_of / qs_max);
    let mu = yxs_ox * qs_ox + yxs_of * qs_of + yxa * qa;

    d_state[0] = mu * x;
    d_state[1] = -qs * x;
    d_state[2] = (yas * qs_of - qa) * x;
    d_state[3] = kla * (100.0 - dot) - ko * (qs_ox + qa) * x;
}

/// Draws each component independently from its log-normal prior.
pub fn prior_sample<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> NaturalParams {
    NaturalParams(
        spec.prior_meta
            .iter()
            .map(|p| {
                let n: f64 = rng.sample(StandardNormal);
                (p.log_mean + p.log_std * n).exp()
            })
            .collect(),
    )
}
