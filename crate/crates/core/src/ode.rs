//! Adaptive Dormand-Prince 5(4) integration with dense output.
//!
//! Steps are chosen by the embedded error estimate alone; requested query
//! times are served from the fourth-order continuous extension of each
//! accepted step, so the step sequence does not depend on where the
//! solution is sampled.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::SolverError;
use crate::model::ModelId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step, hours.
    pub h_init: f64,
    /// Smallest step the controller may request, hours.
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-6,
            atol: 1e-8,
            h_init: 1e-2,
            h_min: 1e-10,
            max_steps: 100_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let ok = self.rtol > 0.0
            && self.atol > 0.0
            && self.h_min > 0.0
            && self.h_min <= self.h_init
            && self.max_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(SolverError::InvalidQuery(format!("invalid solver config {self:?}")))
        }
    }
}

/// Solution sampled at the requested times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row-major `times.len() × n_states`.
    pub states: Vec<f64>,
    pub n_states: usize,
    pub model_id: Option<ModelId>,
    /// Accepted integration steps.
    pub n_steps: usize,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.n_states..(i + 1) * self.n_states]
    }

    pub fn value(&self, i: usize, state_index: usize) -> f64 {
        self.states[i * self.n_states + state_index]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub(crate) fn with_model(mut self, id: ModelId) -> Self {
        self.model_id = Some(id);
        self
    }
}

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `integrate` calls made on the current thread.
pub fn invocation_count() -> u64 {
    INVOCATIONS.with(|c| c.get())
}

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A21: f64 = 0.2;
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
// fifth-order weights; also row 7 of the tableau (FSAL)
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// difference between the fifth- and fourth-order solutions
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// Integrates `dy/dt = rhs(t, y)` on `[0, t_end]` and returns the state at
/// each of `query_times`, which must be strictly increasing and lie in
/// `[0, t_end]`.
pub fn integrate<F>(
    rhs: F,
    y0: &[f64],
    t_end: f64,
    config: &SolverConfig,
    query_times: &[f64],
) -> Result<Trajectory, SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_impl(rhs, y0, t_end, config, query_times, None)
}

/// Like [`integrate`], additionally returning every accepted step `(t, y)`.
pub fn integrate_with_steps<F>(
    rhs: F,
    y0: &[f64],
    t_end: f64,
    config: &SolverConfig,
    query_times: &[f64],
) -> Result<(Trajectory, Vec<(f64, Vec<f64>)>), SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut steps = Vec::new();
    let traj = integrate_impl(rhs, y0, t_end, config, query_times, Some(&mut steps))?;
    Ok((traj, steps))
}

fn integrate_impl<F>(
    mut rhs: F,
    y0: &[f64],
    t_end: f64,
    config: &SolverConfig,
    query_times: &[f64],
    mut history: Option<&mut Vec<(f64, Vec<f64>)>>,
) -> Result<Trajectory, SolverError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    INVOCATIONS.with(|c| c.set(c.get() + 1));
    config.validate()?;
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(SolverError::InvalidQuery(format!("bad end time {t_end}")));
    }
    if query_times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SolverError::InvalidQuery("query times not strictly increasing".into()));
    }
    if let (Some(&first), Some(&last)) = (query_times.first(), query_times.last()) {
        if !(first >= 0.0 && last <= t_end) {
            return Err(SolverError::InvalidQuery(format!(
                "query times must lie in [0, {t_end}]"
            )));
        }
    }
    if y0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteState { t: 0.0 });
    }

    let n = y0.len();
    let mut out = Vec::with_capacity(query_times.len() * n);
    let mut qi = 0;
    while qi < query_times.len() && query_times[qi] == 0.0 {
        out.extend_from_slice(y0);
        qi += 1;
    }

    let mut y = y0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut t = 0.0;
    rhs(t, &y, &mut k[0]);
    if k[0].iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteState { t });
    }

    let mut h = config.h_init.min(t_end);
    let mut steps = 0usize;
    let mut accepted = 0usize;
    let mut last_rejected = false;
    let mut nonfinite_rejection = false;

    while t < t_end {
        if steps >= config.max_steps {
            return Err(SolverError::MaxStepsExceeded {
                t,
                max_steps: config.max_steps,
            });
        }
        if h < config.h_min {
            return Err(if nonfinite_rejection {
                SolverError::NonFiniteState { t }
            } else {
                SolverError::StepUnderflow { t, h }
            });
        }
        steps += 1;
        let last_step = t + h >= t_end || t_end - (t + h) < config.h_min;
        let h_step = if last_step { t_end - t } else { h };

        for i in 0..n {
            y_stage[i] = y[i] + h_step * A21 * k[0][i];
        }
        rhs(t + C[1] * h_step, &y_stage, &mut k[1]);
        for i in 0..n {
            y_stage[i] = y[i] + h_step * (A3[0] * k[0][i] + A3[1] * k[1][i]);
        }
        rhs(t + C[2] * h_step, &y_stage, &mut k[2]);
        for i in 0..n {
            y_stage[i] = y[i] + h_step * (A4[0] * k[0][i] + A4[1] * k[1][i] + A4[2] * k[2][i]);
        }
        rhs(t + C[3] * h_step, &y_stage, &mut k[3]);
        for i in 0..n {
            y_stage[i] = y[i]
                + h_step
                    * (A5[0] * k[0][i] + A5[1] * k[1][i] + A5[2] * k[2][i] + A5[3] * k[3][i]);
        }
        rhs(t + C[4] * h_step, &y_stage, &mut k[4]);
        for i in 0..n {
            y_stage[i] = y[i]
                + h_step
                    * (A6[0] * k[0][i]
                        + A6[1] * k[1][i]
                        + A6[2] * k[2][i]
                        + A6[3] * k[3][i]
                        + A6[4] * k[4][i]);
        }
        rhs(t + C[5] * h_step, &y_stage, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i]
                + h_step
                    * (B[0] * k[0][i]
                        + B[2] * k[2][i]
                        + B[3] * k[3][i]
                        + B[4] * k[4][i]
                        + B[5] * k[5][i]);
        }
        let t_new = if last_step { t_end } else { t + h_step };
        rhs(t_new, &y_new, &mut k[6]);

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h_step
                * (E[0] * k[0][i]
                    + E[2] * k[2][i]
                    + E[3] * k[3][i]
                    + E[4] * k[4][i]
                    + E[5] * k[5][i]
                    + E[6] * k[6][i]);
            let scale = config.atol + config.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / n.max(1) as f64).sqrt();

        let finite = err.is_finite()
            && y_new.iter().all(|v| v.is_finite())
            && k[6].iter().all(|v| v.is_finite());
        if !finite {
            nonfinite_rejection = true;
            last_rejected = true;
            h *= 0.25;
            continue;
        }
        nonfinite_rejection = false;

        if err <= 1.0 {
            while qi < query_times.len() && query_times[qi] <= t_new {
                let q = query_times[qi];
                if q == t_new {
                    out.extend_from_slice(&y_new);
                } else {
                    let s = (q - t) / h_step;
                    let s1 = 1.0 - s;
                    for i in 0..n {
                        let ydiff = y_new[i] - y[i];
                        let bspl = h_step * k[0][i] - ydiff;
                        let c3 = ydiff - h_step * k[6][i] - bspl;
                        let c4 = h_step
                            * (D[0] * k[0][i]
                                + D[2] * k[2][i]
                                + D[3] * k[3][i]
                                + D[4] * k[4][i]
                                + D[5] * k[5][i]
                                + D[6] * k[6][i]);
                        out.push(y[i] + s * (ydiff + s1 * (bspl + s * (c3 + s1 * c4))));
                    }
                }
                qi += 1;
            }
            t = t_new;
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            accepted += 1;
            if let Some(hist) = history.as_deref_mut() {
                hist.push((t, y.clone()));
            }

            let mut fac = if err == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = h_step * fac;
        } else {
            last_rejected = true;
            h = h_step * (SAFETY * err.powf(-0.2)).max(FAC_MIN);
        }
    }

    debug_assert_eq!(qi, query_times.len());
    Ok(Trajectory {
        times: query_times.to_vec(),
        states: out,
        n_states: n,
        model_id: None,
        n_steps: accepted,
    })
}
