//! Maximum-likelihood fitting in latent parameter space.
//!
//! Gradients of the negative log-likelihood are central finite differences
//! of full model solves. The optimizer is dense BFGS with a strong-Wolfe
//! line search; every run returns the best point it evaluated.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::likelihood::{nll, predict_slice, LatentParams, NoiseModel};
use crate::model::ModelSpec;
use crate::observation::ObservationSet;
use crate::ode::SolverConfig;

/// Latent-space step of the central differences.
pub const FD_STEP: f64 = 1e-4;

/// Something BFGS can minimize. A non-finite loss marks a point where the
/// objective could not be evaluated; its gradient is ignored.
pub trait Objective {
    fn loss_and_grad(&mut self, z: &[f64]) -> (f64, Vec<f64>);
}

impl<F> Objective for F
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    fn loss_and_grad(&mut self, z: &[f64]) -> (f64, Vec<f64>) {
        self(z)
    }
}

/// Central differences of `f` around `z`, falling back to a one-sided
/// difference for components where one of the probes is not finite.
pub fn central_difference<F>(mut f: F, z: &[f64], f0: f64, step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = z.to_vec();
    (0..z.len())
        .map(|i| {
            probe[i] = z[i] + step;
            let fp = f(&probe);
            probe[i] = z[i] - step;
            let fm = f(&probe);
            probe[i] = z[i];
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * step),
                (true, false) => (fp - f0) / step,
                (false, true) => (f0 - fm) / step,
                (false, false) => 0.0,
            }
        })
        .collect()
}

/// Negative log-likelihood of one observation set as a function of latent
/// parameters.
pub struct ModelObjective<'a> {
    spec: &'a ModelSpec,
    obs: &'a ObservationSet,
    config: SolverConfig,
    noise: NoiseModel,
    step: f64,
}

impl<'a> ModelObjective<'a> {
    pub fn new(spec: &'a ModelSpec, obs: &'a ObservationSet, config: &SolverConfig) -> Self {
        ModelObjective {
            spec,
            obs,
            config: *config,
            noise: NoiseModel::from_spec(spec),
            step: FD_STEP,
        }
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    /// `+∞` when the model cannot be integrated at `z`.
    pub fn loss(&self, z: &[f64]) -> f64 {
        match predict_slice(z, self.obs, self.spec, &self.config) {
            Ok(mu) => nll(self.obs, &mu, &self.noise),
            Err(_) => f64::INFINITY,
        }
    }
}

impl Objective for ModelObjective<'_> {
    fn loss_and_grad(&mut self, z: &[f64]) -> (f64, Vec<f64>) {
        let f0 = self.loss(z);
        if !f0.is_finite() {
            return (f64::INFINITY, vec![f64::NAN; z.len()]);
        }
        let grad = central_difference(|x| self.loss(x), z, f0, self.step);
        (f0, grad)
    }
}

/// NLL and its finite-difference gradient at `z`.
pub fn loss_and_grad(
    z: &LatentParams,
    obs: &ObservationSet,
    spec: &ModelSpec,
    config: &SolverConfig,
) -> (f64, Vec<f64>) {
    ModelObjective::new(spec, obs, config).loss_and_grad(&z.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsConfig {
    pub max_iter: usize,
    /// Convergence threshold on the infinity norm of the gradient.
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            max_iter: 1024,
            grad_tol: 1e-5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientTolerance,
    IterationLimit,
    LineSearchFailed,
    /// The objective could not be evaluated at the starting point.
    InvalidStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub z_hat: LatentParams,
    pub nll_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    /// Objective evaluations, line-search probes included.
    pub evaluations: usize,
    /// Seconds.
    pub wall_time: f64,
}

struct Best {
    z: Vec<f64>,
    f: f64,
}

impl Best {
    fn offer(&mut self, z: &[f64], f: f64) {
        if f < self.f {
            self.f = f;
            self.z.copy_from_slice(z);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Probe {
    alpha: f64,
    f: f64,
    slope: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, O: Objective> {
    obj: &'a mut O,
    x0: &'a [f64],
    p: &'a [f64],
    f0: f64,
    slope0: f64,
    cfg: &'a BfgsConfig,
    evals: usize,
    best: &'a mut Best,
}

impl<O: Objective> LineSearch<'_, O> {
    fn probe(&mut self, alpha: f64) -> Probe {
        let x: Vec<f64> = self.x0.iter().zip(self.p).map(|(a, b)| a + alpha * b).collect();
        let (f, g) = self.obj.loss_and_grad(&x);
        self.evals += 1;
        let slope = if f.is_finite() { dot(&g, self.p) } else { f64::NAN };
        let f = if f.is_finite() && slope.is_finite() {
            self.best.offer(&x, f);
            f
        } else {
            f64::INFINITY
        };
        Probe { alpha, f, slope, x, g }
    }

    fn armijo(&self, pr: &Probe) -> bool {
        pr.f <= self.f0 + self.cfg.c1 * pr.alpha * self.slope0
    }

    fn curvature(&self, pr: &Probe) -> bool {
        pr.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    fn run(&mut self, alpha0: f64) -> Option<Probe> {
        let mut prev = Probe {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            x: self.x0.to_vec(),
            g: Vec::new(),
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.cfg.max_line_search {
            let cur = self.probe(alpha);
            if !cur.f.is_finite() || !self.armijo(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            alpha = cur.alpha * 2.0;
            prev = cur;
            first = false;
        }
        None
    }

    /// `lo` satisfies sufficient decrease and has the lower value; the
    /// minimizer lies between `lo.alpha` and `hi.alpha`.
    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        while self.evals < self.cfg.max_line_search {
            let alpha = interpolate(&lo, &hi);
            let cur = self.probe(alpha);
            if !cur.f.is_finite() || !self.armijo(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                break;
            }
        }
        // out of budget: settle for sufficient decrease if we have it
        (lo.alpha > 0.0 && !lo.g.is_empty()).then_some(lo)
    }
}

/// Minimizer of the cubic through both end points, safeguarded to stay
/// well inside the bracket; bisection when the cubic is unavailable.
fn interpolate(lo: &Probe, hi: &Probe) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let width = b - a;
    let mid = 0.5 * (a + b);
    if !(hi.f.is_finite() && hi.slope.is_finite() && lo.slope.is_finite()) {
        return mid;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt() * width.signum();
    let t = b - width * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let (l, u) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * width.abs();
    if t.is_finite() && t > l + margin && t < u - margin {
        t
    } else {
        mid
    }
}

/// Dense BFGS from `z0`.
pub fn bfgs_minimize<O: Objective>(objective: &mut O, z0: &[f64], cfg: &BfgsConfig) -> FitResult {
    let start = Instant::now();
    let n = z0.len();
    let mut x = z0.to_vec();
    let (mut f, mut g) = objective.loss_and_grad(&x);
    let mut evals = 1;
    let mut best = Best {
        z: x.clone(),
        f: if f.is_finite() { f } else { f64::INFINITY },
    };
    let finish = |best: Best, iterations, stop, evaluations| FitResult {
        z_hat: LatentParams(best.z),
        nll_value: best.f,
        iterations,
        converged: stop == StopReason::GradientTolerance,
        stop,
        evaluations,
        wall_time: start.elapsed().as_secs_f64(),
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(best, 0, StopReason::InvalidStart, evals);
    }

    // inverse Hessian approximation, row-major
    let mut h = identity(n);
    let mut scaled = false;
    let mut iterations = 0;
    let stop = loop {
        if inf_norm(&g) < cfg.grad_tol {
            break StopReason::GradientTolerance;
        }
        if iterations >= cfg.max_iter {
            break StopReason::IterationLimit;
        }
        let mut p = mat_vec(&h, &g, n);
        p.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let alpha0 = if iterations == 0 {
            (1.0 / inf_norm(&p)).min(1.0)
        } else {
            1.0
        };
        let mut ls = LineSearch {
            obj: objective,
            x0: &x,
            p: &p,
            f0: f,
            slope0: slope,
            cfg,
            evals: 0,
            best: &mut best,
        };
        let accepted = ls.run(alpha0);
        evals += ls.evals;
        let Some(step) = accepted else {
            break StopReason::LineSearchFailed;
        };

        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= gamma);
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        }
        x = step.x;
        f = step.f;
        g = step.g;
        iterations += 1;
    };
    finish(best, iterations, stop, evals)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / sᵀy`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    let coef = rho * rho * yhy + rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}

/// Draws `n_starts` standard-normal starts from `rng` and runs BFGS from
/// each, in order. `make_objective` builds a fresh objective per run.
pub fn multi_start_runs<O, F, R>(
    mut make_objective: F,
    dim: usize,
    n_starts: usize,
    rng: &mut R,
    cfg: &BfgsConfig,
) -> Vec<FitResult>
where
    O: Objective,
    F: FnMut() -> O,
    R: Rng + ?Sized,
{
    (0..n_starts)
        .map(|_| {
            let z0: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            bfgs_minimize(&mut make_objective(), &z0, cfg)
        })
        .collect()
}

/// Lowest-NLL run among the first `k` runs; ties keep the earlier run.
pub fn best_of(runs: &[FitResult], k: usize) -> Option<&FitResult> {
    runs[..k.min(runs.len())]
        .iter()
        .reduce(|a, b| if b.nll_value < a.nll_value { b } else { a })
}

/// Multi-start fit of one observation set; `wall_time` is the total over
/// all starts.
pub fn multi_start_fit<R: Rng + ?Sized>(
    obs: &ObservationSet,
    spec: &ModelSpec,
    n_starts: usize,
    rng: &mut R,
    solver: &SolverConfig,
    cfg: &BfgsConfig,
) -> FitResult {
    assert!(n_starts >= 1, "multi-start needs at least one start");
    let runs = multi_start_runs(
        || ModelObjective::new(spec, obs, solver),
        spec.param_dim(),
        n_starts,
        rng,
        cfg,
    );
    let total: f64 = runs.iter().map(|r| r.wall_time).sum();
    let mut best = best_of(&runs, n_starts).cloned().expect("n_starts >= 1");
    best.wall_time = total;
    best
}

/// Single BFGS run started from a network estimate.
pub fn refine(
    z_init: &LatentParams,
    obs: &ObservationSet,
    spec: &ModelSpec,
    solver: &SolverConfig,
    cfg: &BfgsConfig,
) -> FitResult {
    bfgs_minimize(&mut ModelObjective::new(spec, obs, solver), &z_init.0, cfg)
}
