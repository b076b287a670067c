use approx::assert_relative_eq;
use mechinfer::fitting::{bfgs_minimize, central_difference, BfgsConfig, ModelObjective};
use mechinfer::likelihood::{from_latent, nll, to_latent};
use mechinfer::observation::{generate_dataset_par, model_outputs};
use mechinfer::*;

/// Root of `Km ln(S0/S) + (S0 - S) = Vmax t` by bisection on `[0, S0]`.
fn mmk_implicit(vmax: f64, km: f64, s0: f64, t: f64) -> f64 {
    let f = |s: f64| km * (s0 / s).ln() + (s0 - s) - vmax * t;
    let (mut lo, mut hi) = (1e-300, s0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn mmk_matches_implicit_solution() {
    let root = mmk_implicit(1.0, 1.0, 1.0, 1.0);
    assert!((root - 0.567143).abs() < 1e-6);
    let traj = ModelSpec::mmk()
        .simulate(&NaturalParams(vec![1.0, 1.0, 1.0]), &[1.0], &SolverConfig::default())
        .unwrap();
    assert!((traj.value(0, 0) - root).abs() < 1e-6);
}

#[test]
fn tightening_tolerances_reduces_error() {
    let spec = ModelSpec::mmk();
    let theta = NaturalParams(vec![1.0, 1.0, 1.0]);
    let times = [0.5, 1.0, 1.5, 2.0];
    let exact: Vec<f64> = times.iter().map(|&t| mmk_implicit(1.0, 1.0, 1.0, t)).collect();
    let errors: Vec<f64> = (0..5)
        .map(|k| {
            let rtol = 1e-6 / 2f64.powi(k);
            let cfg = SolverConfig {
                rtol,
                atol: rtol * 1e-2,
                ..SolverConfig::default()
            };
            let traj = spec.simulate(&theta, &times, &cfg).unwrap();
            (0..times.len())
                .map(|i| (traj.value(i, 0) - exact[i]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn generated_data_statistics() {
    let spec = ModelSpec::mmk();
    let cfg = SolverConfig::default();
    let (records, stats) = generate_dataset_par(&spec, 10_000, 99, &cfg).unwrap();
    assert!(stats.rejection_rate() < 0.01);

    let nc = spec.n_channels();
    let mut sum_sq = vec![0.0; nc];
    let mut count = vec![0usize; nc];
    let mut times = Vec::new();
    for r in &records {
        let clean = model_outputs(&spec, &r.true_params, &r.observations, &cfg).unwrap();
        for (o, mu) in r.observations.triplets.iter().zip(clean) {
            sum_sq[o.channel] += (o.value - mu).powi(2);
            count[o.channel] += 1;
            times.push(o.time / spec.horizon);
        }
    }
    for c in 0..nc {
        let std = (sum_sq[c] / count[c] as f64).sqrt();
        assert_relative_eq!(std, spec.noise_std[c], max_relative = 0.03);
    }

    times.truncate(10_000);
    times.sort_by(f64::total_cmp);
    let n = times.len() as f64;
    let ks = times
        .iter()
        .enumerate()
        .map(|(i, &u)| (u - i as f64 / n).max((i + 1) as f64 / n - u))
        .fold(0.0, f64::max);
    assert!(ks < 1.628 / n.sqrt(), "KS distance {ks}");
}

#[test]
fn small_dataset_rejection_rate() {
    let (_, stats) = generate_dataset_par(&ModelSpec::mmk(), 1000, 1, &SolverConfig::default()).unwrap();
    assert!(stats.rejection_rate() < 0.01);
}

#[test]
fn reparameterization_keeps_the_optimum() {
    let spec = ModelSpec::mmk();
    let cfg = SolverConfig {
        rtol: 1e-11,
        atol: 1e-13,
        ..SolverConfig::default()
    };
    let bfgs = BfgsConfig {
        grad_tol: 1e-9,
        ..BfgsConfig::default()
    };
    let noise = likelihood::NoiseModel::from_spec(&spec);
    let (records, _) = generate_dataset_par(&spec, 40, 5, &cfg).unwrap();
    let mut checked = 0;
    for r in records.iter().filter(|r| r.true_params.0.iter().all(|&p| (0.2..5.0).contains(&p))) {
        let obs = &r.observations;
        let z0 = to_latent(&r.true_params, &spec).unwrap();
        let latent = bfgs_minimize(&mut ModelObjective::new(&spec, obs, &cfg).with_step(1e-6), &z0.0, &bfgs);
        let latent_theta = from_latent(&latent.z_hat, &spec);
        // a boundary optimum (Km -> 0) is not a stationary point in either space
        if latent_theta.0.iter().any(|&p| p < 0.05) {
            continue;
        }

        let loss = |theta: &[f64]| {
            if theta.iter().any(|&p| p <= 0.0) {
                return f64::INFINITY;
            }
            model_outputs(&spec, &NaturalParams(theta.to_vec()), obs, &cfg)
                .map(|mu| nll(obs, &mu, &noise))
                .unwrap_or(f64::INFINITY)
        };
        let mut natural_obj = |theta: &[f64]| {
            let f = loss(theta);
            (f, central_difference(loss, theta, f, 1e-6))
        };
        let natural = bfgs_minimize(&mut natural_obj, &r.true_params.0, &bfgs);
        for (a, b) in natural.z_hat.0.iter().zip(&latent_theta.0) {
            assert_relative_eq!(*a, *b, max_relative = 1e-4);
        }
        checked += 1;
        if checked == 3 {
            break;
        }
    }
    assert_eq!(checked, 3);
}
