use approx::assert_relative_eq;
use mechinfer::fitting::{refine, BfgsConfig, ModelObjective};
use mechinfer::likelihood::{from_latent, to_latent};
use mechinfer::model::prior_sample;
use mechinfer::neural::{Activation, DeepSet, Mlp, SetBatch};
use mechinfer::observation::sample_observations;
use mechinfer::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(horizon: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| horizon * i as f64 / n as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmk_conserves_mass_and_stays_nonnegative(
        vmax in 0.05f64..20.0,
        km in 0.01f64..20.0,
        s0 in 0.1f64..5.0,
    ) {
        let spec = ModelSpec::mmk();
        let cfg = SolverConfig::default();
        let traj = spec.simulate(&NaturalParams(vec![vmax, km, s0]), &grid(spec.horizon, 40), &cfg).unwrap();
        for i in 0..traj.len() {
            let (s, p) = (traj.value(i, 0), traj.value(i, 1));
            prop_assert!((s + p - s0).abs() <= 1e-12 * s0.max(1.0) * 40.0, "S + P = {} vs {s0}", s + p);
            prop_assert!(s >= -10.0 * cfg.atol && p >= -10.0 * cfg.atol);
            prop_assert!(s <= s0 + 1e-12);
        }
    }

    #[test]
    fn ecoli_concentrations_stay_nonnegative(seed in any::<u64>()) {
        let spec = ModelSpec::ecoli();
        let cfg = SolverConfig::default();
        let theta = prior_sample(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let traj = spec.simulate(&theta, &grid(spec.horizon, 60), &cfg);
        prop_assume!(traj.is_ok());
        let traj = traj.unwrap();
        for i in 0..traj.len() {
            for state in 0..3 {
                let v = traj.value(i, state);
                prop_assert!(v >= -1e-6 * (1.0 + traj.value(0, state).abs()), "state {state} = {v}");
            }
        }
    }

    #[test]
    fn solver_is_deterministic(vmax in 0.1f64..5.0, km in 0.1f64..5.0) {
        let spec = ModelSpec::mmk();
        let cfg = SolverConfig::default();
        let theta = NaturalParams(vec![vmax, km, 1.0]);
        let a = spec.simulate(&theta, &grid(spec.horizon, 13), &cfg).unwrap();
        let b = spec.simulate(&theta, &grid(spec.horizon, 13), &cfg).unwrap();
        prop_assert_eq!(a.states, b.states);
    }

    #[test]
    fn latent_map_round_trips_and_is_monotone(
        theta in prop::collection::vec(1e-3f64..1e3, 3),
        bump in 1e-6f64..1.0,
        component in 0usize..3,
    ) {
        let spec = ModelSpec::mmk();
        let theta = NaturalParams(theta);
        let z = to_latent(&theta, &spec).unwrap();
        let back = from_latent(&z, &spec);
        for (a, b) in back.0.iter().zip(&theta.0) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        let mut bigger = theta.clone();
        bigger.0[component] *= 1.0 + bump;
        let z2 = to_latent(&bigger, &spec).unwrap();
        prop_assert!(z2.0[component] > z.0[component]);
    }

    #[test]
    fn channels_are_balanced_and_times_in_range(seed in any::<u64>(), ecoli in any::<bool>()) {
        let spec = if ecoli { ModelSpec::ecoli() } else { ModelSpec::mmk() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = NaturalParams(spec.prior_meta.iter().map(|p| p.log_mean.exp()).collect());
        let cfg = SolverConfig::default();
        let obs = sample_observations(|p, q| spec.simulate(p, q, &cfg), &theta, &spec, &mut rng).unwrap();
        prop_assert_eq!(obs.len(), spec.n_obs_total);
        let counts = obs.channel_counts(spec.n_channels());
        prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        prop_assert!(obs.triplets.iter().all(|o| (0.0..=spec.horizon).contains(&o.time)));
    }

    #[test]
    fn deep_set_ignores_row_order(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = Mlp::new(&[4, 16, 8], Activation::Tanh, Activation::Tanh, &mut rng);
        let rho = Mlp::new(&[8, 8, 3], Activation::Tanh, Activation::Identity, &mut rng);
        let net = DeepSet::new(phi, rho).unwrap();
        let x = Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled = x.select(Axis(0), &order);
        let a = net.forward(x.view()).unwrap();
        let b = net.forward(shuffled.view()).unwrap();
        prop_assert_eq!(a.to_vec(), b.to_vec());
        let batch = SetBatch::new(&[x.view(), shuffled.view()]).unwrap();
        prop_assert_eq!(batch.n_sets(), 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn refine_never_increases_loss(seed in any::<u64>(), offset in prop::collection::vec(-2.0f64..2.0, 3)) {
        let spec = ModelSpec::mmk();
        let cfg = SolverConfig::default();
        let (record, _) = observation::generate_record(&spec, seed, &cfg).unwrap();
        let obs = &record.observations;
        let z0 = LatentParams(offset);
        let start = ModelObjective::new(&spec, obs, &cfg).loss(&z0.0);
        let fit = refine(&z0, obs, &spec, &cfg, &BfgsConfig::default());
        prop_assert!(fit.nll_value <= start || !start.is_finite());
    }
}
