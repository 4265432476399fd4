use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vla_core::initializer::InitStrategy;
use vla_core::nomp::{
    cyclic_refine, ls_all, newton_refine, omp_step, remove, solve, NewtonOutcome, PathEstimate, Problem, SolverConfig, SolverState,
    TauGrid,
};
use vla_core::scenario::ScenarioSpec;
use vla_core::signal::{steering, synthesize_cfr, Face, Scenario};
use vla_core::C64;

fn sample(spec: &ScenarioSpec, seed: u64) -> (Scenario, Problem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.sample(&mut rng).unwrap();
    let snaps = synthesize_cfr(&s, &mut rng).unwrap();
    let p = Problem::from_scenario(&s, snaps).unwrap();
    (s, p)
}

fn oracle(s: &Scenario) -> InitStrategy {
    InitStrategy::OraclePerturbed {
        truth: *s.source(),
        max_error: 0.0,
        seed: 0,
        room_dims: None,
    }
}

fn energy(p: &Problem) -> f64 {
    p.snapshots.iter().flat_map(|s| s.cfr.iter()).map(|z| z.norm_sqr()).sum()
}

#[test]
fn noiseless_los_converges() {
    let spec = ScenarioSpec::default();
    let config = SolverConfig { paths: 1, ..SolverConfig::desk() };
    for seed in 0..10 {
        let (s, p) = sample(&spec, seed);
        let out = solve(&p, &config, &oracle(&s)).unwrap();
        let err = (out.source() - s.source()).norm();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn three_iterations_explain_a_two_path_mixture() {
    let spec = ScenarioSpec {
        max_order: 1,
        reflectors: vec![Face::XMax],
        ..ScenarioSpec::default()
    };
    let config = SolverConfig { paths: 3, ..SolverConfig::desk() };
    for seed in 0..4 {
        let (s, p) = sample(&spec, seed);
        assert_eq!(s.paths.len(), 2);
        let out = solve(&p, &config, &oracle(&s)).unwrap();
        let rel = (out.residual_energy / energy(&p)).sqrt();
        assert!(rel < 1e-6, "seed {seed}: {rel}");
    }
}

#[test]
fn offsets_differ_across_snapshots() {
    let (s, p) = sample(&ScenarioSpec::default(), 3);
    let config = SolverConfig { paths: 1, refine_sweeps: 0, ..SolverConfig::desk() };
    let out = solve(&p, &config, &oracle(&s)).unwrap();
    assert!(out.tau_hat.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn solve_is_deterministic() {
    let spec = ScenarioSpec {
        max_order: 1,
        reflectors: vec![Face::XMin, Face::XMax],
        snr_db: Some(20.0),
        ..ScenarioSpec::default()
    };
    let (_, p) = sample(&spec, 8);
    let config = SolverConfig { paths: 2, ..SolverConfig::desk() };
    let init = InitStrategy::Traditional { room_dims: spec.room_dims };
    assert_eq!(solve(&p, &config, &init).unwrap(), solve(&p, &config, &init).unwrap());
}

#[test]
fn initializer_failure_falls_back_to_room_set() {
    let (s, p) = sample(&ScenarioSpec::default(), 1);
    let config = SolverConfig { paths: 1, ..SolverConfig::desk() };
    let bad = InitStrategy::OraclePerturbed {
        truth: *s.source(),
        max_error: -1.0,
        seed: 0,
        room_dims: Some([8.0, 6.0, 3.0]),
    };
    let out = solve(&p, &config, &bad).unwrap();
    assert!(out.diagnostics[0].notes.iter().any(|n| n.contains("room-box")));
    let no_room = InitStrategy::OraclePerturbed {
        truth: *s.source(),
        max_error: -1.0,
        seed: 0,
        room_dims: None,
    };
    assert!(solve(&p, &config, &no_room).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn residual_energy_never_increases(seed in 0u64..10_000) {
        let spec = ScenarioSpec {
            max_order: 1,
            reflectors: vec![Face::XMin, Face::XMax],
            snr_db: Some(20.0),
            ..ScenarioSpec::default()
        };
        let (s, p) = sample(&spec, seed);
        let config = SolverConfig { paths: 3, noise_variance: Some(s.noise_variance), ..SolverConfig::desk() };
        let out = solve(&p, &config, &InitStrategy::Traditional { room_dims: spec.room_dims }).unwrap();
        let mut last = energy(&p);
        for d in &out.diagnostics {
            prop_assert!(d.residual_energy <= last * (1.0 + 1e-12));
            last = d.residual_energy;
        }
    }

    #[test]
    fn accepted_newton_steps_raise_the_cost(seed in 0u64..10_000) {
        let spec = ScenarioSpec { snr_db: Some(15.0), ..ScenarioSpec::default() };
        let (s, p) = sample(&spec, seed);
        let config = SolverConfig { paths: 1, ..SolverConfig::desk() };
        let set = InitStrategy::Traditional { room_dims: spec.room_dims }.ps_feasible_set(&p, &config).unwrap();
        let taus = TauGrid::new(config.eta_tau, &p.grid).unwrap();
        let res: Vec<Vec<C64>> = p.snapshots.iter().map(|x| x.cfr.clone()).collect();
        let det = omp_step(&p, &res, &set, &taus).unwrap();
        let mut st = SolverState::new(&p, config);
        st.estimates.push(PathEstimate { position: det.position, gains: det.gains });
        st.tau_hat = det.taus;
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        let mut last = st.residual_energy();
        for _ in 0..8 {
            let outcome = newton_refine(&p, &mut st, 0).unwrap();
            remove(&p, &mut st).unwrap();
            let e = st.residual_energy();
            if outcome == NewtonOutcome::Accepted {
                prop_assert!(e < last);
            } else {
                prop_assert_eq!(e, last);
            }
            last = e;
        }
        let _ = s;
    }

    #[test]
    fn ls_residual_is_orthogonal_to_every_path(seed in 0u64..10_000) {
        let spec = ScenarioSpec {
            max_order: 1,
            reflectors: vec![Face::XMin, Face::XMax],
            snr_db: Some(10.0),
            ..ScenarioSpec::default()
        };
        let (s, p) = sample(&spec, seed);
        let mut st = SolverState::new(&p, SolverConfig::desk());
        st.estimates = s.paths.iter().map(|path| PathEstimate { position: path.position, gains: vec![C64::new(0.0, 0.0); p.count()] }).collect();
        st.tau_hat = s.time_offsets.clone();
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        for i in 0..p.count() {
            let scale: f64 = p.snapshots[i].cfr.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            for est in &st.estimates {
                let v = steering(&est.position, st.tau_hat[i], &p.snapshots[i].pose, &p.array, &p.grid).unwrap();
                let ip: C64 = v.iter().zip(&st.residuals[i]).map(|(a, b)| a.conj() * b).sum();
                prop_assert!(ip.norm() <= 1e-9 * scale * (v.len() as f64).sqrt());
            }
        }
    }

    #[test]
    fn cyclic_refinement_does_not_raise_the_residual(seed in 0u64..10_000) {
        let spec = ScenarioSpec {
            max_order: 1,
            reflectors: vec![Face::XMax],
            ..ScenarioSpec::default()
        };
        let (s, p) = sample(&spec, seed);
        let mut st = SolverState::new(&p, SolverConfig { refine_sweeps: 2, ..SolverConfig::desk() });
        // perturbed truth as a starting point
        st.estimates = s
            .paths
            .iter()
            .map(|path| PathEstimate { position: path.position + vla_core::Vec3::new(0.05, -0.04, 0.02), gains: vec![C64::new(0.0, 0.0); p.count()] })
            .collect();
        st.tau_hat = s.time_offsets.clone();
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        let before = st.residual_energy();
        cyclic_refine(&p, &mut st).unwrap();
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        prop_assert!(st.residual_energy() <= before);
    }
}
