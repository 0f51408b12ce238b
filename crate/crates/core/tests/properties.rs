use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use lastiter::config::{InitSpec, MethodConfig, OutputSpec, RunConfig, TraceFormat};
use lastiter::dynamics::{Method, MethodKind, StepContext, Stepper};
use lastiter::game::{BilinearGame, GameSpec, JointState, SpectralSummary};
use lastiter::harness::{detect_absorption, run};
use lastiter::perturbation::{make_oracle, OracleKind, OracleSpec, PerturbationOracle};
use lastiter::theory::{self, IterationQuery};

fn matrix(max: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

/// A game together with a joint state of matching size.
fn game_and_state(max: usize) -> impl Strategy<Value = (BilinearGame, JointState)> {
    matrix(max).prop_flat_map(|c| {
        let (r, k) = c.shape();
        prop::collection::vec(-2.0f64..2.0, r + k).prop_map(move |z| {
            (
                BilinearGame::new(c.clone()).unwrap(),
                JointState::from_stacked(DVector::from_vec(z), r),
            )
        })
    })
}

fn spectrum() -> impl Strategy<Value = SpectralSummary> {
    (-2.0f64..1.0, 0.0f64..4.0)
        .prop_map(|(a, k)| SpectralSummary::from_extremes(10f64.powf(a), 10f64.powf(a + k)))
}

fn oracle_kind() -> impl Strategy<Value = OracleKind> {
    prop_oneof![
        Just(OracleKind::None),
        Just(OracleKind::FixedDirection),
        Just(OracleKind::AdversarialOutward),
        Just(OracleKind::UniformRandom),
    ]
}

fn one_step(game: &BilinearGame, method: Method, z: &JointState) -> JointState {
    let stepper = Stepper::new(game, method).unwrap();
    let mut zero = PerturbationOracle::zero(game.dim());
    stepper.step(&StepContext::first(z), &mut zero).unwrap().state
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn operator_is_antisymmetric(c in matrix(8)) {
        let j = BilinearGame::new(c).unwrap().operator_j();
        prop_assert_eq!(&j, &(-j.transpose()));
    }

    #[test]
    fn field_is_orthogonal_to_state((g, z) in game_and_state(8)) {
        let f = g.gradient_field(&z).unwrap();
        let scale = z.norm() * z.norm() * g.c().norm();
        prop_assert!(z.stacked().dot(&f).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn matrix_free_field_matches_dense((g, z) in game_and_state(8)) {
        let dense = g.operator_j() * z.stacked();
        let free = g.apply_j(z.stacked());
        prop_assert!((dense - free).amax() <= 1e-12 * (1.0 + z.norm() * g.c().norm()));
    }

    #[test]
    fn sga_never_shrinks((g, z) in game_and_state(8), eta in 0.001f64..1.0) {
        let next = one_step(&g, Method::sga(eta).unwrap(), &z);
        prop_assert!(next.norm() >= z.norm() * (1.0 - 1e-12));
        // ‖z'‖² = ‖z‖² + η²‖Jz‖² exactly
        let jz = g.apply_j(z.stacked()).norm();
        let want = (z.norm().powi(2) + eta * eta * jz * jz).sqrt();
        prop_assert!((next.norm() - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn iu_contracts_at_exact_rate((g, z) in game_and_state(8), eta in 0.01f64..3.0) {
        prop_assume!(g.d_theta() >= g.d_omega());
        let s = g.spectral_summary().unwrap();
        let next = one_step(&g, Method::iu(eta).unwrap(), &z);
        prop_assert!(next.norm() <= z.norm() * theory::iu_contraction_exact(&s, eta) + 1e-10);
        // the implicit equation holds: (I + ηJ)z' = z
        let residual = next.stacked() + g.apply_j(next.stacked()) * eta - z.stacked();
        prop_assert!(residual.amax() <= 1e-10 * (1.0 + z.norm()));
    }

    #[test]
    fn co_tracks_pm((g, z) in game_and_state(6), eta in 0.01f64..0.3, gamma in 0.01f64..1.0) {
        let mut a = z.clone();
        let mut b = z;
        for _ in 0..10 {
            a = one_step(&g, Method::pm(eta, gamma).unwrap(), &a);
            b = one_step(&g, Method::co(eta, gamma).unwrap(), &b);
        }
        prop_assert!((a.stacked() - b.stacked()).amax() <= 1e-12 * (1.0 + a.norm()));
    }

    #[test]
    fn oracle_respects_alpha(
        kind in oracle_kind(),
        alpha in 0.0f64..10.0,
        seed in any::<u64>(),
        scale in prop_oneof![Just(0.0), Just(1e-12), Just(1.0), Just(1e12)],
        dir in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let mut o = make_oracle(&OracleSpec::new(kind, alpha, seed), 5).unwrap();
        let z = DVector::from_vec(dir) * scale;
        for _ in 0..4 {
            let g = o.query_stacked(&z).unwrap();
            prop_assert!(g.iter().all(|x| x.is_finite()));
            prop_assert!(g.norm() <= alpha + 1e-15, "norm {} > {}", g.norm(), alpha);
        }
    }

    #[test]
    fn exact_iu_rate_is_dominated(s in spectrum()) {
        let eta = theory::iu_step_size(&s).unwrap();
        prop_assert!(theory::iu_contraction_exact(&s, eta) <= theory::iu_contraction_linearized(&s).unwrap() + 1e-12);
    }

    #[test]
    fn radii_are_linear_in_alpha(s in spectrum(), alpha in 1e-6f64..1.0, gamma in 0.05f64..5.0) {
        let iu = theory::iu_neighborhood_radius(&s, alpha).unwrap();
        let iu2 = theory::iu_neighborhood_radius(&s, 2.0 * alpha).unwrap();
        prop_assert!((iu2 - 2.0 * iu).abs() <= 1e-12 * iu2);
        let pm = theory::pm_neighborhood_radius(&s, gamma, alpha).unwrap();
        let pm2 = theory::pm_neighborhood_radius(&s, gamma, 2.0 * alpha).unwrap();
        prop_assert!((pm2 - 2.0 * pm).abs() <= 1e-12 * pm2);
    }

    #[test]
    fn radii_balance_the_contraction(s in spectrum(), alpha in 1e-6f64..1.0, gamma in 0.05f64..5.0) {
        let q = IterationQuery::new(1.0, 1e-6).unwrap();
        let iu = theory::predict_iu(&s, alpha, &q).unwrap();
        prop_assert!(iu.contraction_linearized * iu.radius + iu.eta * alpha <= iu.radius * (1.0 + 1e-12));
        let pm = theory::predict_pm(&s, gamma, alpha, &q).unwrap();
        prop_assert!(pm.contraction_linearized * pm.radius + pm.eta * (gamma + 1.0) * alpha <= pm.radius * (1.0 + 1e-12));
    }

    #[test]
    fn absorption_matches_brute_force(norms in prop::collection::vec(0.0f64..2.0, 1..60), radius in 0.0f64..2.0) {
        let report = detect_absorption(&norms, radius, 0);
        let inside = |n: f64| n <= radius * (1.0 + 1e-9);
        let entry = (0..norms.len()).find(|&i| inside(norms[i]));
        prop_assert_eq!(report.entry_time, entry);
        let stays = entry.is_some_and(|e| norms[e..].iter().all(|&n| inside(n)));
        prop_assert_eq!(report.never_left, stays);
    }

    #[test]
    fn config_json_round_trips(
        kind in prop_oneof![Just(MethodKind::Sga), Just(MethodKind::Iu), Just(MethodKind::Pm), Just(MethodKind::Co), Just(MethodKind::Omd)],
        eta in prop::option::of(0.001f64..1.0),
        gamma in prop::option::of(0.001f64..2.0),
        oracle in oracle_kind(),
        alpha in prop::option::of(0.0f64..1.0),
        seed in any::<u64>(),
        steps in 1usize..10_000,
        epsilon in 1e-12f64..1.0,
        jsonl in any::<bool>(),
    ) {
        let cfg = RunConfig {
            game: GameSpec::Gaussian { d_theta: 3, d_omega: 2, scale: 0.7, seed },
            method: MethodConfig { kind, eta, gamma },
            steps,
            init: InitSpec::RandomSphere { radius: 1.5, seed },
            oracle: OracleSpec { kind: oracle, alpha, seed },
            ntk: None,
            epsilon,
            record_average_iterate: jsonl,
            output: OutputSpec { path: None, format: if jsonl { TraceFormat::Jsonl } else { TraceFormat::Csv } },
        };
        let back = RunConfig::from_json(&cfg.to_json_pretty()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn csv_trace_floats_round_trip(seed in any::<u64>(), alpha in 0.0f64..0.5) {
        let cfg = RunConfig {
            game: GameSpec::Gaussian { d_theta: 3, d_omega: 3, scale: 1.0, seed },
            method: MethodConfig { kind: MethodKind::Iu, eta: Some(0.5), gamma: None },
            steps: 20,
            init: InitSpec::RandomSphere { radius: 1.0, seed },
            oracle: OracleSpec::new(OracleKind::UniformRandom, alpha, seed),
            ntk: None,
            epsilon: 1e-6,
            record_average_iterate: false,
            output: OutputSpec::default(),
        };
        let trace = run(&cfg).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for (line, row) in text.lines().skip(1).zip(&trace.rows) {
            let norm: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            prop_assert_eq!(norm.to_bits(), row.norm_z.to_bits());
        }
    }
}
