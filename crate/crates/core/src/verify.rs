//! Randomized invariant suite behind the `verify` subcommand.
//!
//! Every check records the worst observed value of its error measure next to the tolerance
//! it must stay under. Failures are data; the suite itself only errors on bugs.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{InitSpec, MethodConfig, OutputSpec, RunConfig};
use crate::dynamics::{
    implicit_fixed_point, omd_characteristic_matrices, Method, MethodKind, StepContext, Stepper,
};
use crate::game::{normalize_affine_game, AffineGame, BilinearGame, GameSpec, JointState};
use crate::harness::{detect_absorption, run};
use crate::perturbation::{make_oracle, ntk_alpha, NtkParams, OracleKind, OracleSpec, PerturbationOracle};
use crate::theory::{self, IterationQuery};

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the error measure.
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<InvariantCheck>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(10);
        writeln!(f, "invariant suite, seed {}", self.seed)?;
        writeln!(f, "{:<width$}  {:<6}  {:>12}  {:>10}  detail", "invariant", "status", "worst", "tolerance")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<width$}  {:<6}  {:>12.3e}  {:>10.1e}  {}",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.worst,
                c.tolerance,
                c.detail
            )?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Tracks the maximum of an error measure against a tolerance.
struct Worst {
    name: &'static str,
    tol: f64,
    worst: f64,
    extra_fail: Option<String>,
    detail: String,
}

impl Worst {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            tol,
            worst: 0.0,
            extra_fail: None,
            detail: String::new(),
        }
    }

    fn see(&mut self, v: f64) {
        // NaN counts as a violation.
        if v.is_nan() {
            self.worst = f64::INFINITY;
        } else {
            self.worst = self.worst.max(v);
        }
    }

    fn fail(&mut self, why: String) {
        self.extra_fail.get_or_insert(why);
    }

    fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }

    fn finish(self) -> InvariantCheck {
        let passed = self.worst <= self.tol && self.extra_fail.is_none();
        let detail = match self.extra_fail {
            Some(why) if self.detail.is_empty() => why,
            Some(why) => format!("{}; {}", self.detail, why),
            None => self.detail,
        };
        InvariantCheck {
            name: self.name.to_string(),
            passed,
            worst: self.worst,
            tolerance: self.tol,
            detail,
        }
    }
}

fn gaussian_game(rng: &mut ChaCha8Rng, max_dim: usize, square: bool) -> BilinearGame {
    let dt = rng.random_range(1..=max_dim);
    let dw = if square { dt } else { rng.random_range(1..=max_dim) };
    GameSpec::Gaussian {
        d_theta: dt,
        d_omega: dw,
        scale: 1.0,
        seed: rng.random(),
    }
    .build()
    .expect("gaussian game")
}

fn spectrum_game(rng: &mut ChaCha8Rng, max_dim: usize, s_min: f64, s_max: f64) -> (GameSpec, BilinearGame) {
    let spec = GameSpec::Spectrum {
        dim: rng.random_range(1..=max_dim),
        s_min,
        s_max,
        seed: rng.random(),
    };
    let game = spec.build().expect("spectrum game");
    (spec, game)
}

fn random_state(rng: &mut ChaCha8Rng, game: &BilinearGame, scale: f64) -> JointState {
    let z = DVector::from_fn(game.dim(), |_, _| rng.random_range(-1.0..1.0) * scale);
    JointState::from_stacked(z, game.d_theta())
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

fn check_antisymmetry(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("J antisymmetry", 0.0);
    for _ in 0..20 {
        let j = gaussian_game(rng, 20, false).operator_j();
        w.see((&j + j.transpose()).amax());
    }
    w.detail("max |J + Jᵀ| over 20 random games").finish()
}

fn check_field_orthogonality(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("field orthogonality", 1e-12);
    for _ in 0..20 {
        let g = gaussian_game(rng, 20, false);
        let jn = spectral_norm(g.c());
        for _ in 0..10 {
            let z = random_state(rng, &g, 10.0);
            let f = g.gradient_field(&z).expect("dims");
            w.see(z.stacked().dot(&f).abs() / (z.norm().powi(2) * jn));
        }
    }
    w.detail("|zᵀJz| / (‖z‖²‖J‖)").finish()
}

fn check_normalization(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("affine normalization round-trip", 1e-10);
    for _ in 0..20 {
        let n = rng.random_range(1..=10);
        let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)) + DMatrix::identity(n, n) * 2.0;
        let v1 = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let v2 = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        let g = AffineGame::new(v1, c, v2, rng.random_range(-1.0..1.0)).expect("finite");
        match normalize_affine_game(&g) {
            Ok(norm) => {
                let eq = norm.equilibrium();
                let (gt, gw) = g.partial_gradients(&eq.theta().into_owned(), &eq.omega().into_owned());
                let cn = spectral_norm(&g.c);
                w.see(gt.norm() / (g.v1.norm() + cn * eq.norm()));
                w.see(gw.norm() / (g.v2.norm() + cn * eq.norm()));
            }
            Err(e) => w.fail(e.to_string()),
        }
    }
    w.detail("stationarity residual at (-θ₀, -ω₀), relative").finish()
}

fn check_spectrum_vs_svd(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("spectral summary vs SVD", 1e-8);
    for _ in 0..12 {
        let g = gaussian_game(rng, 50, false);
        let s = g.spectral_summary().expect("eigensolve");
        let sv = g.c().clone().svd(false, false).singular_values;
        let top = sv.max().powi(2);
        let bottom = if g.d_theta() > g.d_omega() { 0.0 } else { sv.min().powi(2) };
        w.see((s.lambda_max - top).abs() / top);
        w.see((s.lambda_min - bottom).abs() / top);
    }
    w.detail("|λ - σ²| / λ_max at both extremes").finish()
}

fn check_singular_identity(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("singular values of I + ηJ", 1e-8);
    for _ in 0..20 {
        let g = gaussian_game(rng, 20, true);
        let eta = rng.random_range(0.05..2.0);
        let n = g.dim();
        let k = DMatrix::identity(n, n) + g.operator_j() * eta;
        let mut got: Vec<f64> = k.svd(false, false).singular_values.iter().copied().collect();
        let gram = g.c() * g.c().transpose();
        let eig = gram.symmetric_eigenvalues();
        let mut want: Vec<f64> = eig
            .iter()
            .flat_map(|&l| {
                let v = (1.0 + eta * eta * l.max(0.0)).sqrt();
                [v, v]
            })
            .collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(&want) {
            w.see((a - b).abs());
        }
    }
    w.detail("square random games, each λ(CCᵀ) twice").finish()
}

fn check_sga(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("SGA norm non-decrease", 1e-12);
    let g = gaussian_game(rng, 10, false);
    let stepper = Stepper::new(&g, Method::sga(0.05).expect("eta")).expect("stepper");
    let mut zero = PerturbationOracle::zero(g.dim());
    let mut strict_misses = 0;
    for _ in 0..100 {
        let z = random_state(rng, &g, 1.0);
        let next = stepper.step(&StepContext::first(&z), &mut zero).expect("step").state;
        w.see((z.norm() - next.norm()) / z.norm());
        if g.apply_j(z.stacked()).norm() > 1e-8 && next.norm() <= z.norm() {
            strict_misses += 1;
        }
    }
    if strict_misses > 0 {
        w.fail(format!("{strict_misses} steps did not strictly increase"));
    }
    w.detail("relative per-step decrease over 100 random steps").finish()
}

fn check_iu_contraction(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("IU exact contraction", 1e-10);
    for _ in 0..20 {
        let g = gaussian_game(rng, 20, false);
        // CᵀC is singular when d_ω > d_θ and the bound in terms of CCᵀ does not apply
        let g = if g.d_omega() > g.d_theta() {
            BilinearGame::new(g.c().transpose()).expect("finite")
        } else {
            g
        };
        let s = g.spectral_summary().expect("eigensolve");
        let eta = rng.random_range(0.1..2.0);
        let rho = theory::iu_contraction_exact(&s, eta);
        let stepper = Stepper::new(&g, Method::iu(eta).expect("eta")).expect("stepper");
        let mut zero = PerturbationOracle::zero(g.dim());
        let mut z = random_state(rng, &g, 1.0);
        for _ in 0..20 {
            let next = stepper.step(&StepContext::first(&z), &mut zero).expect("step").state;
            w.see(next.norm() - rho * z.norm());
            z = next;
        }
    }
    w.detail("‖z'‖ - ‖z‖/√(1 + η²λ_min), d_θ ≥ d_ω").finish()
}

fn check_pm_contraction(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("PM contraction", 1e-10);
    for _ in 0..20 {
        let (_, g) = spectrum_game(rng, 20, 0.3, 2.0);
        let s = g.spectral_summary().expect("eigensolve");
        let gamma = rng.random_range(0.2..3.0);
        let eta = theory::pm_step_size(&s, gamma).expect("step size");
        let sigma = theory::pm_contraction(&s, gamma).expect("contraction");
        let stepper = Stepper::new(&g, Method::pm(eta, gamma).expect("method")).expect("stepper");
        let mut zero = PerturbationOracle::zero(g.dim());
        let mut z = random_state(rng, &g, 1.0);
        for _ in 0..20 {
            let next = stepper.step(&StepContext::first(&z), &mut zero).expect("step").state;
            w.see(next.norm() / z.norm() - sigma);
            z = next;
        }
    }
    w.detail("per-step ratio minus σ̄ at the prescribed η").finish()
}

fn check_co_pm(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("CO equals PM", 1e-12);
    for _ in 0..20 {
        let (_, g) = spectrum_game(rng, 20, 0.3, 2.0);
        let s = g.spectral_summary().expect("eigensolve");
        let gamma = rng.random_range(0.2..3.0);
        let eta = theory::pm_step_size(&s, gamma).expect("step size");
        let pm = Stepper::new(&g, Method::pm(eta, gamma).expect("method")).expect("stepper");
        let co = Stepper::new(&g, Method::co(eta, gamma).expect("method")).expect("stepper");
        let mut zero = PerturbationOracle::zero(g.dim());
        let mut a = random_state(rng, &g, 1.0);
        let mut b = a.clone();
        for _ in 0..100 {
            a = pm.step(&StepContext::first(&a), &mut zero).expect("step").state;
            b = co.step(&StepContext::first(&b), &mut zero).expect("step").state;
            w.see((a.stacked() - b.stacked()).amax());
        }
    }
    w.detail("max entrywise deviation over 100 steps").finish()
}

fn check_omd_roots(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("OMD root identities", 1e-8);
    for _ in 0..20 {
        let g = gaussian_game(rng, 10, false);
        let s = g.spectral_summary().expect("eigensolve");
        let eta = 0.4 / s.lambda_max.sqrt();
        match omd_characteristic_matrices(&g, eta) {
            Ok((r1, r2)) => {
                let n = g.dim();
                let j = g.operator_j();
                w.see((&r1 + &r2 - (DMatrix::identity(n, n) - &j * (2.0 * eta))).amax());
                w.see((&r1 * &r2 + &j * eta).amax());
            }
            Err(e) => w.fail(e.to_string()),
        }
    }
    w.detail("R₁ + R₂ = I - 2ηJ and R₁R₂ = -ηJ at η = 0.4/√λ_max").finish()
}

fn check_implicit_consistency(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("implicit solve consistency", 1e-10);
    for _ in 0..10 {
        let g = gaussian_game(rng, 10, false);
        let eta = rng.random_range(0.1..2.0);
        let n = g.dim();
        let lu = (DMatrix::identity(n, n) + g.operator_j() * eta).lu();
        let stepper = Stepper::new(&g, Method::iu(eta).expect("eta")).expect("stepper");
        let z = random_state(rng, &g, 1.0);
        let direct = stepper
            .step(&StepContext::first(&z), &mut PerturbationOracle::zero(n))
            .expect("step")
            .state;
        let picard = implicit_fixed_point(
            |b| Ok(lu.solve(b).expect("invertible")),
            z.stacked(),
            eta,
            |_| Ok(DVector::zeros(n)),
            1e-10,
            100,
        );
        match picard {
            Ok((x, _, _)) => w.see((x - direct.stacked()).amax()),
            Err(e) => w.fail(e.to_string()),
        }
    }
    w.detail("fixed-point path with a zero oracle vs Schur solve").finish()
}

const ALL_KINDS: [OracleKind; 4] = [
    OracleKind::None,
    OracleKind::FixedDirection,
    OracleKind::AdversarialOutward,
    OracleKind::UniformRandom,
];

fn check_oracle_norms(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("oracle norm bound", 1e-15);
    let dim = 6;
    let mut oracles: Vec<PerturbationOracle> = ALL_KINDS
        .iter()
        .map(|&k| make_oracle(&OracleSpec::new(k, 0.1, rng.random()), dim).expect("oracle"))
        .collect();
    for i in 0..100_000 {
        let scale = match i % 4 {
            0 => 0.0,
            1 => 1e12,
            2 => 1e-12,
            _ => 1.0,
        };
        let z = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0) * scale);
        let o = &mut oracles[i % 4];
        let g = o.query_stacked(&z).expect("dims");
        w.see(g.norm() - o.alpha());
    }
    w.detail("‖g‖ - α over 10⁵ fuzzed queries").finish()
}

fn check_oracle_determinism(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("oracle determinism", 0.0);
    for &k in &ALL_KINDS {
        let spec = OracleSpec::new(k, 0.3, rng.random());
        let mut a = make_oracle(&spec, 5).expect("oracle");
        let mut b = make_oracle(&spec, 5).expect("oracle");
        for _ in 0..200 {
            let z = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            let d = (a.query_stacked(&z).expect("dims") - b.query_stacked(&z).expect("dims")).amax();
            w.see(d);
        }
    }
    w.detail("identical specs, identical query streams").finish()
}

fn check_uniform_symmetry(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("uniform oracle sign symmetry", 0.03);
    let mut o = make_oracle(&OracleSpec::new(OracleKind::UniformRandom, 0.1, rng.random()), 8).expect("oracle");
    let z = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
    let n = 10_000;
    let neg = (0..n)
        .filter(|_| o.query_stacked(&z).expect("dims").dot(&z) < 0.0)
        .count();
    let frac = neg as f64 / n as f64;
    w.see((frac - 0.5).abs());
    w.detail(format!("negative-alignment fraction {frac:.4}")).finish()
}

fn check_ntk_monotone() -> InvariantCheck {
    let mut w = Worst::new("ntk alpha decreasing in width", 0.0);
    for h in 1..=6 {
        let alphas: Vec<f64> = (3..=12)
            .map(|e| {
                ntk_alpha(&NtkParams {
                    b: 1.0,
                    m: 10f64.powi(e),
                    h: h as f64,
                    c: 1.0,
                })
                .expect("valid")
            })
            .collect();
        for pair in alphas.windows(2) {
            // positive means an increase
            w.see((pair[1] - pair[0]).max(0.0) + if pair[1] == pair[0] { 1.0 } else { 0.0 });
        }
    }
    w.detail("m = 10³..10¹², B = 1, H = 1..6").finish()
}

fn random_spectrum(rng: &mut ChaCha8Rng) -> crate::game::SpectralSummary {
    let lmin = 10f64.powf(rng.random_range(-2.0..1.0));
    let kappa = 10f64.powf(rng.random_range(0.0..4.0));
    crate::game::SpectralSummary::from_extremes(lmin, lmin * kappa)
}

fn check_bound_dominance(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("IU bound dominance", 1e-12);
    for i in 0..200 {
        let s = if i == 0 {
            crate::game::SpectralSummary::from_extremes(2.5, 2.5)
        } else {
            random_spectrum(rng)
        };
        let eta = theory::iu_step_size(&s).expect("step");
        let exact = theory::iu_contraction_exact(&s, eta);
        let lin = theory::iu_contraction_linearized(&s).expect("contraction");
        w.see(exact - lin);
        if i == 0 {
            w.see((exact - lin).abs());
        }
    }
    w.detail("exact minus linearized contraction, κ ∈ [1, 10⁴]").finish()
}

fn check_radius_linearity(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("radius linearity", 1e-12);
    for _ in 0..100 {
        let s = random_spectrum(rng);
        let alpha = rng.random_range(1e-4..1.0);
        let gamma = rng.random_range(0.1..3.0);
        let iu1 = theory::iu_neighborhood_radius(&s, alpha).expect("radius");
        let iu2 = theory::iu_neighborhood_radius(&s, 2.0 * alpha).expect("radius");
        let pm1 = theory::pm_neighborhood_radius(&s, gamma, alpha).expect("radius");
        let pm2 = theory::pm_neighborhood_radius(&s, gamma, 2.0 * alpha).expect("radius");
        w.see((iu2 - 2.0 * iu1).abs() / iu2);
        w.see((pm2 - 2.0 * pm1).abs() / pm2);
    }
    w.detail("R(2α) vs 2R(α), relative").finish()
}

fn check_balance(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("radius balance equation", 1e-12);
    let q = IterationQuery::new(1.0, 1e-6).expect("query");
    for _ in 0..100 {
        let s = random_spectrum(rng);
        let alpha = rng.random_range(1e-4..1.0);
        let gamma = rng.random_range(0.1..3.0);
        for p in [
            theory::predict_iu(&s, alpha, &q).expect("iu"),
            theory::predict_pm(&s, gamma, alpha, &q).expect("pm"),
        ] {
            w.see((p.contraction_linearized * p.radius + p.error_budget() - p.radius) / p.radius.max(1.0));
        }
    }
    w.detail("contraction·R + η·α·mult - R").finish()
}

/// Runs one absorption trial and returns (entry within bound, never left R, never left R+ε).
fn absorption_trial(spec: GameSpec, kind: MethodKind, gamma: Option<f64>, seed: u64) -> crate::Result<(bool, bool, bool)> {
    let alpha = 0.01;
    let mut cfg = RunConfig {
        game: spec,
        method: MethodConfig { kind, eta: None, gamma },
        steps: 1,
        init: InitSpec::RandomSphere { radius: 1.0, seed },
        oracle: OracleSpec::new(OracleKind::AdversarialOutward, alpha, seed),
        ntk: None,
        epsilon: 1.0,
        record_average_iterate: false,
        output: OutputSpec::default(),
    };
    let resolved = cfg.resolve()?;
    let p = resolved.prediction.expect("IU and PM have predictions");
    let eps = 1e-3 * p.radius;
    let q = IterationQuery::new(1.0, eps)?;
    let bound = match kind {
        MethodKind::Iu => theory::iu_iteration_bound(&resolved.spectrum, &q)?,
        _ => theory::pm_iteration_bound(&resolved.spectrum, gamma.unwrap_or(1.0), &q)?.derived,
    };
    cfg.steps = bound as usize + 100;
    let norms = run(&cfg)?.norms();
    let outer = detect_absorption(&norms, p.radius + eps, bound);
    let inner = detect_absorption(&norms, p.radius, bound);
    let entered = outer.entry_time.is_some_and(|t| t as u64 <= bound);
    Ok((entered, inner.never_left || inner.entry_time.is_none(), outer.never_left))
}

fn check_absorption(rng: &mut ChaCha8Rng, kind: MethodKind) -> InvariantCheck {
    let (name, s_max, gammas): (&'static str, f64, &[f64]) = match kind {
        MethodKind::Iu => ("IU absorption", 1.5, &[0.0]),
        _ => ("PM absorption", 1.0, &[0.5, 1.0, 2.0]),
    };
    let mut w = Worst::new(name, 0.0);
    let mut failures = 0;
    let mut trials = 0;
    for _ in 0..20 {
        let (spec, _) = spectrum_game(rng, 20, 0.5, s_max);
        for seed in 0..3 {
            for &gamma in gammas {
                let gamma = (kind == MethodKind::Pm).then_some(gamma);
                trials += 1;
                match absorption_trial(spec.clone(), kind, gamma, seed) {
                    Ok((a, b, c)) if a && b && c => {}
                    Ok(_) => failures += 1,
                    Err(e) => w.fail(e.to_string()),
                }
            }
        }
    }
    w.see(failures as f64);
    w.detail(format!("{trials} trials, entry into R + ε within T and no exit")).finish()
}

fn check_counterfactual(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("zero-alpha counterfactual", 1e-12);
    for kind in MethodKind::ALL {
        let (spec, _) = spectrum_game(rng, 10, 0.5, 1.0);
        let base = RunConfig {
            game: spec,
            method: MethodConfig {
                kind,
                eta: Some(0.2),
                gamma: kind.needs_gamma().then_some(0.5),
            },
            steps: 50,
            init: InitSpec::RandomSphere { radius: 1.0, seed: rng.random() },
            oracle: OracleSpec::none(),
            ntk: None,
            epsilon: 1e-6,
            record_average_iterate: false,
            output: OutputSpec::default(),
        };
        let mut zeroed = base.clone();
        zeroed.oracle = OracleSpec::new(OracleKind::UniformRandom, 0.0, 3);
        match (run(&base), run(&zeroed)) {
            (Ok(a), Ok(b)) => {
                w.see((a.final_state.stacked() - b.final_state.stacked()).amax());
                for (x, y) in a.rows.iter().zip(&b.rows) {
                    w.see((x.norm_z - y.norm_z).abs());
                }
            }
            (Err(e), _) | (_, Err(e)) => w.fail(e.to_string()),
        }
    }
    w.detail("α = 0 uniform oracle vs no oracle, all five methods").finish()
}

fn check_trace_determinism(rng: &mut ChaCha8Rng) -> InvariantCheck {
    let mut w = Worst::new("trace determinism", 0.0);
    let cfg = RunConfig {
        game: GameSpec::Gaussian { d_theta: 4, d_omega: 3, scale: 0.5, seed: rng.random() },
        method: MethodConfig { kind: MethodKind::Pm, eta: Some(0.1), gamma: Some(0.5) },
        steps: 100,
        init: InitSpec::RandomSphere { radius: 1.0, seed: rng.random() },
        oracle: OracleSpec::new(OracleKind::UniformRandom, 0.05, rng.random()),
        ntk: None,
        epsilon: 1e-6,
        record_average_iterate: true,
        output: OutputSpec::default(),
    };
    let render = || -> crate::Result<Vec<u8>> {
        let mut buf = Vec::new();
        run(&cfg)?.write_csv(&mut buf).expect("in-memory write");
        Ok(buf)
    };
    match (render(), render()) {
        (Ok(a), Ok(b)) => w.see(if a == b { 0.0 } else { 1.0 }),
        (Err(e), _) | (_, Err(e)) => w.fail(e.to_string()),
    }
    w.detail("two runs of one config, byte comparison").finish()
}

/// Runs every invariant on instances drawn from `seed`. `inject_failure` appends a check
/// that always fails, for exercising the failure path.
pub fn verify_suite_with(seed: u64, inject_failure: bool) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut checks = vec![
        check_antisymmetry(rng),
        check_field_orthogonality(rng),
        check_normalization(rng),
        check_spectrum_vs_svd(rng),
        check_singular_identity(rng),
        check_sga(rng),
        check_iu_contraction(rng),
        check_pm_contraction(rng),
        check_co_pm(rng),
        check_omd_roots(rng),
        check_implicit_consistency(rng),
        check_oracle_norms(rng),
        check_oracle_determinism(rng),
        check_uniform_symmetry(rng),
        check_ntk_monotone(),
        check_bound_dominance(rng),
        check_radius_linearity(rng),
        check_balance(rng),
        check_absorption(rng, MethodKind::Iu),
        check_absorption(rng, MethodKind::Pm),
        check_counterfactual(rng),
        check_trace_determinism(rng),
    ];
    if inject_failure {
        let mut w = Worst::new("injected failure", 0.0);
        w.see(1.0);
        checks.push(w.detail("deliberate failure requested").finish());
    }
    VerifyReport { seed, checks }
}

pub fn verify_suite(seed: u64) -> VerifyReport {
    verify_suite_with(seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_seed_passes() {
        let report = verify_suite(0);
        assert!(report.all_passed(), "{report}");
        let co = report.get("CO equals PM").unwrap();
        assert!(co.worst <= 1e-12);
        assert!(report.get("SGA norm non-decrease").unwrap().passed);
    }

    #[test]
    fn injected_failure_fails() {
        let report = verify_suite_with(1, true);
        assert!(!report.all_passed());
        assert!(!report.get("injected failure").unwrap().passed);
    }
}
