//! One-step transition maps for the five min-max dynamics.
//!
//! All steppers act on the stacked state `z = (θ, ω)` and apply `C`, `Cᵀ` directly. The
//! implicit update factors its Schur complement once per [`Stepper`]; only
//! [`omd_characteristic_matrices`] and verification code form dense joint operators.
//!
//! Perturbations enter as follows, with `g` an oracle output:
//!
//! | method | update |
//! |--------|--------|
//! | SGA | `z' = z - ηJz + ηg(z)` |
//! | IU  | `(I + ηJ) z' = z + ηg(z')` |
//! | PM  | `h = z - γ(Jz - g(z))`, `z' = z - η(Jh - g(h))` |
//! | CO  | `z' = z - η(Jz + γ∇R(z)) + ηg(z)` |
//! | OMD | `z' = z - 2ηJz + ηJz₋ - 2ηg(z) + ηg(z₋)` |

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{BilinearGame, JointState};
use crate::perturbation::PerturbationOracle;

/// Relative tolerance of the fixed-point solve inside a perturbed implicit step.
pub const IMPLICIT_TOL: f64 = 1e-10;
/// Sweep cap of the fixed-point solve inside a perturbed implicit step.
pub const IMPLICIT_MAX_SWEEPS: usize = 100;
/// Eigenvalues of `I - 4η²CCᵀ` down to this negative value are clamped to zero.
pub const PSD_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "SGA")]
    Sga,
    #[serde(rename = "IU")]
    Iu,
    #[serde(rename = "PM")]
    Pm,
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "OMD")]
    Omd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Sga,
        MethodKind::Iu,
        MethodKind::Pm,
        MethodKind::Co,
        MethodKind::Omd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Sga => "SGA",
            MethodKind::Iu => "IU",
            MethodKind::Pm => "PM",
            MethodKind::Co => "CO",
            MethodKind::Omd => "OMD",
        }
    }

    pub fn needs_gamma(self) -> bool {
        matches!(self, MethodKind::Pm | MethodKind::Co)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParam(format!("unknown method {s:?}")))
    }
}

/// A method tag with its step size `η` and look-ahead/regularizer weight `γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Method {
    pub kind: MethodKind,
    pub eta: f64,
    pub gamma: f64,
}

impl Method {
    pub fn new(kind: MethodKind, eta: f64, gamma: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParam(format!("eta = {eta} must be positive and finite")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParam(format!("gamma = {gamma} must be >= 0 and finite")));
        }
        if kind.needs_gamma() && gamma == 0.0 {
            return Err(Error::InvalidParam(format!("{kind} needs gamma > 0")));
        }
        Ok(Self { kind, eta, gamma })
    }

    pub fn sga(eta: f64) -> Result<Self> {
        Self::new(MethodKind::Sga, eta, 0.0)
    }

    pub fn iu(eta: f64) -> Result<Self> {
        Self::new(MethodKind::Iu, eta, 0.0)
    }

    pub fn pm(eta: f64, gamma: f64) -> Result<Self> {
        Self::new(MethodKind::Pm, eta, gamma)
    }

    pub fn co(eta: f64, gamma: f64) -> Result<Self> {
        Self::new(MethodKind::Co, eta, gamma)
    }

    pub fn omd(eta: f64) -> Result<Self> {
        Self::new(MethodKind::Omd, eta, 0.0)
    }
}

/// Inputs to a single transition.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub t: usize,
    pub current: &'a JointState,
    /// `z_{t-1}`, needed by OMD for `t >= 1`.
    pub previous: Option<&'a JointState>,
    /// Oracle output used at `t - 1`, needed by perturbed OMD for `t >= 1`.
    pub previous_perturbation: Option<&'a DVector<f64>>,
}

impl<'a> StepContext<'a> {
    pub fn first(current: &'a JointState) -> Self {
        Self {
            t: 0,
            current,
            previous: None,
            previous_perturbation: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: JointState,
    /// Oracle outputs actually used, in query order. Empty when the oracle is silent.
    pub perturbations: Vec<DVector<f64>>,
    /// Fixed-point sweeps spent by a perturbed implicit step.
    pub sweeps: usize,
}

impl StepOutcome {
    fn plain(state: JointState) -> Self {
        Self {
            state,
            perturbations: Vec::new(),
            sweeps: 0,
        }
    }

    /// Largest norm among the oracle outputs of this step.
    pub fn perturb_norm(&self) -> f64 {
        self.perturbations.iter().map(|g| g.norm()).fold(0.0, f64::max)
    }
}

/// Cached solver for `(I + ηJ) x = b` through the smaller Schur complement.
#[derive(Debug, Clone)]
struct ImplicitSolver {
    eta: f64,
    eliminate_theta: bool,
    chol: Cholesky<f64, Dyn>,
}

impl ImplicitSolver {
    fn new(game: &BilinearGame, eta: f64) -> Result<Self> {
        let c = game.c();
        let eliminate_theta = game.d_omega() <= game.d_theta();
        let (n, gram) = if eliminate_theta {
            (game.d_omega(), c.tr_mul(c))
        } else {
            (game.d_theta(), c * c.transpose())
        };
        let schur = DMatrix::identity(n, n) + gram * (eta * eta);
        let chol = Cholesky::new(schur).ok_or_else(|| {
            Error::NumericalFailure("Schur complement of I + ηJ is not positive definite".into())
        })?;
        Ok(Self {
            eta,
            eliminate_theta,
            chol,
        })
    }

    fn solve(&self, game: &BilinearGame, b: &DVector<f64>) -> Result<DVector<f64>> {
        let (dt, dw) = (game.d_theta(), game.d_omega());
        let c = game.c();
        let eta = self.eta;
        let bt = b.rows(0, dt);
        let bw = b.rows(dt, dw);
        let mut out = DVector::zeros(dt + dw);
        if self.eliminate_theta {
            // (I + η²CᵀC) ω' = b_ω + ηCᵀb_θ,  θ' = b_θ - ηCω'
            let rhs = bw + c.tr_mul(&bt) * eta;
            let omega = self.chol.solve(&rhs);
            let theta = bt - (c * &omega) * eta;
            out.rows_mut(0, dt).copy_from(&theta);
            out.rows_mut(dt, dw).copy_from(&omega);
        } else {
            // (I + η²CCᵀ) θ' = b_θ - ηCb_ω,  ω' = b_ω + ηCᵀθ'
            let rhs = bt - (c * bw) * eta;
            let theta = self.chol.solve(&rhs);
            let omega = bw + c.tr_mul(&theta) * eta;
            out.rows_mut(0, dt).copy_from(&theta);
            out.rows_mut(dt, dw).copy_from(&omega);
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NumericalFailure("implicit solve produced non-finite values".into()))
        }
    }
}

/// Step function bound to a game and method, with the implicit factorization cached.
#[derive(Debug, Clone)]
pub struct Stepper<'g> {
    game: &'g BilinearGame,
    method: Method,
    implicit: Option<ImplicitSolver>,
}

impl<'g> Stepper<'g> {
    pub fn new(game: &'g BilinearGame, method: Method) -> Result<Self> {
        let implicit = match method.kind {
            MethodKind::Iu => Some(ImplicitSolver::new(game, method.eta)?),
            _ => None,
        };
        Ok(Self {
            game,
            method,
            implicit,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn game(&self) -> &BilinearGame {
        self.game
    }

    pub fn step(&self, ctx: &StepContext<'_>, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        self.check(ctx.current)?;
        if !oracle.is_silent() && oracle.dim() != self.game.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.game.dim(),
                got: oracle.dim(),
            });
        }
        match self.method.kind {
            MethodKind::Sga => self.sga(ctx.current, oracle),
            MethodKind::Iu => self.iu(ctx.current, oracle),
            MethodKind::Pm => self.pm(ctx.current, oracle),
            MethodKind::Co => self.co(ctx.current, oracle),
            MethodKind::Omd => self.omd(ctx, oracle),
        }
    }

    /// The same step with a silent oracle. Never touches any generator state.
    pub fn step_unperturbed(&self, ctx: &StepContext<'_>) -> Result<JointState> {
        let mut zero = PerturbationOracle::zero(self.game.dim());
        let ctx = StepContext {
            previous_perturbation: None,
            ..*ctx
        };
        Ok(self.step(&ctx, &mut zero)?.state)
    }

    fn check(&self, z: &JointState) -> Result<()> {
        self.game.check_dim(z.dim())?;
        if z.d_theta() != self.game.d_theta() {
            return Err(Error::DimensionMismatch {
                expected: self.game.d_theta(),
                got: z.d_theta(),
            });
        }
        Ok(())
    }

    fn wrap(&self, z: DVector<f64>) -> JointState {
        JointState::from_stacked(z, self.game.d_theta())
    }

    fn sga(&self, z: &JointState, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        let eta = self.method.eta;
        let zt = z.stacked();
        let mut next = zt - self.game.apply_j(zt) * eta;
        if oracle.is_silent() {
            return Ok(StepOutcome::plain(self.wrap(next)));
        }
        let g = oracle.query(z)?;
        next.axpy(eta, &g, 1.0);
        Ok(StepOutcome {
            state: self.wrap(next),
            perturbations: vec![g],
            sweeps: 0,
        })
    }

    fn iu(&self, z: &JointState, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        let solver = self.implicit.as_ref().expect("IU stepper owns a solver");
        let eta = self.method.eta;
        let zt = z.stacked();
        if oracle.is_silent() {
            return Ok(StepOutcome::plain(self.wrap(solver.solve(self.game, zt)?)));
        }
        if !oracle.is_state_dependent() {
            // The output does not depend on where it is queried, so one draw per step
            // makes the implicit equation linear.
            let g = oracle.query(z)?;
            let next = solver.solve(self.game, &(zt + &g * eta))?;
            return Ok(StepOutcome {
                state: self.wrap(next),
                perturbations: vec![g],
                sweeps: 0,
            });
        }
        let tol = IMPLICIT_TOL * (1.0 + z.norm());
        let (next, g, sweeps) = implicit_fixed_point(
            |b| solver.solve(self.game, b),
            zt,
            eta,
            |x| oracle.query_stacked(x),
            tol,
            IMPLICIT_MAX_SWEEPS,
        )?;
        Ok(StepOutcome {
            state: self.wrap(next),
            perturbations: vec![g],
            sweeps,
        })
    }

    fn pm(&self, z: &JointState, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        let Method { eta, gamma, .. } = self.method;
        let zt = z.stacked();
        let mut half = zt - self.game.apply_j(zt) * gamma;
        if oracle.is_silent() {
            let next = zt - self.game.apply_j(&half) * eta;
            return Ok(StepOutcome::plain(self.wrap(next)));
        }
        let g_now = oracle.query(z)?;
        half.axpy(gamma, &g_now, 1.0);
        let g_half = oracle.query_stacked(&half)?;
        let mut next = zt - self.game.apply_j(&half) * eta;
        next.axpy(eta, &g_half, 1.0);
        Ok(StepOutcome {
            state: self.wrap(next),
            perturbations: vec![g_now, g_half],
            sweeps: 0,
        })
    }

    fn co(&self, z: &JointState, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        let Method { eta, gamma, .. } = self.method;
        let zt = z.stacked();
        let drift = self.game.apply_j(zt) + self.game.apply_gram(zt) * gamma;
        let mut next = zt - drift * eta;
        if oracle.is_silent() {
            return Ok(StepOutcome::plain(self.wrap(next)));
        }
        let g = oracle.query(z)?;
        next.axpy(eta, &g, 1.0);
        Ok(StepOutcome {
            state: self.wrap(next),
            perturbations: vec![g],
            sweeps: 0,
        })
    }

    fn omd(&self, ctx: &StepContext<'_>, oracle: &mut PerturbationOracle) -> Result<StepOutcome> {
        let eta = self.method.eta;
        let z = ctx.current;
        let prev = match (ctx.previous, ctx.t) {
            (Some(p), _) => {
                self.check(p)?;
                p
            }
            (None, 0) => z,
            (None, t) => return Err(Error::MissingHistory { t }),
        };
        let zt = z.stacked();
        let mut next =
            zt - self.game.apply_j(zt) * (2.0 * eta) + self.game.apply_j(prev.stacked()) * eta;
        if oracle.is_silent() {
            return Ok(StepOutcome::plain(self.wrap(next)));
        }
        let g = oracle.query(z)?;
        let g_prev = match (ctx.previous_perturbation, ctx.t) {
            (Some(p), _) => {
                self.game.check_dim(p.len())?;
                p.clone()
            }
            (None, 0) => g.clone(),
            (None, t) => return Err(Error::MissingHistory { t }),
        };
        next.axpy(-2.0 * eta, &g, 1.0);
        next.axpy(eta, &g_prev, 1.0);
        Ok(StepOutcome {
            state: self.wrap(next),
            perturbations: vec![g],
            sweeps: 0,
        })
    }
}

/// Solves `x = solve(z + η·field(x))` by Picard iteration seeded with `solve(z)`.
///
/// Returns the iterate, the field value it was produced from, and the sweep count. The
/// stopping test is the exact residual `‖(I + ηJ)x - z - η·field(x)‖ ≤ tol`, which for this
/// scheme equals `η‖field(x_k) - field(x_{k-1})‖`.
pub fn implicit_fixed_point(
    solve: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    z: &DVector<f64>,
    eta: f64,
    mut field: impl FnMut(&DVector<f64>) -> Result<DVector<f64>>,
    tol: f64,
    max_sweeps: usize,
) -> Result<(DVector<f64>, DVector<f64>, usize)> {
    let mut x = solve(z)?;
    let mut g = field(&x)?;
    let mut residual = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let x_next = solve(&(z + &g * eta))?;
        let g_next = field(&x_next)?;
        residual = eta * (&g_next - &g).norm();
        // x_next was produced from g, so g is the perturbation this step actually used.
        let used = std::mem::replace(&mut g, g_next);
        x = x_next;
        if residual <= tol {
            return Ok((x, used, sweep));
        }
    }
    Err(Error::ImplicitNonconvergence {
        iterations: max_sweeps,
        change: residual,
    })
}

fn run_single(
    game: &BilinearGame,
    method: Method,
    expected: MethodKind,
    ctx: &StepContext<'_>,
    oracle: &mut PerturbationOracle,
) -> Result<JointState> {
    if method.kind != expected {
        return Err(Error::InvalidParam(format!(
            "{} stepper called with a {} method",
            expected, method.kind
        )));
    }
    Ok(Stepper::new(game, method)?.step(ctx, oracle)?.state)
}

/// Simultaneous gradient descent-ascent.
pub fn step_sga(
    game: &BilinearGame,
    method: Method,
    ctx: &StepContext<'_>,
    oracle: &mut PerturbationOracle,
) -> Result<JointState> {
    run_single(game, method, MethodKind::Sga, ctx, oracle)
}

/// Implicit (proximal-point) update. Factorizes on every call; use [`Stepper`] for runs.
pub fn step_iu(
    game: &BilinearGame,
    method: Method,
    ctx: &StepContext<'_>,
    oracle: &mut PerturbationOracle,
) -> Result<JointState> {
    run_single(game, method, MethodKind::Iu, ctx, oracle)
}

/// Predictive half-step with `γ`, then a gradient step with `η` taken at the half-step.
pub fn step_pm(
    game: &BilinearGame,
    method: Method,
    ctx: &StepContext<'_>,
    oracle: &mut PerturbationOracle,
) -> Result<JointState> {
    run_single(game, method, MethodKind::Pm, ctx, oracle)
}

/// Consensus optimization on the exact bilinear field.
pub fn step_co(game: &BilinearGame, method: Method, ctx: &StepContext<'_>) -> Result<JointState> {
    let mut zero = PerturbationOracle::zero(game.dim());
    run_single(game, method, MethodKind::Co, ctx, &mut zero)
}

/// Optimistic mirror descent. At `t = 0` the missing history defaults to the current iterate.
pub fn step_omd(
    game: &BilinearGame,
    method: Method,
    ctx: &StepContext<'_>,
    oracle: &mut PerturbationOracle,
) -> Result<JointState> {
    run_single(game, method, MethodKind::Omd, ctx, oracle)
}

/// Largest step size for which `I - 4η²·diag(CCᵀ, CᵀC)` stays positive semidefinite.
pub fn omd_eta_limit(game: &BilinearGame) -> Result<f64> {
    let lmax = game.spectral_summary()?.lambda_max;
    Ok(if lmax > 0.0 {
        0.5 / lmax.sqrt()
    } else {
        f64::INFINITY
    })
}

fn psd_sqrt(m: DMatrix<f64>, eta: f64, limit: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m, 1e-15, 10_000)
        .ok_or_else(|| Error::NumericalFailure("block eigensolve did not converge".into()))?;
    if eig.eigenvalues.iter().any(|&l| l < -PSD_CLAMP) {
        return Err(Error::StepTooLarge { eta, limit });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Factors `R₁`, `R₂` of the optimistic recursion, with `R₁ + R₂ = I - 2ηJ` and
/// `R₁R₂ = -ηJ`.
pub fn omd_characteristic_matrices(
    game: &BilinearGame,
    eta: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParam(format!("eta = {eta} must be >= 0 and finite")));
    }
    let limit = omd_eta_limit(game)?;
    if eta > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { eta, limit });
    }
    let (dt, dw) = (game.d_theta(), game.d_omega());
    let n = dt + dw;
    let c = game.c();
    let scale = 4.0 * eta * eta;
    let top = psd_sqrt(DMatrix::identity(dt, dt) - (c * c.transpose()) * scale, eta, limit)?;
    let bottom = psd_sqrt(DMatrix::identity(dw, dw) - c.tr_mul(c) * scale, eta, limit)?;
    let mut root = DMatrix::zeros(n, n);
    root.view_mut((0, 0), (dt, dt)).copy_from(&top);
    root.view_mut((dt, dt), (dw, dw)).copy_from(&bottom);
    let a = DMatrix::identity(n, n) - game.operator_j() * (2.0 * eta);
    let r1 = (&a + &root) * 0.5;
    let r2 = (a - root) * 0.5;
    Ok((r1, r2))
}
