//! JSON run configuration. Parsing is strict: unknown keys are errors.

use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{Method, MethodKind};
use crate::error::{Error, Result};
use crate::game::{BilinearGame, GameSpec, JointState, SpectralSummary};
use crate::perturbation::{ntk_alpha, NtkParams, OracleKind, OracleSpec};
use crate::theory::{self, IterationQuery, TheoryPrediction};

/// Default target slack `ε` of iteration bounds.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: MethodKind,
    /// Step size. IU and PM fall back to their prescribed step sizes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Required by PM and CO.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// Uniform point on the sphere of the given radius around the equilibrium.
    RandomSphere {
        radius: f64,
        #[serde(default)]
        seed: u64,
    },
    Explicit { theta: Vec<f64>, omega: Vec<f64> },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::RandomSphere {
            radius: 1.0,
            seed: 0,
        }
    }
}

impl InitSpec {
    pub fn build(&self, game: &BilinearGame) -> Result<JointState> {
        match self {
            InitSpec::RandomSphere { radius, seed } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::Config(format!("init radius {radius} must be positive")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let z: DVector<f64> = loop {
                    let v: DVector<f64> =
                        DVector::from_fn(game.dim(), |_, _| StandardNormal.sample(&mut rng));
                    let n = v.norm();
                    if n > 0.0 {
                        break v * (*radius / n);
                    }
                };
                Ok(JointState::from_stacked(z, game.d_theta()))
            }
            InitSpec::Explicit { theta, omega } => {
                if theta.len() != game.d_theta() || omega.len() != game.d_omega() {
                    return Err(Error::Config(format!(
                        "explicit init has shape ({}, {}) but the game is {}x{}",
                        theta.len(),
                        omega.len(),
                        game.d_theta(),
                        game.d_omega()
                    )));
                }
                JointState::from_slices(theta, omega).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default)]
    pub format: TraceFormat,
}

/// One simulated run, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: GameSpec,
    pub method: MethodConfig,
    pub steps: usize,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "OracleSpec::none")]
    pub oracle: OracleSpec,
    /// Width-regime parameters; supplies `α` when the oracle block leaves it out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ntk: Option<NtkParams>,
    /// Target slack above the predicted radius for iteration bounds.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub record_average_iterate: bool,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `α` from the oracle block, else from the `ntk` block, else zero.
    pub fn alpha(&self) -> Result<f64> {
        match (self.oracle.alpha, &self.ntk) {
            (Some(a), _) => Ok(a),
            (None, Some(p)) => ntk_alpha(p),
            (None, None) => Ok(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        let alpha = self.alpha().map_err(|e| Error::Config(e.to_string()))?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha = {alpha} must be >= 0")));
        }
        if let Some(g) = self.method.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma = {g} must be positive")));
            }
        }
        if let Some(e) = self.method.eta {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("eta = {e} must be positive")));
            }
        }
        if self.method.kind.needs_gamma() && self.method.gamma.is_none() {
            return Err(Error::Config(format!("{} needs method.gamma", self.method.kind)));
        }
        Ok(())
    }

    /// Builds the game and every derived quantity of a run.
    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let game = self.game.build().map_err(|e| match e {
            Error::Io { .. } | Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        let spectrum = game.spectral_summary()?;
        let alpha = self.alpha()?;
        let kind = self.method.kind;
        let gamma = self.method.gamma.unwrap_or(0.0);
        let eta = match (self.method.eta, kind) {
            (Some(e), _) => e,
            (None, MethodKind::Iu) => theory::iu_step_size(&spectrum)?,
            (None, MethodKind::Pm) => theory::pm_step_size(&spectrum, gamma)?,
            (None, k) => return Err(Error::Config(format!("{k} needs method.eta"))),
        };
        let method = Method::new(kind, eta, gamma).map_err(|e| Error::Config(e.to_string()))?;
        let z0 = self.init.build(&game)?;
        // With d_ω > d_θ, CᵀC is singular even when CCᵀ is not: part of ω never contracts.
        let prediction = if spectrum.is_degenerate() || game.d_omega() > game.d_theta() {
            None
        } else {
            let query = IterationQuery::new(z0.norm().max(f64::MIN_POSITIVE), self.epsilon)?;
            theory::predict(kind, &spectrum, gamma, alpha, &query)?
        };
        Ok(Resolved {
            game,
            spectrum,
            method,
            alpha,
            oracle: OracleSpec {
                kind: self.oracle.kind,
                alpha: Some(alpha),
                seed: self.oracle.seed,
            },
            z0,
            prediction,
        })
    }

    /// Replaces the init and oracle seeds.
    pub fn reseed(&mut self, seed: u64) {
        if let InitSpec::RandomSphere { seed: s, .. } = &mut self.init {
            *s = seed;
        }
        self.oracle.seed = seed;
    }

    pub fn oracle_kind(&self) -> OracleKind {
        self.oracle.kind
    }
}

/// A configuration turned into concrete objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub game: BilinearGame,
    pub spectrum: SpectralSummary,
    pub method: Method,
    pub alpha: f64,
    /// Oracle spec with `alpha` filled in.
    pub oracle: OracleSpec,
    pub z0: JointState,
    /// Closed-form prediction, when the method has one and the spectrum is non-degenerate.
    pub prediction: Option<TheoryPrediction>,
}
