//! Bounded gradient-error oracles standing in for the non-linear residual of a finite-width
//! network, and the width-dependent magnitude of that residual.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::JointState;

/// Width-regime parameters of the linearization-error bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkParams {
    /// Radius of the weight displacement from initialization.
    pub b: f64,
    /// Layer width. Stored as a float because interesting widths exceed `u32`.
    pub m: f64,
    /// Depth.
    pub h: f64,
    /// Constant hidden inside the big-O.
    #[serde(default = "one")]
    pub c: f64,
}

fn one() -> f64 {
    1.0
}

/// `α = c · B^{1/3} · m^{-1/6} · H^{5/2} · (ln m)^{1/2}`.
pub fn ntk_alpha(p: &NtkParams) -> Result<f64> {
    if !(p.b.is_finite() && p.m.is_finite() && p.h.is_finite() && p.c.is_finite()) {
        return Err(Error::InvalidParam("ntk parameters must be finite".into()));
    }
    if p.m < 2.0 {
        return Err(Error::InvalidParam(format!("width m = {} must be >= 2", p.m)));
    }
    if p.b < 0.0 {
        return Err(Error::InvalidParam(format!("radius B = {} must be >= 0", p.b)));
    }
    if p.h < 1.0 {
        return Err(Error::InvalidParam(format!("depth H = {} must be >= 1", p.h)));
    }
    if p.c <= 0.0 {
        return Err(Error::InvalidParam(format!("constant c = {} must be > 0", p.c)));
    }
    Ok(p.c * p.b.cbrt() * p.m.powf(-1.0 / 6.0) * p.h.powf(2.5) * p.m.ln().sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    None,
    FixedDirection,
    AdversarialOutward,
    UniformRandom,
}

impl OracleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::None => "none",
            OracleKind::FixedDirection => "fixed_direction",
            OracleKind::AdversarialOutward => "adversarial_outward",
            OracleKind::UniformRandom => "uniform_random",
        }
    }
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OracleKind::None),
            "fixed_direction" => Ok(OracleKind::FixedDirection),
            "adversarial_outward" => Ok(OracleKind::AdversarialOutward),
            "uniform_random" => Ok(OracleKind::UniformRandom),
            other => Err(Error::InvalidParam(format!("unknown oracle kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// Norm bound on every emitted vector. When absent it is derived from the `ntk` block
    /// of the run configuration, or taken as zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl OracleSpec {
    pub fn none() -> Self {
        Self {
            kind: OracleKind::None,
            alpha: None,
            seed: 0,
        }
    }

    pub fn new(kind: OracleKind, alpha: f64, seed: u64) -> Self {
        Self {
            kind,
            alpha: Some(alpha),
            seed,
        }
    }
}

/// Stateful source of gradient errors with `‖g‖ ≤ α`.
///
/// Not `Sync`: every run owns its oracle.
#[derive(Debug, Clone)]
pub struct PerturbationOracle {
    kind: OracleKind,
    alpha: f64,
    dim: usize,
    rng: ChaCha8Rng,
    direction: Option<DVector<f64>>,
}

/// Builds an oracle for stacked vectors of length `dim`. A missing `alpha` means zero.
pub fn make_oracle(spec: &OracleSpec, dim: usize) -> Result<PerturbationOracle> {
    let (kind, alpha, seed) = (spec.kind, spec.alpha.unwrap_or(0.0), spec.seed);
    if dim == 0 {
        return Err(Error::InvalidParam("oracle dimension must be >= 1".into()));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParam(format!("alpha = {alpha} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = match kind {
        OracleKind::FixedDirection => Some(unit_gaussian(&mut rng, dim)),
        _ => None,
    };
    Ok(PerturbationOracle {
        kind,
        alpha,
        dim,
        rng,
        direction,
    })
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng));
        let n = v.norm();
        if n > 0.0 {
            return v / n;
        }
    }
}

/// Scales a unit vector to length `alpha`, trimming any rounding overshoot.
fn scaled(mut unit: DVector<f64>, alpha: f64) -> DVector<f64> {
    unit *= alpha;
    let n = unit.norm();
    if n > alpha {
        unit *= alpha / n;
    }
    unit
}

impl PerturbationOracle {
    /// Oracle that always returns zero.
    pub fn zero(dim: usize) -> Self {
        make_oracle(&OracleSpec::none(), dim).expect("zero oracle with dim >= 1")
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// True when the output is always zero.
    pub fn is_silent(&self) -> bool {
        self.kind == OracleKind::None || self.alpha == 0.0
    }

    /// True when the output depends on the queried state. Only such oracles need an
    /// iterative solve inside implicit steps.
    pub fn is_state_dependent(&self) -> bool {
        self.kind == OracleKind::AdversarialOutward && self.alpha > 0.0
    }

    pub fn query(&mut self, z: &JointState) -> Result<DVector<f64>> {
        self.query_stacked(z.stacked())
    }

    pub fn query_stacked(&mut self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let out = match self.kind {
            OracleKind::None => DVector::zeros(self.dim),
            OracleKind::FixedDirection => {
                scaled(self.direction.clone().expect("direction drawn at construction"), self.alpha)
            }
            OracleKind::AdversarialOutward => {
                let n = z.norm();
                if n == 0.0 || self.alpha == 0.0 {
                    DVector::zeros(self.dim)
                } else if n.is_finite() {
                    scaled(z / n, self.alpha)
                } else {
                    // Entries near f64::MAX overflow the norm; rescale first.
                    let m = z.amax();
                    let u = z / m;
                    scaled(&u / u.norm(), self.alpha)
                }
            }
            OracleKind::UniformRandom => {
                let u = unit_gaussian(&mut self.rng, self.dim);
                scaled(u, self.alpha)
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params(b: f64, m: f64) -> NtkParams {
        NtkParams { b, m, h: 3.0, c: 1.0 }
    }

    #[test]
    fn ntk_alpha_point_values() {
        // 0.1 · 3^{5/2} · sqrt(ln 1e6)
        assert_abs_diff_eq!(ntk_alpha(&params(1.0, 1e6)).unwrap(), 5.794, epsilon = 1e-3);
        assert_abs_diff_eq!(ntk_alpha(&params(1.0, 1e12)).unwrap(), 0.8194, epsilon = 1e-3);
        assert_eq!(ntk_alpha(&params(0.0, 1e6)).unwrap(), 0.0);
    }

    #[test]
    fn ntk_alpha_rejects_bad_params() {
        assert!(matches!(ntk_alpha(&params(1.0, 1.5)), Err(Error::InvalidParam(_))));
        assert!(matches!(ntk_alpha(&params(-1.0, 1e3)), Err(Error::InvalidParam(_))));
        assert!(ntk_alpha(&params(f64::NAN, 1e3)).is_err());
    }

    #[test]
    fn ntk_alpha_decreasing_on_width_grid() {
        for h in 1..=6 {
            let vals: Vec<f64> = (3..=12)
                .map(|e| {
                    ntk_alpha(&NtkParams {
                        b: 1.0,
                        m: 10f64.powi(e),
                        h: h as f64,
                        c: 1.0,
                    })
                    .unwrap()
                })
                .collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "H = {h}: {vals:?}");
        }
    }

    #[test]
    fn zero_and_adversarial_outputs() {
        let z = JointState::from_slices(&[1.0], &[0.0]).unwrap();
        let mut none = make_oracle(&OracleSpec::new(OracleKind::None, 0.3, 0), 2).unwrap();
        assert_eq!(none.query(&z).unwrap().as_slice(), &[0.0, 0.0]);

        let mut adv = make_oracle(&OracleSpec::new(OracleKind::AdversarialOutward, 0.1, 0), 2).unwrap();
        let g = adv.query(&z).unwrap();
        assert_abs_diff_eq!(g[0], 0.1, epsilon = 1e-17);
        assert_eq!(g[1], 0.0);
        let origin = JointState::zeros(1, 1);
        assert_eq!(adv.query(&origin).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn alpha_zero_is_silent_for_every_kind() {
        let z = JointState::from_slices(&[0.4, -2.0], &[1.0]).unwrap();
        for kind in [
            OracleKind::None,
            OracleKind::FixedDirection,
            OracleKind::AdversarialOutward,
            OracleKind::UniformRandom,
        ] {
            let mut o = make_oracle(&OracleSpec::new(kind, 0.0, 9), 3).unwrap();
            assert!(o.is_silent());
            assert_eq!(o.query(&z).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn fixed_direction_is_constant() {
        let mut o = make_oracle(&OracleSpec::new(OracleKind::FixedDirection, 0.5, 3), 4).unwrap();
        let a = o.query(&JointState::zeros(2, 2)).unwrap();
        let b = o
            .query(&JointState::from_slices(&[1.0, 2.0], &[3.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a.norm(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_random_norm_and_mean() {
        let mut o = make_oracle(&OracleSpec::new(OracleKind::UniformRandom, 0.1, 11), 6).unwrap();
        let z = JointState::from_slices(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        let n = 10_000;
        let mut sum = DVector::zeros(6);
        for _ in 0..n {
            let g = o.query(&z).unwrap();
            assert_abs_diff_eq!(g.norm(), 0.1, epsilon = 1e-12);
            sum += g;
        }
        assert!((sum / n as f64).norm() <= 0.01);
    }

    #[test]
    fn dimension_and_kind_errors() {
        let mut o = make_oracle(&OracleSpec::new(OracleKind::UniformRandom, 0.1, 0), 3).unwrap();
        assert!(matches!(
            o.query(&JointState::zeros(1, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!("gaussian".parse::<OracleKind>(), Err(Error::InvalidParam(_))));
        assert_eq!(
            "adversarial_outward".parse::<OracleKind>().unwrap(),
            OracleKind::AdversarialOutward
        );
        assert!(make_oracle(&OracleSpec::new(OracleKind::None, -1.0, 0), 2).is_err());
        assert!(make_oracle(&OracleSpec::new(OracleKind::None, 1.0, 0), 0).is_err());
    }
}
