//! Bilinear games, joint states, and the spectral quantities every predictor depends on.
//!
//! Convention: the θ-player minimises and the ω-player maximises `θᵀCω`. The joint
//! descent-ascent field is `F(z) = Jz` with `J = [[0, C], [-Cᵀ, 0]]`, so a plain
//! gradient step is `z - ηJz`.

use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative threshold below which `λ_min(CCᵀ)` is treated as zero.
pub const SINGULAR_RTOL: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{what} contains non-finite entries")))
    }
}

/// Payoff `θᵀCω` with `C` of shape `d_θ × d_ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearGame {
    c: DMatrix<f64>,
}

impl BilinearGame {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() == 0 || c.ncols() == 0 {
            return Err(Error::InvalidParam(
                "payoff matrix must have at least one row and one column".into(),
            ));
        }
        ensure_finite("payoff matrix", c.as_slice())?;
        Ok(Self { c })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim))
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d_theta(&self) -> usize {
        self.c.nrows()
    }

    pub fn d_omega(&self) -> usize {
        self.c.ncols()
    }

    /// Length of the stacked vector `(θ, ω)`.
    pub fn dim(&self) -> usize {
        self.d_theta() + self.d_omega()
    }

    pub fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: len,
            })
        }
    }

    /// `Jz = (Cω, -Cᵀθ)` without forming `J`. The caller guarantees `z.len() == self.dim()`.
    pub fn apply_j(&self, z: &DVector<f64>) -> DVector<f64> {
        let (dt, dw) = (self.d_theta(), self.d_omega());
        let mut out = DVector::zeros(dt + dw);
        out.rows_mut(0, dt).copy_from(&(&self.c * z.rows(dt, dw)));
        out.rows_mut(dt, dw).copy_from(&(-self.c.tr_mul(&z.rows(0, dt))));
        out
    }

    /// `(CCᵀθ, CᵀCω)`, the gradient of `R(θ, ω) = ½(‖Cω‖² + ‖Cᵀθ‖²)`.
    pub fn apply_gram(&self, z: &DVector<f64>) -> DVector<f64> {
        let (dt, dw) = (self.d_theta(), self.d_omega());
        let ctheta = self.c.tr_mul(&z.rows(0, dt));
        let comega = &self.c * z.rows(dt, dw);
        let mut out = DVector::zeros(dt + dw);
        out.rows_mut(0, dt).copy_from(&(&self.c * ctheta));
        out.rows_mut(dt, dw).copy_from(&self.c.tr_mul(&comega));
        out
    }

    /// Descent-ascent field `F(z) = Jz`.
    pub fn gradient_field(&self, z: &JointState) -> Result<DVector<f64>> {
        self.check_dim(z.dim())?;
        if z.d_theta() != self.d_theta() {
            return Err(Error::DimensionMismatch {
                expected: self.d_theta(),
                got: z.d_theta(),
            });
        }
        Ok(self.apply_j(z.stacked()))
    }

    /// The dense block operator `[[0, C], [-Cᵀ, 0]]`.
    pub fn operator_j(&self) -> DMatrix<f64> {
        let (dt, dw) = (self.d_theta(), self.d_omega());
        let mut j = DMatrix::zeros(dt + dw, dt + dw);
        j.view_mut((0, dt), (dt, dw)).copy_from(&self.c);
        j.view_mut((dt, 0), (dw, dt)).copy_from(&(-self.c.transpose()));
        j
    }

    /// Extreme eigenvalues of `CCᵀ` from a symmetric eigensolve.
    pub fn spectral_summary(&self) -> Result<SpectralSummary> {
        let gram = &self.c * self.c.transpose();
        let eig = SymmetricEigen::try_new(gram, EIGEN_EPS, EIGEN_MAX_ITER).ok_or_else(|| {
            Error::NumericalFailure("symmetric eigensolve of CCᵀ did not converge".into())
        })?;
        let lmin = eig.eigenvalues.min().max(0.0);
        let lmax = eig.eigenvalues.max().max(0.0);
        Ok(SpectralSummary::from_extremes(lmin, lmax))
    }
}

/// Extremes of the spectrum of `CCᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralSummary {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `lambda_max / lambda_min`; infinite when `lambda_min` is below the singularity threshold.
    pub kappa: f64,
}

impl SpectralSummary {
    pub fn from_extremes(lambda_min: f64, lambda_max: f64) -> Self {
        let kappa = if lambda_max <= 0.0 || lambda_min < SINGULAR_RTOL * lambda_max {
            f64::INFINITY
        } else {
            lambda_max / lambda_min
        };
        Self {
            lambda_min,
            lambda_max,
            kappa,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.kappa.is_infinite()
    }
}

/// `U(θ, ω) = v₁ᵀθ + θᵀCω + v₂ᵀω + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGame {
    pub v1: DVector<f64>,
    pub c: DMatrix<f64>,
    pub v2: DVector<f64>,
    pub offset: f64,
}

impl AffineGame {
    pub fn new(v1: DVector<f64>, c: DMatrix<f64>, v2: DVector<f64>, offset: f64) -> Result<Self> {
        if v1.len() != c.nrows() {
            return Err(Error::DimensionMismatch {
                expected: c.nrows(),
                got: v1.len(),
            });
        }
        if v2.len() != c.ncols() {
            return Err(Error::DimensionMismatch {
                expected: c.ncols(),
                got: v2.len(),
            });
        }
        ensure_finite("v1", v1.as_slice())?;
        ensure_finite("v2", v2.as_slice())?;
        ensure_finite("payoff matrix", c.as_slice())?;
        ensure_finite("offset", &[offset])?;
        Ok(Self { v1, c, v2, offset })
    }

    pub fn utility(&self, theta: &DVector<f64>, omega: &DVector<f64>) -> f64 {
        self.v1.dot(theta) + theta.dot(&(&self.c * omega)) + self.v2.dot(omega) + self.offset
    }

    /// Partial gradients `(∇_θU, ∇_ωU) = (v₁ + Cω, Cᵀθ + v₂)`.
    pub fn partial_gradients(
        &self,
        theta: &DVector<f64>,
        omega: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        (&self.v1 + &self.c * omega, self.c.tr_mul(theta) + &self.v2)
    }
}

/// Result of translating an affine game onto a pure bilinear one.
#[derive(Debug, Clone)]
pub struct NormalizedGame {
    pub game: BilinearGame,
    pub theta0: DVector<f64>,
    pub omega0: DVector<f64>,
    /// Constant left over after the translation: `U(θ-θ₀, ω-ω₀) = θᵀCω + c'`.
    pub c_prime: f64,
}

impl NormalizedGame {
    /// Equilibrium of the original affine game, `(-θ₀, -ω₀)`.
    pub fn equilibrium(&self) -> JointState {
        JointState::from_parts(-&self.theta0, -&self.omega0)
    }
}

/// Solve `Cᵀθ₀ = v₂`, `Cω₀ = v₁` so that the translated utility is purely bilinear.
pub fn normalize_affine_game(g: &AffineGame) -> Result<NormalizedGame> {
    if g.c.nrows() != g.c.ncols() {
        return Err(Error::DimensionMismatch {
            expected: g.c.nrows(),
            got: g.c.ncols(),
        });
    }
    let game = BilinearGame::new(g.c.clone())?;
    let s = game.spectral_summary()?;
    if s.is_degenerate() {
        return Err(Error::SingularMatrix {
            lambda_min: s.lambda_min,
            lambda_max: s.lambda_max,
        });
    }
    let lu = g.c.clone().lu();
    let omega0 = lu
        .solve(&g.v1)
        .ok_or_else(|| Error::NumericalFailure("LU solve for omega0 failed".into()))?;
    let theta0 = g
        .c
        .transpose()
        .lu()
        .solve(&g.v2)
        .ok_or_else(|| Error::NumericalFailure("LU solve for theta0 failed".into()))?;
    let c_prime = g.offset - g.v1.dot(&theta0);
    Ok(NormalizedGame {
        game,
        theta0,
        omega0,
        c_prime,
    })
}

pub fn equilibrium_of_affine(g: &AffineGame) -> Result<JointState> {
    Ok(normalize_affine_game(g)?.equilibrium())
}

/// Stacked parameter vector `z = (θ, ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    z: DVector<f64>,
    d_theta: usize,
}

impl JointState {
    pub fn new(theta: DVector<f64>, omega: DVector<f64>) -> Result<Self> {
        ensure_finite("theta", theta.as_slice())?;
        ensure_finite("omega", omega.as_slice())?;
        Ok(Self::from_parts(theta, omega))
    }

    fn from_parts(theta: DVector<f64>, omega: DVector<f64>) -> Self {
        let d_theta = theta.len();
        let mut z = DVector::zeros(d_theta + omega.len());
        z.rows_mut(0, d_theta).copy_from(&theta);
        z.rows_mut(d_theta, omega.len()).copy_from(&omega);
        Self { z, d_theta }
    }

    /// Wraps a stacked vector without checking finiteness; steppers use this on their own output.
    pub fn from_stacked(z: DVector<f64>, d_theta: usize) -> Self {
        assert!(d_theta <= z.len(), "d_theta exceeds stacked length");
        Self { z, d_theta }
    }

    pub fn zeros(d_theta: usize, d_omega: usize) -> Self {
        Self {
            z: DVector::zeros(d_theta + d_omega),
            d_theta,
        }
    }

    pub fn from_slices(theta: &[f64], omega: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(theta),
            DVector::from_column_slice(omega),
        )
    }

    pub fn theta(&self) -> DVectorView<'_, f64> {
        self.z.rows(0, self.d_theta)
    }

    pub fn omega(&self) -> DVectorView<'_, f64> {
        self.z.rows(self.d_theta, self.z.len() - self.d_theta)
    }

    pub fn stacked(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn into_stacked(self) -> DVector<f64> {
        self.z
    }

    pub fn d_theta(&self) -> usize {
        self.d_theta
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn is_finite(&self) -> bool {
        self.z.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.z.norm()
    }

    pub fn norm_theta(&self) -> f64 {
        self.theta().norm()
    }

    pub fn norm_omega(&self) -> f64 {
        self.omega().norm()
    }
}

/// Where a game comes from: a named generator or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GameSpec {
    /// `C = I` of size `dim × dim`.
    Identity { dim: usize },
    /// `C = diag(values)`.
    Diagonal { values: Vec<f64> },
    /// Entries i.i.d. `scale · N(0, 1)`.
    Gaussian {
        d_theta: usize,
        d_omega: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `C = U diag(s) Vᵀ` with Haar-like orthogonal factors and singular values uniform in
    /// `[s_min, s_max]`, so the condition ratio is bounded by `(s_max / s_min)²`.
    Spectrum {
        dim: usize,
        s_min: f64,
        s_max: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Plain CSV: one row per line, comma separated, no header.
    Csv { path: String },
}

fn default_scale() -> f64 {
    1.0
}

impl GameSpec {
    pub fn build(&self) -> Result<BilinearGame> {
        match self {
            GameSpec::Identity { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("identity game needs dim >= 1".into()));
                }
                BilinearGame::identity(*dim)
            }
            GameSpec::Diagonal { values } => {
                if values.is_empty() {
                    return Err(Error::Config("diagonal game needs at least one value".into()));
                }
                BilinearGame::diagonal(values)
            }
            GameSpec::Gaussian {
                d_theta,
                d_omega,
                scale,
                seed,
            } => {
                if *d_theta == 0 || *d_omega == 0 {
                    return Err(Error::Config("gaussian game needs positive dimensions".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                BilinearGame::new(gaussian_matrix(&mut rng, *d_theta, *d_omega) * *scale)
            }
            GameSpec::Spectrum {
                dim,
                s_min,
                s_max,
                seed,
            } => {
                if *dim == 0 || !(*s_min > 0.0 && s_min <= s_max && s_max.is_finite()) {
                    return Err(Error::Config(
                        "spectrum game needs dim >= 1 and 0 < s_min <= s_max".into(),
                    ));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let u = random_orthogonal(&mut rng, *dim);
                let v = random_orthogonal(&mut rng, *dim);
                let dist = Uniform::new_inclusive(*s_min, *s_max)
                    .map_err(|e| Error::Config(format!("singular value range: {e}")))?;
                let s = DVector::from_fn(*dim, |_, _| dist.sample(&mut rng));
                BilinearGame::new(u * DMatrix::from_diagonal(&s) * v.transpose())
            }
            GameSpec::Csv { path } => load_csv_matrix(Path::new(path)).and_then(BilinearGame::new),
        }
    }
}

pub(crate) fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, n, n).qr();
    let r = qr.r();
    let mut q = qr.q();
    // Sign-fix the columns so the factor does not depend on the QR routine's sign choices.
    for (j, mut col) in q.column_iter_mut().enumerate() {
        if r[(j, j)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

pub fn parse_csv_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| {
                    Error::Config(format!("csv line {}: bad value {cell:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Config(format!(
                    "csv line {}: expected {} columns, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config("csv matrix is empty".into()));
    }
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn load_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv_matrix(&text)
}
