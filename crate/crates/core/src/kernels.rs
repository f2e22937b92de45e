//! Matérn covariance kernels, the diagonal noise model, and the analytic
//! hyperparameter derivatives that feed the gradient.
//!
//! Only the half-integer smoothness values `ν ∈ {1/2, 3/2, 5/2}` are
//! supported. For these the Bessel form collapses to an exponential times a
//! polynomial in `a = √(2ν) r / ℓ`, which also gives closed `∂κ/∂ℓ`:
//!
//! | ν   | κ / σ²                      | ∂κ/∂ℓ / σ²                  |
//! |-----|-----------------------------|-----------------------------|
//! | 1/2 | `e^{-a}`                    | `a e^{-a} / ℓ`              |
//! | 3/2 | `(1 + a) e^{-a}`            | `a² e^{-a} / ℓ`             |
//! | 5/2 | `(1 + a + a²/3) e^{-a}`     | `a² (1 + a) e^{-a} / (3ℓ)`  |

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linop::{DenseMap, DiagonalMap, Vector, DEFAULT_MATERIALIZE_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Smoothness {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
    #[serde(rename = "5/2")]
    FiveHalves,
}

impl Smoothness {
    pub const ALL: [Smoothness; 3] = [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves];

    pub fn value(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    /// Correlation `κ/σ²` at scaled distance `a = √(2ν) r / ℓ`.
    fn shape(self, a: f64) -> f64 {
        let e = (-a).exp();
        match self {
            Smoothness::Half => e,
            Smoothness::ThreeHalves => (1.0 + a) * e,
            Smoothness::FiveHalves => (1.0 + a + a * a / 3.0) * e,
        }
    }

    /// `ℓ · ∂(κ/σ²)/∂ℓ` at scaled distance `a`.
    fn shape_ell_derivative(self, a: f64) -> f64 {
        let e = (-a).exp();
        match self {
            Smoothness::Half => a * e,
            Smoothness::ThreeHalves => a * a * e,
            Smoothness::FiveHalves => a * a * (1.0 + a) * e / 3.0,
        }
    }
}

impl fmt::Display for Smoothness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Smoothness::Half => "1/2",
            Smoothness::ThreeHalves => "3/2",
            Smoothness::FiveHalves => "5/2",
        })
    }
}

impl FromStr for Smoothness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" | "0.5" => Ok(Smoothness::Half),
            "3/2" | "1.5" => Ok(Smoothness::ThreeHalves),
            "5/2" | "2.5" => Ok(Smoothness::FiveHalves),
            other => Err(Error::InvalidParameter(format!(
                "unsupported Matérn smoothness {other}; expected 1/2, 3/2 or 5/2"
            ))),
        }
    }
}

/// Isotropic Matérn kernel with standard deviation `sigma` and length scale `ell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternSpec {
    pub nu: Smoothness,
    pub sigma: f64,
    pub ell: f64,
}

impl MaternSpec {
    pub fn new(nu: Smoothness, sigma: f64, ell: f64) -> Result<Self> {
        let spec = Self { nu, sigma, ell };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Matérn sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.ell > 0.0 && self.ell.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Matérn length scale must be positive, got {}",
                self.ell
            )));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        (2.0 * self.nu.value()).sqrt() / self.ell
    }

    /// Kernel value at distance `r`.
    pub fn at_distance(&self, r: f64) -> f64 {
        self.sigma * self.sigma * self.nu.shape(r * self.scale())
    }

    /// `∂κ/∂ℓ` at distance `r`.
    pub fn ell_derivative_at_distance(&self, r: f64) -> f64 {
        self.sigma * self.sigma * self.nu.shape_ell_derivative(r * self.scale()) / self.ell
    }
}

/// `κ(x, y)` for the given spec.
pub fn matern_eval(spec: &MaternSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_len("matern_eval", x.len(), y.len())?;
    Ok(spec.at_distance(distance(x, y)))
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Points in `ℝ^d`, `d ∈ {1, 2, 3}`, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGrid {
    dim: usize,
    coords: Vec<f64>,
}

impl PointGrid {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!(
                "spatial dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if coords.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "{} coordinates do not split into points of dimension {dim}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite point coordinate".into()));
        }
        Ok(Self { dim, coords })
    }

    /// Pixel centres of an `n_side × n_side` grid on the unit square, x fastest.
    pub fn unit_square(n_side: usize) -> Self {
        let h = 1.0 / n_side as f64;
        let mut coords = Vec::with_capacity(2 * n_side * n_side);
        for iy in 0..n_side {
            for ix in 0..n_side {
                coords.push((ix as f64 + 0.5) * h);
                coords.push((iy as f64 + 0.5) * h);
            }
        }
        Self { dim: 2, coords }
    }

    /// `n` cell centres on `[0, 1]`.
    pub fn unit_interval(n: usize) -> Self {
        let h = 1.0 / n as f64;
        Self {
            dim: 1,
            coords: (0..n).map(|i| (i as f64 + 0.5) * h).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    /// Per-dimension `(min, max)`.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|k| {
                self.points().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p[k]), hi.max(p[k]))
                })
            })
            .collect()
    }
}

fn assemble_symmetric(grid: &PointGrid, cap: usize, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    let n = grid.len();
    if n.saturating_mul(n) > cap {
        return Err(Error::MaterializeCap {
            rows: n,
            cols: n,
            entries: n * n,
            cap,
        });
    }
    let mut q = DMatrix::zeros(n, n);
    for j in 0..n {
        let pj = grid.point(j);
        q[(j, j)] = f(0.0);
        for i in (j + 1)..n {
            let v = f(distance(grid.point(i), pj));
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    Ok(q)
}

/// Dense `Q` with `Q_ij = κ(x_i, x_j)`, assembled exactly symmetric.
pub fn assemble_q(spec: &MaternSpec, grid: &PointGrid) -> Result<DenseMap> {
    assemble_q_capped(spec, grid, DEFAULT_MATERIALIZE_CAP)
}

pub fn assemble_q_capped(spec: &MaternSpec, grid: &PointGrid, cap: usize) -> Result<DenseMap> {
    spec.validate()?;
    Ok(DenseMap::new(assemble_symmetric(grid, cap, |r| spec.at_distance(r))?))
}

/// `∂Q/∂σ = (2/σ) Q`.
pub fn dq_dsigma(spec: &MaternSpec, grid: &PointGrid) -> Result<DenseMap> {
    spec.validate()?;
    let s = spec.sigma;
    Ok(DenseMap::new(assemble_symmetric(grid, DEFAULT_MATERIALIZE_CAP, |r| {
        2.0 / s * spec.at_distance(r)
    })?))
}

/// `∂Q/∂ℓ` from the closed-form derivative of each half-integer kernel.
pub fn dq_dell(spec: &MaternSpec, grid: &PointGrid) -> Result<DenseMap> {
    spec.validate()?;
    Ok(DenseMap::new(assemble_symmetric(grid, DEFAULT_MATERIALIZE_CAP, |r| {
        spec.ell_derivative_at_distance(r)
    })?))
}

/// `R = σ_m² I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_m_sq: f64,
}

impl NoiseModel {
    pub fn new(sigma_m_sq: f64) -> Result<Self> {
        if !(sigma_m_sq > 0.0 && sigma_m_sq.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise variance must be positive, got {sigma_m_sq}"
            )));
        }
        Ok(Self { sigma_m_sq })
    }
}

/// The cheap operations on `R` that the estimator needs.
#[derive(Debug, Clone, Copy)]
pub struct NoiseOps {
    model: NoiseModel,
    m: usize,
}

pub fn noise_ops(model: NoiseModel, m: usize) -> Result<NoiseOps> {
    NoiseModel::new(model.sigma_m_sq)?;
    Ok(NoiseOps { model, m })
}

impl NoiseOps {
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn variance(&self) -> f64 {
        self.model.sigma_m_sq
    }

    pub fn r_apply(&self, v: &Vector) -> Vector {
        v * self.model.sigma_m_sq
    }

    pub fn r_inv_apply(&self, v: &Vector) -> Vector {
        v / self.model.sigma_m_sq
    }

    pub fn r_sqrt_apply(&self, v: &Vector) -> Vector {
        v * self.model.sigma_m_sq.sqrt()
    }

    pub fn r_inv_sqrt_apply(&self, v: &Vector) -> Vector {
        v / self.model.sigma_m_sq.sqrt()
    }

    pub fn logdet_r(&self) -> f64 {
        self.m as f64 * self.model.sigma_m_sq.ln()
    }

    pub fn r_map(&self) -> DiagonalMap {
        DiagonalMap::constant(self.m, self.model.sigma_m_sq)
    }

    /// `∂R/∂σ_m² = I`.
    pub fn dr_dsigma_m_sq(&self) -> DiagonalMap {
        DiagonalMap::constant(self.m, 1.0)
    }
}
