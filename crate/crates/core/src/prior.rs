//! Gaussian prior models and the hyperparameter layout.
//!
//! `θ[0]` is always the noise variance `σ_m²`. The remaining entries belong to
//! the prior covariance:
//!
//! * [`PriorModel::Matern`]: `θ = (σ_m², σ_n, ℓ)`.
//! * [`PriorModel::SpaceTime`]: `θ = (σ_m², σ_n, ℓ_t, ℓ_s)` with
//!   `Q = Q_t(ν_t, 1, ℓ_t) ⊗ Q_s(ν_s, σ_n, ℓ_s)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{assemble_q, dq_dell, dq_dsigma, MaternSpec, PointGrid, Smoothness};
use crate::linop::{KroneckerMap, SharedMap};
use crate::paramlr::MaternLowRank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorModel {
    Matern {
        nu: Smoothness,
        grid: PointGrid,
    },
    SpaceTime {
        nu_t: Smoothness,
        times: PointGrid,
        nu_s: Smoothness,
        space: PointGrid,
    },
}

/// Prior mean `μ(θ)`; both variants are independent of `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum MeanModel {
    #[default]
    Zero,
    Constant(f64),
}

pub fn validate_theta(theta: &[f64], expected: usize) -> Result<()> {
    if theta.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "hyperparameter vector",
            expected,
            actual: theta.len(),
        });
    }
    if let Some((i, t)) = theta.iter().enumerate().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidParameter(format!(
            "hyperparameter θ[{i}] = {t} must be positive"
        )));
    }
    Ok(())
}

impl PriorModel {
    /// Number of unknowns `n`.
    pub fn n(&self) -> usize {
        match self {
            PriorModel::Matern { grid, .. } => grid.len(),
            PriorModel::SpaceTime { times, space, .. } => times.len() * space.len(),
        }
    }

    /// Length `K` of `θ`, including `σ_m²`.
    pub fn num_hyper(&self) -> usize {
        match self {
            PriorModel::Matern { .. } => 3,
            PriorModel::SpaceTime { .. } => 4,
        }
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            PriorModel::Matern { .. } => vec!["sigma_m_sq", "sigma_n", "ell"],
            PriorModel::SpaceTime { .. } => vec!["sigma_m_sq", "sigma_n", "ell_t", "ell_s"],
        }
    }

    fn specs(&self, theta: &[f64]) -> Result<(MaternSpec, Option<MaternSpec>)> {
        validate_theta(theta, self.num_hyper())?;
        Ok(match self {
            PriorModel::Matern { nu, .. } => (MaternSpec::new(*nu, theta[1], theta[2])?, None),
            PriorModel::SpaceTime { nu_t, nu_s, .. } => (
                MaternSpec::new(*nu_s, theta[1], theta[3])?,
                Some(MaternSpec::new(*nu_t, 1.0, theta[2])?),
            ),
        })
    }

    /// `Q(θ)` as an operator.
    pub fn covariance(&self, theta: &[f64]) -> Result<SharedMap> {
        let (s, t) = self.specs(theta)?;
        match self {
            PriorModel::Matern { grid, .. } => Ok(Arc::new(assemble_q(&s, grid)?)),
            PriorModel::SpaceTime { times, space, .. } => {
                let qt = assemble_q(&t.expect("space-time spec"), times)?;
                let qs = assemble_q(&s, space)?;
                Ok(Arc::new(KroneckerMap::new(Arc::new(qt), Arc::new(qs))))
            }
        }
    }

    /// `∂Q/∂θ_i` for `i = 1..K`; entry `0` (noise variance) is `None`.
    pub fn covariance_derivatives(&self, theta: &[f64]) -> Result<Vec<Option<SharedMap>>> {
        let (s, t) = self.specs(theta)?;
        match self {
            PriorModel::Matern { grid, .. } => Ok(vec![
                None,
                Some(Arc::new(dq_dsigma(&s, grid)?) as SharedMap),
                Some(Arc::new(dq_dell(&s, grid)?) as SharedMap),
            ]),
            PriorModel::SpaceTime { times, space, .. } => {
                let t = t.expect("space-time spec");
                let qt: SharedMap = Arc::new(assemble_q(&t, times)?);
                let qs: SharedMap = Arc::new(assemble_q(&s, space)?);
                let kron = |a: SharedMap, b: SharedMap| -> SharedMap { Arc::new(KroneckerMap::new(a, b)) };
                Ok(vec![
                    None,
                    Some(kron(qt.clone(), Arc::new(dq_dsigma(&s, space)?))),
                    Some(kron(Arc::new(dq_dell(&t, times)?), qs)),
                    Some(kron(qt, Arc::new(dq_dell(&s, space)?))),
                ])
            }
        }
    }

    /// Dense `Q(θ)` and its derivatives (index 0 is the zero matrix).
    pub fn dense(&self, theta: &[f64]) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
        let (s, t) = self.specs(theta)?;
        match self {
            PriorModel::Matern { grid, .. } => {
                let n = grid.len();
                Ok((
                    assemble_q(&s, grid)?.into_matrix(),
                    vec![
                        DMatrix::zeros(n, n),
                        dq_dsigma(&s, grid)?.into_matrix(),
                        dq_dell(&s, grid)?.into_matrix(),
                    ],
                ))
            }
            PriorModel::SpaceTime { times, space, .. } => {
                let t = t.expect("space-time spec");
                let qt = assemble_q(&t, times)?.into_matrix();
                let qs = assemble_q(&s, space)?.into_matrix();
                let n = self.n();
                Ok((
                    qt.kronecker(&qs),
                    vec![
                        DMatrix::zeros(n, n),
                        qt.kronecker(&dq_dsigma(&s, space)?.into_matrix()),
                        dq_dell(&t, times)?.into_matrix().kronecker(&qs),
                        qt.kronecker(&dq_dell(&s, space)?.into_matrix()),
                    ],
                ))
            }
        }
    }
}

/// Chebyshev resolution and length-scale boxes for the preconditioner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowRankSettings {
    /// Nodes per spatial dimension; the spatial rank is `p^d`.
    pub space_p: usize,
    /// Nodes along time (space-time models only).
    pub time_p: usize,
    /// Nodes along each interpolated length scale.
    pub theta_p: usize,
    pub ell_range: (f64, f64),
    pub ell_t_range: (f64, f64),
}

impl Default for LowRankSettings {
    fn default() -> Self {
        Self {
            space_p: 8,
            time_p: 5,
            theta_p: 24,
            ell_range: (0.05, 3.0),
            ell_t_range: (0.05, 3.0),
        }
    }
}

/// `Q(θ) ≈ U M(θ) Uᵀ` for a [`PriorModel`].
#[derive(Debug, Clone)]
pub enum LowRankPrior {
    Matern(MaternLowRank),
    SpaceTime {
        time: MaternLowRank,
        space: MaternLowRank,
    },
}

impl LowRankPrior {
    pub fn build(prior: &PriorModel, settings: &LowRankSettings) -> Result<Self> {
        match prior {
            PriorModel::Matern { nu, grid } => Ok(LowRankPrior::Matern(MaternLowRank::build(
                *nu,
                grid,
                settings.space_p,
                settings.ell_range,
                settings.theta_p,
            )?)),
            PriorModel::SpaceTime {
                nu_t,
                times,
                nu_s,
                space,
            } => Ok(LowRankPrior::SpaceTime {
                time: MaternLowRank::build(*nu_t, times, settings.time_p, settings.ell_t_range, settings.theta_p)?,
                space: MaternLowRank::build(*nu_s, space, settings.space_p, settings.ell_range, settings.theta_p)?,
            }),
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            LowRankPrior::Matern(m) => m.rank(),
            LowRankPrior::SpaceTime { time, space } => time.rank() * space.rank(),
        }
    }

    /// The fixed basis `U` (`n × r`).
    pub fn factor(&self) -> DMatrix<f64> {
        match self {
            LowRankPrior::Matern(m) => m.factor.u.clone(),
            LowRankPrior::SpaceTime { time, space } => time.factor.u.kronecker(&space.factor.u),
        }
    }

    /// `M(θ)` for the full hyperparameter vector.
    pub fn core(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            LowRankPrior::Matern(m) => {
                validate_theta(theta, 3)?;
                m.core_matrix(theta[1], theta[2])
            }
            LowRankPrior::SpaceTime { time, space } => {
                validate_theta(theta, 4)?;
                let mt = time.core_matrix(1.0, theta[2])?;
                let ms = space.core_matrix(theta[1], theta[3])?;
                Ok(mt.kronecker(&ms))
            }
        }
    }
}
