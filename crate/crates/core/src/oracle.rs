//! Dense reference objective, gradient and log-determinant.
//!
//! Everything here factors `Ψ` with Cholesky; it is meant to be slow and
//! right at sizes where `Ψ` fits in memory.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::estimator::{neg_log_hyperprior, HyperPrior, Model};
use crate::linop::{materialize, Vector};
use crate::prior::validate_theta;

/// Largest `m` accepted by [`DenseProblem`].
pub const MAX_DENSE_ROWS: usize = 2000;

fn cholesky(mat: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = mat.nrows();
    Cholesky::new(mat).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("Cholesky factorization failed on a {n}×{n} matrix"))
    })
}

/// `log det` of an SPD matrix as `2 Σ log Lᵢᵢ`.
pub fn exact_logdet(mat: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(mat.clone())?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// A [`Model`] with `A`, `d` and `μ` held densely.
#[derive(Debug, Clone)]
pub struct DenseProblem {
    pub model: Model,
    pub a: DMatrix<f64>,
    pub mu: Vector,
    pub hyper: HyperPrior,
}

/// `Q`, `Ψ` and their derivatives at one `θ`.
#[derive(Debug, Clone)]
pub struct DenseState {
    pub q: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// `∂Ψ/∂θᵢ` for every `i`.
    pub dpsi: Vec<DMatrix<f64>>,
}

impl DenseProblem {
    pub fn new(model: &Model, hyper: HyperPrior) -> Result<Self> {
        let m = model.m();
        if m > MAX_DENSE_ROWS {
            return Err(Error::InvalidParameter(format!(
                "dense oracle is limited to m ≤ {MAX_DENSE_ROWS}, got {m}"
            )));
        }
        let a = materialize(model.a.as_ref(), usize::MAX)?;
        Ok(Self {
            mu: model.mean_vector(),
            model: model.clone(),
            a,
            hyper,
        })
    }

    pub fn state(&self, theta: &[f64]) -> Result<DenseState> {
        validate_theta(theta, self.model.num_hyper())?;
        let m = self.model.m();
        let (q, dq) = self.model.prior.dense(theta)?;
        let at = self.a.transpose();
        let psi = &self.a * &q * &at + DMatrix::identity(m, m) * theta[0];
        let dpsi = dq
            .iter()
            .enumerate()
            .map(|(i, d)| {
                if i == 0 {
                    DMatrix::identity(m, m)
                } else {
                    &self.a * d * &at
                }
            })
            .collect();
        Ok(DenseState { q, psi, dpsi })
    }

    fn residual(&self) -> Vector {
        &self.a * &self.mu - &self.model.data
    }

    /// `γ Σθ + ½ log det Ψ + ½ rᵀ Ψ⁻¹ r`.
    pub fn exact_objective(&self, theta: &[f64]) -> Result<f64> {
        let st = self.state(theta)?;
        let chol = cholesky(st.psi)?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let r = self.residual();
        let z = chol.solve(&r);
        let (hp, _) = neg_log_hyperprior(theta, &self.hyper)?;
        Ok(hp + 0.5 * logdet + 0.5 * r.dot(&z))
    }

    /// `γ + ½ tr(Ψ⁻¹∂ᵢΨ) − ½ [zᵀ ∂ᵢΨ z − 2 (Aᵀz)ᵀ ∂ᵢμ]` with `z = Ψ⁻¹ r`.
    pub fn exact_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let st = self.state(theta)?;
        let chol = cholesky(st.psi)?;
        let psi_inv = chol.inverse();
        let r = self.residual();
        let z = chol.solve(&r);
        let at_z = self.a.tr_mul(&z);
        let (_, mut grad) = neg_log_hyperprior(theta, &self.hyper)?;
        for (i, g) in grad.iter_mut().enumerate() {
            let dp = &st.dpsi[i];
            let trace = psi_inv.component_mul(dp).sum();
            let mut data = z.dot(&(dp * &z));
            if let Some(dmu) = self.model.mean_derivative(i) {
                data -= 2.0 * at_z.dot(&dmu);
            }
            *g += 0.5 * trace - 0.5 * data;
        }
        Ok(grad)
    }

    /// `log det Ψ(θ)`.
    pub fn exact_logdet_psi(&self, theta: &[f64]) -> Result<f64> {
        exact_logdet(&self.state(theta)?.psi)
    }
}
