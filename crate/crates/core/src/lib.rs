//! Hyperparameter estimation for hierarchical Bayesian linear inverse problems.
//!
//! The crate computes MAP estimates of the hyperparameters `θ` of a Gaussian
//! linear inverse problem `d = A s + η` by minimizing a frozen Monte Carlo
//! (sample average) surrogate of the negative log marginal posterior
//!
//! ```text
//! F(θ) = -log π_hyp(θ) + ½ logdet Ψ(θ) + ½ ‖Aμ - d‖²_{Ψ(θ)⁻¹},   Ψ(θ) = A Q(θ) Aᵀ + R(θ).
//! ```
//!
//! The log-determinant is estimated with Hutchinson probes and preconditioned
//! Lanczos quadrature; the gradient reuses the Lanczos bases of the objective
//! evaluation. The preconditioner is built from a parametric low-rank
//! approximation `Q(θ) ≈ U M(θ) Uᵀ` that can be refreshed for a new `θ`
//! without touching the forward operator.
//!
//! Module map:
//!
//! * [`linop`]: matrix-free operators, `Ψ(θ)`, Matrix Market I/O.
//! * [`kernels`]: Matérn covariances, noise model, analytic derivatives.
//! * [`paramlr`]: Chebyshev parametric low-rank approximation of `Q(θ)`.
//! * [`precond`]: Woodbury-factored preconditioner `G` with `GᵀG ≈ Ψ⁻¹`.
//! * [`krylov`]: Lanczos quadrature and preconditioned CG.
//! * [`estimator`]: the Monte Carlo objective and gradient, probe sets, sample planner.
//! * [`oracle`]: dense exact objective, gradient and log-determinant.
//! * [`problems`]: seismic ray tomography generators and reconstruction.
//! * [`driver`]: projected L-BFGS, run configuration, experiment sweeps.

pub mod driver;
pub mod error;
pub mod estimator;
pub mod io;
pub mod kernels;
pub mod krylov;
pub mod linop;
pub mod oracle;
pub mod paramlr;
pub mod precond;
pub mod prior;
pub mod problems;
pub mod tridiag;

pub use error::{Error, Result};
