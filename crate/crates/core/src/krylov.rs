//! Preconditioned Lanczos quadrature and conjugate gradients.
//!
//! [`lanczos`] runs the symmetric three-term recurrence with full
//! reorthogonalization (classical Gram-Schmidt, two passes) on the split
//! preconditioned operator `G Ψ Gᵀ`. The resulting `(V_k, T_k)` serve twice:
//! `‖w‖² e₁ᵀ log(T_k) e₁ ≈ wᵀ log(GΨGᵀ) w` for the objective and
//! `‖w‖ V_k T_k^{-1/2} e₁ ≈ (GΨGᵀ)^{-1/2} w` for the gradient.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linop::{LinearMap, MatvecCounter, PsiMap, Vector};
use crate::precond::Preconditioner;
use crate::tridiag::{tridiag_eigen, TridiagEigen};

/// Default relative tolerance on successive quadrature values.
pub const DEFAULT_QUAD_TOL: f64 = 1e-7;
/// Default cap on Lanczos steps per probe.
pub const DEFAULT_KMAX: usize = 350;
/// Default relative residual tolerance for linear solves.
pub const DEFAULT_PCG_TOL: f64 = 1e-8;

/// Off-diagonals below this multiple of the running `‖T‖` estimate signal an
/// invariant subspace.
const BREAKDOWN: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanczosOptions {
    pub kmax: usize,
    pub quad_tol: f64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            kmax: DEFAULT_KMAX,
            quad_tol: DEFAULT_QUAD_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    /// Orthonormal basis `V_k` (`m × k`).
    pub basis: DMatrix<f64>,
    /// Diagonal of `T_k`.
    pub gamma: Vec<f64>,
    /// Off-diagonal of `T_k` (`k − 1` entries).
    pub delta: Vec<f64>,
    /// `δ_{k+1} = ‖r_k‖`.
    pub delta_next: f64,
    /// Unnormalized residual `δ_{k+1} v_{k+1}`.
    pub residual: Vector,
    pub wnorm: f64,
    pub k: usize,
    /// `false` only when `kmax` was reached before the stopping rule fired.
    pub converged: bool,
    /// `e₁ᵀ log(T_j) e₁` for `j = 1..k`, as monitored by the stopping rule.
    pub quad_history: Vec<f64>,
}

impl LanczosResult {
    pub fn tridiagonal(&self) -> DMatrix<f64> {
        let k = self.k;
        DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                self.gamma[i]
            } else if i + 1 == j {
                self.delta[i]
            } else if j + 1 == i {
                self.delta[j]
            } else {
                0.0
            }
        })
    }
}

/// One Lanczos recurrence, advanced one operator product at a time.
struct LanczosState {
    basis: DMatrix<f64>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
    history: Vec<f64>,
    residual: Vector,
    wnorm: f64,
    tnorm: f64,
    quad_tol: f64,
    done: bool,
    converged: bool,
}

impl LanczosState {
    fn new(m: usize, w: &Vector, opts: &LanczosOptions) -> Result<Self> {
        check_len("lanczos", m, w.len())?;
        if opts.kmax == 0 {
            return Err(Error::InvalidParameter("kmax must be at least 1".into()));
        }
        let wnorm = w.norm();
        if wnorm == 0.0 || !wnorm.is_finite() {
            return Err(Error::InvalidParameter(
                "Lanczos start vector must be nonzero and finite".into(),
            ));
        }
        let kcap = opts.kmax.min(m);
        let mut basis = DMatrix::<f64>::zeros(m, kcap);
        basis.set_column(0, &(w / wnorm));
        Ok(Self {
            basis,
            gamma: Vec::with_capacity(kcap),
            delta: Vec::with_capacity(kcap),
            history: Vec::with_capacity(kcap),
            residual: Vector::zeros(m),
            wnorm,
            tnorm: 0.0,
            quad_tol: opts.quad_tol,
            done: false,
            converged: false,
        })
    }

    /// The vector the operator must be applied to next.
    fn current(&self) -> Vector {
        self.basis.column(self.gamma.len()).into_owned()
    }

    /// Consumes `u = Op v_i` and decides whether to stop.
    fn advance(&mut self, mut u: Vector) -> Result<()> {
        let i = self.gamma.len();
        let (m, kcap) = self.basis.shape();
        let v = self.basis.column(i);
        let g = v.dot(&u);
        u.axpy(-g, &v, 1.0);
        if i > 0 {
            u.axpy(-self.delta[i - 1], &self.basis.column(i - 1), 1.0);
        }
        // Two passes of classical Gram-Schmidt against the whole basis.
        let prior = self.basis.columns(0, i + 1);
        for _ in 0..2 {
            let h = prior.tr_mul(&u);
            u.gemv(-1.0, &prior, &h, 1.0);
        }
        self.gamma.push(g);
        let beta = u.norm();
        self.tnorm = self
            .tnorm
            .max(g.abs() + beta + self.delta.last().copied().unwrap_or(0.0));
        self.residual = u;

        let eig = tridiag_eigen(&self.gamma, &self.delta, false)?;
        self.history.push(log_first(&eig)?);
        let k = i + 1;

        if beta <= BREAKDOWN * self.tnorm || k == m {
            self.done = true;
            self.converged = true;
            return Ok(());
        }
        if k >= 2 {
            let (cur, prev) = (self.history[k - 1], self.history[k - 2]);
            let diff = (cur - prev).abs();
            if diff == 0.0 || diff < self.quad_tol * cur.abs() {
                self.done = true;
                self.converged = true;
                return Ok(());
            }
        }
        if k == kcap {
            self.done = true;
            return Ok(());
        }
        self.basis.set_column(k, &(&self.residual / beta));
        self.delta.push(beta);
        Ok(())
    }

    fn finish(self) -> LanczosResult {
        let k = self.gamma.len();
        LanczosResult {
            basis: self.basis.columns(0, k).into_owned(),
            delta_next: self.residual.norm(),
            gamma: self.gamma,
            delta: self.delta,
            residual: self.residual,
            wnorm: self.wnorm,
            k,
            converged: self.converged,
            quad_history: self.history,
        }
    }
}

fn check_square(op: &dyn LinearMap) -> Result<()> {
    if op.cols() != op.rows() {
        return Err(Error::InvalidParameter("Lanczos needs a square operator".into()));
    }
    Ok(())
}

/// Lanczos on a symmetric positive definite operator from start vector `w`.
pub fn lanczos(op: &dyn LinearMap, w: &Vector, opts: &LanczosOptions) -> Result<LanczosResult> {
    check_square(op)?;
    let mut state = LanczosState::new(op.rows(), w, opts)?;
    while !state.done {
        let u = op.apply(&state.current())?;
        state.advance(u)?;
    }
    Ok(state.finish())
}

/// Independent Lanczos runs from each of `ws`, advanced in lockstep so that
/// every step costs one block product with `op`.
///
/// Each run stops on its own rule, so the results agree with separate calls
/// to [`lanczos`] up to the rounding of the block product.
pub fn lanczos_many(op: &dyn LinearMap, ws: &[Vector], opts: &LanczosOptions) -> Result<Vec<LanczosResult>> {
    check_square(op)?;
    let m = op.rows();
    let mut states: Vec<LanczosState> = ws
        .iter()
        .map(|w| LanczosState::new(m, w, opts))
        .collect::<Result<_>>()?;
    loop {
        let active: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut x = DMatrix::zeros(m, active.len());
        for (c, &i) in active.iter().enumerate() {
            x.set_column(c, &states[i].current());
        }
        let y = op.apply_block(&x)?;
        let mut slot = vec![None; states.len()];
        for (c, &i) in active.iter().enumerate() {
            slot[i] = Some(c);
        }
        states
            .par_iter_mut()
            .zip(slot.par_iter())
            .filter_map(|(s, c)| c.map(|c| (s, c)))
            .try_for_each(|(s, c)| s.advance(y.column(c).into_owned()))?;
    }
    Ok(states.into_iter().map(LanczosState::finish).collect())
}

fn log_first(eig: &TridiagEigen) -> Result<f64> {
    if let Some(&bad) = eig.values.iter().find(|&&l| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite(format!(
            "Ritz value {bad:e} is not positive; operator or preconditioner is not SPD"
        )));
    }
    Ok(eig.first_quadratic(f64::ln))
}

/// `‖w‖² e₁ᵀ log(T_k) e₁`.
pub fn logquad(res: &LanczosResult) -> Result<f64> {
    let eig = tridiag_eigen(&res.gamma, &res.delta, false)?;
    Ok(res.wnorm * res.wnorm * log_first(&eig)?)
}

/// `‖w‖ V_k T_k^{-1/2} e₁`.
pub fn sqrtquad_vec(res: &LanczosResult) -> Result<Vector> {
    Ok(quadratures(res)?.1)
}

/// Both quadratures from one eigendecomposition of `T_k`.
pub fn quadratures(res: &LanczosResult) -> Result<(f64, Vector)> {
    let eig = tridiag_eigen(&res.gamma, &res.delta, true)?;
    let log_q = res.wnorm * res.wnorm * log_first(&eig)?;
    let z = eig.vectors.as_ref().expect("full vectors requested");
    let coeffs = DVector::from_iterator(
        res.k,
        eig.values
            .iter()
            .zip(&eig.first_row)
            .map(|(&l, &z0)| z0 / l.sqrt()),
    );
    let small = z * coeffs;
    Ok((log_q, &res.basis * small * res.wnorm))
}

/// `G Ψ Gᵀ` as an operator.
#[derive(Debug)]
pub struct PreconditionedPsi<'a> {
    psi: &'a PsiMap,
    precond: &'a Preconditioner,
    counter: MatvecCounter,
}

impl<'a> PreconditionedPsi<'a> {
    pub fn new(psi: &'a PsiMap, precond: &'a Preconditioner) -> Result<Self> {
        check_len("PreconditionedPsi", psi.dim(), precond.dim())?;
        Ok(Self {
            psi,
            precond,
            counter: MatvecCounter::new(),
        })
    }
}

impl LinearMap for PreconditionedPsi<'_> {
    fn rows(&self) -> usize {
        self.psi.dim()
    }
    fn cols(&self) -> usize {
        self.psi.dim()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        let gt = self.precond.gt_apply(v).expect("dimension checked");
        let p = self.psi.apply(&gt).expect("dimension checked");
        self.precond.g_apply(&p).expect("dimension checked")
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.raw_apply(u)
    }
    fn raw_apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let gt = self.precond.gt_apply_block(x).expect("dimension checked");
        let p = self.psi.apply_block(&gt).expect("dimension checked");
        self.precond.g_apply_block(&p).expect("dimension checked")
    }
    fn raw_adjoint_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.raw_apply_block(x)
    }
    fn counter(&self) -> &MatvecCounter {
        &self.counter
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub solution: Vector,
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
}

/// Solves `Ψ z = rhs` by conjugate gradients preconditioned with `GᵀG`.
///
/// The iterates are those of CG on the split system `(GΨGᵀ) y = G rhs`,
/// `z = Gᵀ y`, but the residual is tracked in the original variables so the
/// stopping test is on `‖Ψz − rhs‖ / ‖rhs‖`. If `kmax` is hit the last
/// iterate is returned with `converged == false`.
pub fn pcg_solve(
    psi: &dyn LinearMap,
    precond: &Preconditioner,
    rhs: &Vector,
    tol: f64,
    kmax: usize,
) -> Result<PcgOutcome> {
    let m = psi.rows();
    check_len("pcg_solve", m, rhs.len())?;
    check_len("pcg_solve (preconditioner)", m, precond.dim())?;
    let bnorm = rhs.norm();
    let mut x = Vector::zeros(m);
    if bnorm == 0.0 {
        return Ok(PcgOutcome {
            solution: x,
            iterations: 0,
            converged: true,
            relative_residual: 0.0,
        });
    }
    let mut r = rhs.clone();
    let mut z = precond.gtg_apply(&r)?;
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut rel = 1.0;
    for it in 1..=kmax {
        let q = psi.apply(&p)?;
        let pq = p.dot(&q);
        if !(pq > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "CG curvature pᵀΨp = {pq:e} at iteration {it}"
            )));
        }
        let alpha = rz / pq;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &q, 1.0);
        rel = r.norm() / bnorm;
        if rel <= tol {
            return Ok(PcgOutcome {
                solution: x,
                iterations: it,
                converged: true,
                relative_residual: rel,
            });
        }
        z = precond.gtg_apply(&r)?;
        let rz_new = r.dot(&z);
        p *= rz_new / rz;
        p += &z;
        rz = rz_new;
    }
    Ok(PcgOutcome {
        solution: x,
        iterations: kmax,
        converged: false,
        relative_residual: rel,
    })
}
