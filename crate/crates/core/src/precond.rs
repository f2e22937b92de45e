//! Low-rank-plus-diagonal preconditioner for `Ψ(θ)`.
//!
//! With `Q(θ) ≈ U M(θ) Uᵀ`, the surrogate `Ψ̂ = (AU) M (AU)ᵀ + R` is inverted
//! by the Woodbury identity. Writing `K = R^{-1/2} (AU) M^{1/2} = W Σ Zᵀ`,
//!
//! ```text
//! Ψ̂⁻¹ = R^{-1/2} (I + W Σ² Wᵀ)⁻¹ R^{-1/2} = Gᵀ G,   Gᵀ = R^{-1/2} (I − W D Wᵀ),
//! D = I − (I + Σ²)^{-1/2},   log|det G| = −½ logdet R + Σ log(1 − dᵢ).
//! ```
//!
//! `AU` is the only part that touches `A` and is computed once
//! ([`precond_offline`]); [`precond_online`] refreshes `W`, `D` for a new `θ`
//! in `O(m r² + r³)` with no forward or adjoint products.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{check_len, Error, Result};
use crate::io;
use crate::kernels::{noise_ops, NoiseModel, NoiseOps};
use crate::linop::{LinearMap, Vector};

/// Negative eigenvalues of `M(θ)` larger than this fraction of its spectral
/// radius are treated as an error instead of being clipped.
pub const DEFAULT_CLIP_TOLERANCE: f64 = 1e-2;

/// Singular values of `K` below this fraction of the largest are dropped.
const SINGULAR_CUTOFF: f64 = 1e-14;

/// Output of the offline stage: the product `AU`.
#[derive(Debug, Clone)]
pub struct PrecondOffline {
    au: DMatrix<f64>,
}

impl PrecondOffline {
    pub fn from_au(au: DMatrix<f64>) -> Self {
        Self { au }
    }

    pub fn au(&self) -> &DMatrix<f64> {
        &self.au
    }

    pub fn rank(&self) -> usize {
        self.au.ncols()
    }

    pub fn rows(&self) -> usize {
        self.au.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_dense(path, &self.au)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_au(io::read_dense(path)?))
    }
}

/// Computes `AU` with exactly `r` forward products of `A`.
pub fn precond_offline(a: &dyn LinearMap, u: &DMatrix<f64>) -> Result<PrecondOffline> {
    check_len("precond_offline", a.cols(), u.nrows())?;
    Ok(PrecondOffline {
        au: a.apply_block(u)?,
    })
}

/// `G` in factored form.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    w: DMatrix<f64>,
    d: DVector<f64>,
    one_minus_d: DVector<f64>,
    noise: NoiseOps,
    logdet_g: f64,
}

impl Preconditioner {
    /// `G = R^{-1/2}`: no prior information.
    pub fn noise_only(noise: NoiseModel, m: usize) -> Result<Self> {
        let noise = noise_ops(noise, m)?;
        Ok(Self {
            w: DMatrix::zeros(m, 0),
            d: DVector::zeros(0),
            one_minus_d: DVector::zeros(0),
            logdet_g: -0.5 * noise.logdet_r(),
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.noise.dim()
    }

    /// Effective rank after dropping negligible singular values.
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn noise(&self) -> &NoiseOps {
        &self.noise
    }

    /// `(I − W diag(c) Wᵀ) v` style update shared by all applies.
    fn low_rank_update(&self, v: &Vector, coeffs: &DVector<f64>, sign: f64) -> Vector {
        if self.w.ncols() == 0 {
            return v.clone();
        }
        let proj = self.w.tr_mul(v).component_mul(coeffs);
        let mut out = v.clone();
        out.gemv(sign, &self.w, &proj, 1.0);
        out
    }

    fn low_rank_update_block(&self, x: &DMatrix<f64>, coeffs: &DVector<f64>, sign: f64) -> DMatrix<f64> {
        if self.w.ncols() == 0 {
            return x.clone();
        }
        let mut proj = self.w.tr_mul(x);
        for (mut row, &c) in proj.row_iter_mut().zip(coeffs.iter()) {
            row *= c;
        }
        let mut out = x.clone();
        out.gemm(sign, &self.w, &proj, 1.0);
        out
    }

    /// `G X`.
    pub fn g_apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("g_apply_block", self.dim(), x.nrows())?;
        let scaled = x / self.noise.variance().sqrt();
        Ok(self.low_rank_update_block(&scaled, &self.d, -1.0))
    }

    pub fn gt_apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("gT_apply_block", self.dim(), x.nrows())?;
        Ok(self.low_rank_update_block(x, &self.d, -1.0) / self.noise.variance().sqrt())
    }

    pub fn g_apply(&self, v: &Vector) -> Result<Vector> {
        check_len("g_apply", self.dim(), v.len())?;
        Ok(self.low_rank_update(&self.noise.r_inv_sqrt_apply(v), &self.d, -1.0))
    }

    pub fn gt_apply(&self, v: &Vector) -> Result<Vector> {
        check_len("gT_apply", self.dim(), v.len())?;
        Ok(self.noise.r_inv_sqrt_apply(&self.low_rank_update(v, &self.d, -1.0)))
    }

    /// `G^{-T} v = (I − WDWᵀ)⁻¹ R^{1/2} v = (I + W diag(dᵢ/(1−dᵢ)) Wᵀ) R^{1/2} v`.
    pub fn g_inv_t_apply(&self, v: &Vector) -> Result<Vector> {
        check_len("g_invT_apply", self.dim(), v.len())?;
        if let Some(i) = self.one_minus_d.iter().position(|&x| x <= 0.0) {
            return Err(Error::SingularPreconditioner(format!(
                "d[{i}] = {} >= 1",
                self.d[i]
            )));
        }
        let ratio = self.d.component_div(&self.one_minus_d);
        Ok(self.low_rank_update(&self.noise.r_sqrt_apply(v), &ratio, 1.0))
    }

    /// `GᵀG v ≈ Ψ⁻¹ v`.
    pub fn gtg_apply(&self, v: &Vector) -> Result<Vector> {
        self.gt_apply(&self.g_apply(v)?)
    }

    pub fn logdet_g(&self) -> f64 {
        self.logdet_g
    }

    /// Dense `G`, for validation on small problems.
    pub fn dense_g(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut g = DMatrix::zeros(m, m);
        let mut e = Vector::zeros(m);
        for j in 0..m {
            e[j] = 1.0;
            g.set_column(j, &self.g_apply(&e).expect("dimension matches"));
            e[j] = 0.0;
        }
        g
    }
}

/// Symmetric PSD square root factor: returns `B` with `M = B Bᵀ`, dropping
/// null directions. Small negative eigenvalues are clipped to zero.
fn psd_sqrt_factor(m: &DMatrix<f64>, clip_tol: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let radius = eig.eigenvalues.amax();
    if radius == 0.0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let lowest = eig.eigenvalues.min();
    if lowest < -clip_tol * radius {
        return Err(Error::NotPositiveDefinite(format!(
            "core matrix M has eigenvalue {lowest:e} below -{clip_tol:e} x spectral radius {radius:e}"
        )));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > SINGULAR_CUTOFF * radius)
        .collect();
    let mut b = DMatrix::zeros(m.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        b.set_column(c, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
    }
    Ok(b)
}

/// Online stage: factor `Ψ̂(θ)⁻¹ = GᵀG` from `AU`, `M(θ)` and `R(θ)`.
pub fn precond_online(
    off: &PrecondOffline,
    m_core: &DMatrix<f64>,
    noise: NoiseModel,
    clip_tol: f64,
) -> Result<Preconditioner> {
    if m_core.nrows() != off.rank() || m_core.ncols() != off.rank() {
        return Err(Error::DimensionMismatch {
            context: "precond_online (core matrix)",
            expected: off.rank(),
            actual: m_core.nrows(),
        });
    }
    let m = off.rows();
    let noise_ops = noise_ops(noise, m)?;
    let sqrt_m = psd_sqrt_factor(m_core, clip_tol)?;
    if sqrt_m.ncols() == 0 {
        return Preconditioner::noise_only(noise, m);
    }
    // K = R^{-1/2} (AU) M^{1/2}; the trailing orthogonal factor of the
    // symmetric square root does not change W or Σ, so B = V Λ^{1/2} suffices.
    let k = (off.au() * sqrt_m) / noise.sigma_m_sq.sqrt();
    let svd = k.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD of K did not return left vectors".into()))?;
    let sigma_max = svd.singular_values.amax();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > SINGULAR_CUTOFF * sigma_max)
        .collect();
    let mut w = DMatrix::zeros(m, keep.len());
    let mut d = DVector::zeros(keep.len());
    let mut one_minus_d = DVector::zeros(keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = svd.singular_values[i];
        w.set_column(c, &u.column(i));
        let shrink = 1.0 / (1.0 + s * s).sqrt();
        one_minus_d[c] = shrink;
        d[c] = 1.0 - shrink;
    }
    let logdet_g = -0.5 * noise_ops.logdet_r() + one_minus_d.iter().map(|x| x.ln()).sum::<f64>();
    Ok(Preconditioner {
        w,
        d,
        one_minus_d,
        noise: noise_ops,
        logdet_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{DenseMap, IdentityMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    struct Instance {
        p: Preconditioner,
        psi_hat: DMatrix<f64>,
        sigma2: f64,
    }

    fn instance(seed: u64, m: usize, n: usize, r: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, m, n);
        let u = random(&mut rng, n, r);
        let b = random(&mut rng, r, r);
        let core = &b * b.transpose();
        let sigma2 = 0.3;
        let off = precond_offline(&DenseMap::new(a.clone()), &u).unwrap();
        let p = precond_online(&off, &core, NoiseModel::new(sigma2).unwrap(), DEFAULT_CLIP_TOLERANCE).unwrap();
        let au = &a * &u;
        let psi_hat = &au * core * au.transpose() + DMatrix::identity(m, m) * sigma2;
        Instance { p, psi_hat, sigma2 }
    }

    #[test]
    fn offline_counts_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random(&mut rng, 5, 3);
        let id = IdentityMap::new(5);
        let off = precond_offline(&id, &u).unwrap();
        assert_eq!(off.au(), &u);
        assert_eq!(id.counter().applies(), 3);
        assert_eq!(id.counter().adjoints(), 0);

        let a = random(&mut rng, 4, 5);
        let dense = DenseMap::new(a.clone());
        let off = precond_offline(&dense, &u).unwrap();
        assert!((off.au() - &a * &u).amax() < 1e-14);
        assert_eq!(dense.counter().applies(), 3);

        assert!(precond_offline(&IdentityMap::new(4), &u).is_err());
    }

    #[test]
    fn zero_core_reduces_to_noise_whitening() {
        let off = PrecondOffline::from_au(DMatrix::from_element(3, 2, 1.0));
        let p = precond_online(&off, &DMatrix::zeros(2, 2), NoiseModel::new(4.0).unwrap(), 1e-2).unwrap();
        assert_eq!(p.rank(), 0);
        let v = Vector::from_vec(vec![2.0, 4.0, -6.0]);
        assert_eq!(p.g_apply(&v).unwrap(), &v / 2.0);
        assert_eq!(p.gt_apply(&v).unwrap(), &v / 2.0);
        assert_eq!(p.g_inv_t_apply(&v).unwrap(), &v * 2.0);
        assert!((p.logdet_g() - (-0.5 * 3.0 * 4f64.ln())).abs() < 1e-14);

        let unit = Preconditioner::noise_only(NoiseModel::new(1.0).unwrap(), 5).unwrap();
        assert_eq!(unit.logdet_g(), 0.0);
    }

    #[test]
    fn scalar_case() {
        let off = PrecondOffline::from_au(DMatrix::from_element(1, 1, 1.0));
        let p = precond_online(&off, &DMatrix::from_element(1, 1, 3.0), NoiseModel::new(1.0).unwrap(), 1e-2).unwrap();
        assert!((p.d()[0] - 0.5).abs() < 1e-15);
        let g = p.dense_g();
        assert!(((g.transpose() * &g)[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((p.logdet_g() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn woodbury_factorization_matches_dense_inverse() {
        for seed in 0..3 {
            let inst = instance(seed, 30, 40, 8);
            let g = inst.p.dense_g();
            let gtg = g.transpose() * &g;
            let inv = inst.psi_hat.clone().try_inverse().unwrap();
            assert!((&gtg - &inv).norm() <= 1e-10 * inv.norm());

            let w = inst.p.w();
            let wtw = w.transpose() * w;
            assert!((wtw - DMatrix::identity(w.ncols(), w.ncols())).norm() <= 1e-10);
            assert!(inst.p.d().iter().all(|&d| d > 0.0 && d < 1.0));

            let dense_logdet = g.clone().lu().determinant().abs().ln();
            assert!((inst.p.logdet_g() - dense_logdet).abs() <= 1e-10);
            let _ = inst.sigma2;
        }
    }

    #[test]
    fn applies_match_dense_and_are_mutually_consistent() {
        let inst = instance(9, 30, 30, 6);
        let g = inst.p.dense_g();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let u = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
            let gv = inst.p.g_apply(&v).unwrap();
            let gtu = inst.p.gt_apply(&u).unwrap();
            assert!((u.dot(&gv) - gtu.dot(&v)).abs() <= 1e-12 * u.dot(&gv).abs().max(1.0));
            assert!((&gtu - g.tr_mul(&u)).amax() < 1e-12);

            let back = inst.p.gt_apply(&inst.p.g_inv_t_apply(&v).unwrap()).unwrap();
            assert!((back - &v).amax() <= 1e-10);

            let ginvt = g.transpose().try_inverse().unwrap();
            assert!((inst.p.g_inv_t_apply(&v).unwrap() - &ginvt * &v).amax() <= 1e-9 * (&ginvt * &v).amax());
        }
        assert!(inst.p.g_apply(&DVector::zeros(3)).is_err());

        let x = random(&mut rng, 30, 4);
        assert!((inst.p.g_apply_block(&x).unwrap() - &g * &x).amax() < 1e-12);
        assert!((inst.p.gt_apply_block(&x).unwrap() - g.tr_mul(&x)).amax() < 1e-12);
        assert!(inst.p.gt_apply_block(&random(&mut rng, 3, 2)).is_err());
    }

    #[test]
    fn unbiasedness_identity() {
        // logdet(G Ψ Gᵀ) − 2 log|det G| = logdet Ψ for any Ψ.
        let inst = instance(4, 30, 40, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random(&mut rng, 30, 30);
        let psi = &inst.psi_hat + &e * e.transpose() * 0.1;
        let g = inst.p.dense_g();
        let pre = &g * &psi * g.transpose();
        let ld = |m: DMatrix<f64>| 2.0 * m.cholesky().unwrap().l().diagonal().map(f64::ln).sum();
        assert!((ld(pre) - 2.0 * inst.p.logdet_g() - ld(psi)).abs() <= 1e-8);
    }

    #[test]
    fn strongly_indefinite_core_is_rejected() {
        let off = PrecondOffline::from_au(DMatrix::identity(2, 2));
        let core = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(
            precond_online(&off, &core, NoiseModel::new(1.0).unwrap(), 1e-2),
            Err(Error::NotPositiveDefinite(_))
        ));
        let slightly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-4]);
        let p = precond_online(&off, &slightly, NoiseModel::new(1.0).unwrap(), 1e-2).unwrap();
        assert_eq!(p.rank(), 1);
    }

    #[test]
    fn au_round_trips_through_disk() {
        let off = PrecondOffline::from_au(DMatrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("au.mtx");
        off.save(&path).unwrap();
        assert_eq!(PrecondOffline::load(&path).unwrap().au(), off.au());
    }
}
