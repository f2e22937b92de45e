//! Parametric low-rank approximation `Q(θ) ≈ U M(θ) Uᵀ` by Chebyshev
//! interpolation in space and in the kernel hyperparameters.
//!
//! The spatial factor `U` depends only on the points and is built once. The
//! core `M(θ)` is obtained by contracting a precomputed tensor of kernel
//! values at Chebyshev node tuples `(x-node, θ-node, y-node)` with the
//! interpolation weights of `θ`, so refreshing it costs `O(r² p_θ^K)` and
//! never touches the forward operator.
//!
//! The tensor is stored as one `r × r` slice per θ-node tuple, which is the
//! `(x-modes) × (y-modes)` unfolding of the full `p^{2d+K}` tensor.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{MaternSpec, PointGrid, Smoothness};

/// Default cap on stored core-tensor entries.
pub const DEFAULT_TENSOR_BUDGET: usize = 50_000_000;

/// The `p` roots of `T_p` mapped affinely onto `[alpha, beta]`.
pub fn cheb_nodes(p: usize, alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(Error::InvalidParameter("Chebyshev order p must be >= 1".into()));
    }
    if !(alpha < beta) {
        return Err(Error::InvalidParameter(format!(
            "empty interval [{alpha}, {beta}]"
        )));
    }
    Ok((1..=p)
        .map(|i| {
            let z = ((2 * i - 1) as f64 * PI / (2 * p) as f64).cos();
            to_interval(z, alpha, beta)
        })
        .collect())
}

fn to_interval(z: f64, alpha: f64, beta: f64) -> f64 {
    0.5 * (beta - alpha) * z + 0.5 * (alpha + beta)
}

fn from_interval(x: f64, alpha: f64, beta: f64) -> f64 {
    (2.0 * x - alpha - beta) / (beta - alpha)
}

fn clamp_to(x: f64, alpha: f64, beta: f64, what: &str) -> f64 {
    if x < alpha || x > beta {
        warn!("{what} {x} outside interpolation interval [{alpha}, {beta}]; clamping");
        x.clamp(alpha, beta)
    } else {
        x
    }
}

/// `T_0(z), …, T_{p-1}(z)` by the three-term recurrence.
fn chebyshev_values(p: usize, z: f64) -> Vec<f64> {
    let mut t = Vec::with_capacity(p);
    t.push(1.0);
    if p > 1 {
        t.push(z);
    }
    for j in 2..p {
        let next = 2.0 * z * t[j - 1] - t[j - 2];
        t.push(next);
    }
    t
}

/// Chebyshev interpolation kernel on `[alpha, beta]`:
/// `1/p + (2/p) Σ_{j=1}^{p-1} T_j(x̂) T_j(ŷ)`. At a pair of nodes it is the
/// Kronecker delta. Arguments outside the interval are clamped.
pub fn phi_interp(p: usize, alpha: f64, beta: f64, x: f64, y: f64) -> f64 {
    let x = clamp_to(x, alpha, beta, "interpolation argument");
    let y = clamp_to(y, alpha, beta, "interpolation argument");
    let tx = chebyshev_values(p, from_interval(x, alpha, beta).clamp(-1.0, 1.0));
    let ty = chebyshev_values(p, from_interval(y, alpha, beta).clamp(-1.0, 1.0));
    let tail: f64 = tx.iter().zip(&ty).skip(1).map(|(a, b)| a * b).sum();
    (1.0 + 2.0 * tail) / p as f64
}

/// Axis-aligned box with `p` Chebyshev nodes per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebBox {
    lows: Vec<f64>,
    highs: Vec<f64>,
    p: usize,
}

impl ChebBox {
    pub fn new(lows: Vec<f64>, highs: Vec<f64>, p: usize) -> Result<Self> {
        if lows.len() != highs.len() || lows.is_empty() {
            return Err(Error::InvalidParameter(
                "box needs matching, nonempty low/high vectors".into(),
            ));
        }
        if p == 0 {
            return Err(Error::InvalidParameter("Chebyshev order p must be >= 1".into()));
        }
        for (k, (lo, hi)) in lows.iter().zip(&highs).enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "box dimension {k}: low {lo} must be below high {hi}"
                )));
            }
        }
        Ok(Self { lows, highs, p })
    }

    /// Smallest box enclosing the grid.
    ///
    /// Degenerate extents are widened slightly.
    pub fn enclosing(grid: &PointGrid, p: usize) -> Result<Self> {
        let (lows, highs) = grid
            .bounds()
            .into_iter()
            .map(|(lo, hi)| {
                if hi - lo > 0.0 {
                    (lo, hi)
                } else {
                    let pad = 0.5 * lo.abs().max(1.0);
                    (lo - pad, hi + pad)
                }
            })
            .unzip();
        Self::new(lows, highs, p)
    }

    pub fn dim(&self) -> usize {
        self.lows.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn low(&self, k: usize) -> f64 {
        self.lows[k]
    }

    pub fn high(&self, k: usize) -> f64 {
        self.highs[k]
    }

    pub fn nodes(&self, k: usize) -> Vec<f64> {
        cheb_nodes(self.p, self.lows[k], self.highs[k]).expect("box validated at construction")
    }

    /// Number of tensor-product nodes, `p^dim`.
    pub fn size(&self) -> usize {
        self.p.pow(self.dim() as u32)
    }

    /// Interpolation weights `φ(η_t, x)` for `t = 1..p` along dimension `k`.
    pub fn weights(&self, k: usize, x: f64) -> Vec<f64> {
        let (lo, hi) = (self.lows[k], self.highs[k]);
        self.nodes(k)
            .into_iter()
            .map(|eta| phi_interp(self.p, lo, hi, eta, x))
            .collect()
    }

    /// Tensor-product weights for a point, first dimension fastest.
    pub fn tensor_weights(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![1.0];
        for (k, &xk) in x.iter().enumerate() {
            let w = self.weights(k, xk);
            let mut next = Vec::with_capacity(out.len() * w.len());
            for wk in &w {
                for o in &out {
                    next.push(o * wk);
                }
            }
            out = next;
        }
        out
    }

    /// Coordinates of tensor node `t` (first dimension fastest).
    pub fn tensor_node(&self, mut t: usize) -> Vec<f64> {
        (0..self.dim())
            .map(|k| {
                let i = t % self.p;
                t /= self.p;
                self.nodes(k)[i]
            })
            .collect()
    }

    fn contains(&self, x: &[f64]) -> bool {
        let slack = |k: usize| 1e-12 * (self.highs[k] - self.lows[k]);
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lows[k] - slack(k) && v <= self.highs[k] + slack(k))
    }
}

/// `U = U_d ⋉ … ⋉ U_1` (face-splitting product of per-dimension factors).
#[derive(Debug, Clone)]
pub struct FactorU {
    pub u: DMatrix<f64>,
    pub per_dim: Vec<DMatrix<f64>>,
}

impl FactorU {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }
}

pub fn build_factor_u(grid: &PointGrid, bx: &ChebBox) -> Result<FactorU> {
    if grid.dim() != bx.dim() {
        return Err(Error::InvalidParameter(format!(
            "grid dimension {} does not match box dimension {}",
            grid.dim(),
            bx.dim()
        )));
    }
    if let Some(index) = grid.points().position(|x| !bx.contains(x)) {
        return Err(Error::OutsideBox { index });
    }
    let n = grid.len();
    let p = bx.p();
    let per_dim: Vec<DMatrix<f64>> = (0..bx.dim())
        .map(|k| {
            let mut uk = DMatrix::zeros(n, p);
            for (i, x) in grid.points().enumerate() {
                for (t, w) in bx.weights(k, x[k]).into_iter().enumerate() {
                    uk[(i, t)] = w;
                }
            }
            uk
        })
        .collect();
    let mut u = DMatrix::zeros(n, bx.size());
    for i in 0..n {
        let mut row = vec![1.0];
        for uk in &per_dim {
            let mut next = Vec::with_capacity(row.len() * p);
            for t in 0..p {
                for r in &row {
                    next.push(r * uk[(i, t)]);
                }
            }
            row = next;
        }
        for (t, v) in row.into_iter().enumerate() {
            u[(i, t)] = v;
        }
    }
    Ok(FactorU { u, per_dim })
}

/// Kernel tensor sampled at `(x-node, θ-node, y-node)` tuples.
#[derive(Debug, Clone)]
pub struct ParametricCore {
    slices: Vec<DMatrix<f64>>,
    theta_box: ChebBox,
}

impl ParametricCore {
    pub fn rank(&self) -> usize {
        self.slices[0].nrows()
    }

    pub fn theta_box(&self) -> &ChebBox {
        &self.theta_box
    }

    /// Tensor entry for spatial node indices `ix`, `iy` and θ-node index `k`.
    pub fn entry(&self, ix: usize, k: usize, iy: usize) -> f64 {
        self.slices[k][(ix, iy)]
    }

    /// The `r × r` unfolding at θ-node tuple `k`.
    pub fn slice(&self, k: usize) -> &DMatrix<f64> {
        &self.slices[k]
    }
}

/// Fills the core tensor by evaluating `kernel(x, y, θ)` at all node tuples.
pub fn build_core(
    kernel: &(dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Sync),
    space: &ChebBox,
    theta_box: &ChebBox,
    budget: usize,
) -> Result<ParametricCore> {
    let r = space.size();
    let kt = theta_box.size();
    let entries = r.saturating_mul(r).saturating_mul(kt);
    if entries > budget {
        return Err(Error::TensorBudget { entries, budget });
    }
    let xs: Vec<Vec<f64>> = (0..r).map(|t| space.tensor_node(t)).collect();
    let slices = (0..kt)
        .map(|k| {
            let theta = theta_box.tensor_node(k);
            let mut s = DMatrix::zeros(r, r);
            for j in 0..r {
                for i in 0..r {
                    s[(i, j)] = kernel(&xs[i], &xs[j], &theta);
                }
            }
            s
        })
        .collect();
    Ok(ParametricCore {
        slices,
        theta_box: theta_box.clone(),
    })
}

/// `M(θ)`: contraction of the θ-modes with the interpolation weights of `θ`,
/// symmetrized. `θ` outside the box is clamped with a warning.
pub fn eval_core_m(core: &ParametricCore, theta: &[f64]) -> Result<DMatrix<f64>> {
    let bx = &core.theta_box;
    if theta.len() != bx.dim() {
        return Err(Error::DimensionMismatch {
            context: "eval_core_m",
            expected: bx.dim(),
            actual: theta.len(),
        });
    }
    let clamped: Vec<f64> = theta
        .iter()
        .enumerate()
        .map(|(k, &t)| clamp_to(t, bx.low(k), bx.high(k), "hyperparameter"))
        .collect();
    let w = bx.tensor_weights(&clamped);
    let r = core.rank();
    let mut m = DMatrix::<f64>::zeros(r, r);
    for (s, wk) in core.slices.iter().zip(&w) {
        m += s * *wk;
    }
    let sym = (&m + m.transpose()) * 0.5;
    if sym.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in M(θ)".into()));
    }
    Ok(sym)
}

/// Low-rank surrogate for a Matérn covariance on one point set.
///
/// `σ` enters as an exact prefactor, so only `ℓ` is interpolated.
#[derive(Debug, Clone)]
pub struct MaternLowRank {
    pub nu: Smoothness,
    pub factor: FactorU,
    pub core: ParametricCore,
}

impl MaternLowRank {
    pub fn build(
        nu: Smoothness,
        grid: &PointGrid,
        space_p: usize,
        ell_range: (f64, f64),
        ell_p: usize,
    ) -> Result<Self> {
        let space = ChebBox::enclosing(grid, space_p)?;
        let factor = build_factor_u(grid, &space)?;
        let theta_box = ChebBox::new(vec![ell_range.0], vec![ell_range.1], ell_p)?;
        let kernel = move |x: &[f64], y: &[f64], th: &[f64]| {
            let spec = MaternSpec {
                nu,
                sigma: 1.0,
                ell: th[0],
            };
            spec.at_distance(
                x.iter()
                    .zip(y)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            )
        };
        let core = build_core(&kernel, &space, &theta_box, DEFAULT_TENSOR_BUDGET)?;
        Ok(Self { nu, factor, core })
    }

    pub fn rank(&self) -> usize {
        self.factor.rank()
    }

    pub fn core_matrix(&self, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
        Ok(eval_core_m(&self.core, &[ell])? * (sigma * sigma))
    }

    /// Dense `U M(θ) Uᵀ`, for validation.
    pub fn approximate(&self, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
        let m = self.core_matrix(sigma, ell)?;
        Ok(&self.factor.u * m * self.factor.u.transpose())
    }
}
