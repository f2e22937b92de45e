//! Test problems: straight-ray travel-time tomography, static and dynamic.
//!
//! The domain is the unit square split into `n_side × n_side` pixels, indexed
//! `iy · n_side + ix`. Sources sit on the left edge; receivers are spread over
//! the right and top edges. Each row of the forward map holds the exact
//! intersection lengths of one source-receiver ray with the pixels.
//!
//! In the dynamic problem the same geometry is reused at every time step,
//! `A = I_{n_t} ⊗ A_s`, and the unknown stacks the frames time-major.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimator::{Model, PrecondSetup};
use crate::io;
use crate::kernels::{PointGrid, Smoothness};
use crate::krylov::pcg_solve;
use crate::linop::{DiagonalMap, IdentityMap, KroneckerMap, LinearMap, PsiMap, SharedMap, SparseMap, Vector};
use crate::prior::{validate_theta, MeanModel, PriorModel};

/// Sources and receivers on the boundary of the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomoGeometry {
    pub n_side: usize,
    pub sources: Vec<[f64; 2]>,
    pub receivers: Vec<[f64; 2]>,
}

impl TomoGeometry {
    /// `n_src` sources evenly on `x = 0`; `n_rcv` receivers evenly along the
    /// right edge (bottom to top) and then the top edge (right to left).
    pub fn new(n_side: usize, n_src: usize, n_rcv: usize) -> Result<Self> {
        if n_side == 0 || n_src == 0 || n_rcv == 0 {
            return Err(Error::InvalidParameter(
                "grid side, source and receiver counts must be positive".into(),
            ));
        }
        let sources = (0..n_src)
            .map(|i| [0.0, (i as f64 + 0.5) / n_src as f64])
            .collect();
        let receivers = (0..n_rcv)
            .map(|k| {
                let s = 2.0 * (k as f64 + 0.5) / n_rcv as f64;
                if s <= 1.0 {
                    [1.0, s]
                } else {
                    [2.0 - s, 1.0]
                }
            })
            .collect();
        Ok(Self {
            n_side,
            sources,
            receivers,
        })
    }

    /// `round(32 j)` sources and `round(45 j)` receivers.
    pub fn scaled(n_side: usize, j: f64) -> Result<Self> {
        if !(j > 0.0 && j.is_finite()) {
            return Err(Error::InvalidParameter(format!("geometry scale must be positive, got {j}")));
        }
        let n_src = ((32.0 * j).round() as usize).max(1);
        let n_rcv = ((45.0 * j).round() as usize).max(1);
        Self::new(n_side, n_src, n_rcv)
    }

    pub fn n_src(&self) -> usize {
        self.sources.len()
    }

    pub fn n_rcv(&self) -> usize {
        self.receivers.len()
    }

    pub fn num_rays(&self) -> usize {
        self.n_src() * self.n_rcv()
    }
}

/// Pixels crossed by the segment `p0 → p1` on an `n_side × n_side` grid of
/// square pixels of side `h` anchored at the origin, with the length inside
/// each. Parts of the segment outside the grid are ignored.
pub fn ray_intersections(p0: [f64; 2], p1: [f64; 2], n_side: usize, h: f64) -> Vec<(usize, f64)> {
    let dir = [p1[0] - p0[0], p1[1] - p0[1]];
    let len = dir[0].hypot(dir[1]);
    if len == 0.0 {
        return Vec::new();
    }
    let extent = n_side as f64 * h;
    // Clip the parameter range to the grid box.
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        if dir[k] == 0.0 {
            if p0[k] < 0.0 || p0[k] > extent {
                return Vec::new();
            }
        } else {
            let a = (0.0 - p0[k]) / dir[k];
            let b = (extent - p0[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if t1 <= t0 {
        return Vec::new();
    }
    let mut ts = vec![t0, t1];
    for k in 0..2 {
        if dir[k] == 0.0 {
            continue;
        }
        for line in 1..n_side {
            let t = (line as f64 * h - p0[k]) / dir[k];
            if t > t0 && t < t1 {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite crossing parameters"));
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ts.len());
    for pair in ts.windows(2) {
        let seg = (pair[1] - pair[0]) * len;
        if seg <= 0.0 {
            continue;
        }
        let tm = 0.5 * (pair[0] + pair[1]);
        let cell = |k: usize| (((p0[k] + tm * dir[k]) / h).floor().max(0.0) as usize).min(n_side - 1);
        let idx = cell(1) * n_side + cell(0);
        match out.last_mut() {
            Some((last, acc)) if *last == idx => *acc += seg,
            _ => out.push((idx, seg)),
        }
    }
    out
}

/// One row per `(source, receiver)` pair, row index `src · n_rcv + rcv`.
pub fn build_ray_matrix(geom: &TomoGeometry) -> Result<SparseMap> {
    let n = geom.n_side;
    let h = 1.0 / n as f64;
    let mut trips = Vec::new();
    for (s, src) in geom.sources.iter().enumerate() {
        for (r, rcv) in geom.receivers.iter().enumerate() {
            let row = s * geom.n_rcv() + r;
            if src == rcv {
                log::warn!("skipping degenerate ray {row}: source and receiver coincide");
                continue;
            }
            trips.extend(ray_intersections(*src, *rcv, n, h).into_iter().map(|(c, v)| (row, c, v)));
        }
    }
    SparseMap::from_triplets(geom.num_rays(), n * n, trips)
}

/// Smooth test image: a sum of Gaussian bumps sampled at pixel centres.
pub fn blob_phantom(n_side: usize) -> Vector {
    const BUMPS: [(f64, f64, f64, f64); 3] = [
        (0.35, 0.40, 0.12, 1.0),
        (0.68, 0.65, 0.09, 0.8),
        (0.62, 0.25, 0.07, -0.5),
    ];
    let grid = PointGrid::unit_square(n_side);
    Vector::from_iterator(
        grid.len(),
        grid.points().map(|p| {
            BUMPS
                .iter()
                .map(|&(cx, cy, w, amp)| amp * gauss(p, [cx, cy], w))
                .sum::<f64>()
        }),
    )
}

fn gauss(p: &[f64], c: [f64; 2], w: f64) -> f64 {
    let r2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    (-0.5 * r2 / (w * w)).exp()
}

/// Two Gaussian bumps rotated by `angle` about the centre of the square.
pub fn rotating_phantom(n_side: usize, angle: f64) -> Vector {
    const BUMPS: [(f64, f64, f64); 2] = [(0.22, 0.07, 1.0), (-0.18, 0.06, 0.8)];
    let grid = PointGrid::unit_square(n_side);
    let (sin, cos) = angle.sin_cos();
    Vector::from_iterator(
        grid.len(),
        grid.points().map(|p| {
            BUMPS
                .iter()
                .map(|&(offset, w, amp)| {
                    let c = [0.5 + offset * cos, 0.5 + offset * sin];
                    amp * gauss(p, c, w)
                })
                .sum::<f64>()
        }),
    )
}

/// `η = level · ‖y‖/‖g‖ · g` with `g` standard normal from `seed`.
pub fn add_noise(clean: &Vector, level: f64, seed: u64) -> Result<(Vector, f64)> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise level must be nonnegative, got {level}")));
    }
    let m = clean.len();
    if level == 0.0 {
        return Ok((clean.clone(), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Vector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let eta = &g * (level * clean.norm() / g.norm());
    let sigma_m_sq = eta.norm_squared() / m as f64;
    Ok((clean + eta, sigma_m_sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Static,
    Dynamic,
    /// `A = 0` with standard normal data; only `σ_m²` is identifiable.
    Null,
}

/// Everything needed to write a problem directory and rebuild the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemMeta {
    pub kind: ProblemKind,
    pub n_side: usize,
    pub n_t: usize,
    pub n_src: usize,
    pub n_rcv: usize,
    pub nu: Smoothness,
    pub nu_t: Smoothness,
    pub noise_level: f64,
    pub true_sigma_m_sq: f64,
    pub seed: u64,
}

/// A generated inverse problem with its ground truth.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub meta: ProblemMeta,
    /// The per-frame ray matrix (the full map for static problems).
    pub a_s: Arc<SparseMap>,
    pub a: SharedMap,
    pub data: Vector,
    pub s_true: Vector,
    pub prior: PriorModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticSpec {
    pub n_side: usize,
    pub j: f64,
    pub noise_level: f64,
    pub nu: Smoothness,
    pub seed: u64,
}

impl Default for StaticSpec {
    fn default() -> Self {
        Self {
            n_side: 32,
            j: 0.46,
            noise_level: 0.02,
            nu: Smoothness::Half,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicSpec {
    pub n_side: usize,
    pub n_t: usize,
    pub n_src: usize,
    pub n_rcv: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for DynamicSpec {
    fn default() -> Self {
        Self {
            n_side: 16,
            n_t: 8,
            n_src: 8,
            n_rcv: 10,
            noise_level: 0.02,
            seed: 0,
        }
    }
}

pub fn make_static_problem(spec: &StaticSpec) -> Result<ProblemInstance> {
    let geom = TomoGeometry::scaled(spec.n_side, spec.j)?;
    let a_s = Arc::new(build_ray_matrix(&geom)?);
    let s_true = blob_phantom(spec.n_side);
    let clean = a_s.apply(&s_true)?;
    let (data, sigma) = add_noise(&clean, spec.noise_level, spec.seed)?;
    let meta = ProblemMeta {
        kind: ProblemKind::Static,
        n_side: spec.n_side,
        n_t: 1,
        n_src: geom.n_src(),
        n_rcv: geom.n_rcv(),
        nu: spec.nu,
        nu_t: Smoothness::FiveHalves,
        noise_level: spec.noise_level,
        true_sigma_m_sq: sigma,
        seed: spec.seed,
    };
    ProblemInstance::assemble(meta, a_s, data, s_true)
}

/// Total phantom rotation across the frame sequence.
pub const FRAME_SWEEP: f64 = PI / 2.0;

pub fn make_dynamic_problem(spec: &DynamicSpec) -> Result<ProblemInstance> {
    if spec.n_t == 0 {
        return Err(Error::InvalidParameter("n_t must be positive".into()));
    }
    let geom = TomoGeometry::new(spec.n_side, spec.n_src, spec.n_rcv)?;
    let a_s = Arc::new(build_ray_matrix(&geom)?);
    let ns = spec.n_side * spec.n_side;
    let mut s_true = Vector::zeros(ns * spec.n_t);
    // Frames span a quarter turn so neighbours overlap and ℓ_t is identifiable.
    let step = if spec.n_t > 1 { FRAME_SWEEP / (spec.n_t - 1) as f64 } else { 0.0 };
    for k in 0..spec.n_t {
        let angle = step * k as f64;
        s_true.rows_mut(k * ns, ns).copy_from(&rotating_phantom(spec.n_side, angle));
    }
    let meta = ProblemMeta {
        kind: ProblemKind::Dynamic,
        n_side: spec.n_side,
        n_t: spec.n_t,
        n_src: geom.n_src(),
        n_rcv: geom.n_rcv(),
        nu: Smoothness::ThreeHalves,
        nu_t: Smoothness::FiveHalves,
        noise_level: spec.noise_level,
        true_sigma_m_sq: 0.0,
        seed: spec.seed,
    };
    let a = forward_map(&meta, a_s.clone());
    let clean = a.apply(&s_true)?;
    let (data, sigma) = add_noise(&clean, spec.noise_level, spec.seed)?;
    ProblemInstance::assemble(
        ProblemMeta {
            true_sigma_m_sq: sigma,
            ..meta
        },
        a_s,
        data,
        s_true,
    )
}

/// `m` standard normal observations of a field on `n_side²` pixels that the
/// forward map never sees.
pub fn make_null_problem(m: usize, n_side: usize, seed: u64) -> Result<ProblemInstance> {
    if m == 0 || n_side == 0 {
        return Err(Error::InvalidParameter("null problem sizes must be positive".into()));
    }
    let a_s = Arc::new(SparseMap::from_triplets(m, n_side * n_side, std::iter::empty())?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Vector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let meta = ProblemMeta {
        kind: ProblemKind::Null,
        n_side,
        n_t: 1,
        n_src: 0,
        n_rcv: 0,
        nu: Smoothness::Half,
        nu_t: Smoothness::FiveHalves,
        noise_level: 1.0,
        true_sigma_m_sq: 1.0,
        seed,
    };
    ProblemInstance::assemble(meta, a_s, data, Vector::zeros(n_side * n_side))
}

fn forward_map(meta: &ProblemMeta, a_s: Arc<SparseMap>) -> SharedMap {
    match meta.kind {
        ProblemKind::Static | ProblemKind::Null => a_s,
        ProblemKind::Dynamic => Arc::new(KroneckerMap::new(Arc::new(IdentityMap::new(meta.n_t)), a_s)),
    }
}

fn prior_for(meta: &ProblemMeta) -> PriorModel {
    let space = PointGrid::unit_square(meta.n_side);
    match meta.kind {
        ProblemKind::Static | ProblemKind::Null => PriorModel::Matern { nu: meta.nu, grid: space },
        ProblemKind::Dynamic => PriorModel::SpaceTime {
            nu_t: meta.nu_t,
            times: PointGrid::unit_interval(meta.n_t),
            nu_s: meta.nu,
            space,
        },
    }
}

const META_FILE: &str = "meta.toml";
const A_FILE: &str = "a.mtx";
const A_S_FILE: &str = "a_s.mtx";
const D_FILE: &str = "d.mtx";
const S_TRUE_FILE: &str = "s_true.mtx";

impl ProblemInstance {
    fn assemble(meta: ProblemMeta, a_s: Arc<SparseMap>, data: Vector, s_true: Vector) -> Result<Self> {
        let a = forward_map(&meta, a_s.clone());
        check_len("problem data", a.rows(), data.len())?;
        check_len("problem truth", a.cols(), s_true.len())?;
        let prior = prior_for(&meta);
        Ok(Self {
            meta,
            a_s,
            a,
            data,
            s_true,
            prior,
        })
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    /// Same problem with a different smoothness for the spatial kernel.
    pub fn with_smoothness(&self, nu: Smoothness) -> Self {
        let meta = ProblemMeta { nu, ..self.meta.clone() };
        let prior = prior_for(&meta);
        Self {
            meta,
            prior,
            ..self.clone()
        }
    }

    /// Same operator and truth with data regenerated at a new noise level.
    pub fn with_noise(&self, level: f64, seed: u64) -> Result<Self> {
        let clean = self.a.apply(&self.s_true)?;
        let (data, sigma) = add_noise(&clean, level, seed)?;
        Ok(Self {
            meta: ProblemMeta {
                noise_level: level,
                true_sigma_m_sq: sigma,
                seed,
                ..self.meta.clone()
            },
            data,
            ..self.clone()
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.a.clone(), self.prior.clone(), MeanModel::Zero, self.data.clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join(META_FILE);
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        let a_name = match self.meta.kind {
            ProblemKind::Static | ProblemKind::Null => A_FILE,
            ProblemKind::Dynamic => A_S_FILE,
        };
        io::write_sparse(&dir.join(a_name), &self.a_s)?;
        io::write_vector(&dir.join(D_FILE), &self.data)?;
        io::write_vector(&dir.join(S_TRUE_FILE), &self.s_true)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ProblemMeta = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let a_name = match meta.kind {
            ProblemKind::Static | ProblemKind::Null => A_FILE,
            ProblemKind::Dynamic => A_S_FILE,
        };
        let a_s = Arc::new(io::read_sparse(&dir.join(a_name))?);
        check_len("problem directory (pixels)", meta.n_side * meta.n_side, a_s.cols())?;
        let data = io::read_vector(&dir.join(D_FILE))?;
        let s_true = io::read_vector(&dir.join(S_TRUE_FILE))?;
        Self::assemble(meta, a_s, data, s_true)
    }
}

/// Posterior mean and, when the truth is known, its relative error.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub field: Vector,
    pub relative_error: Option<f64>,
    pub pcg_converged: bool,
    pub pcg_iterations: usize,
}

/// `s = μ + Q Aᵀ Ψ⁻¹ (d − Aμ)` at fixed `θ`.
pub fn reconstruct(
    model: &Model,
    theta: &[f64],
    setup: &PrecondSetup,
    pcg_tol: f64,
    pcg_kmax: usize,
    truth: Option<&Vector>,
) -> Result<Reconstruction> {
    validate_theta(theta, model.num_hyper())?;
    let m = model.m();
    let q = model.prior.covariance(theta)?;
    let psi = PsiMap::new(model.a.clone(), q.clone(), Arc::new(DiagonalMap::constant(m, theta[0])))?;
    let g = setup.build(theta, m)?;
    let mu = model.mean_vector();
    let rhs = &model.data - model.a.apply(&mu)?;
    let sol = pcg_solve(&psi, &g, &rhs, pcg_tol, pcg_kmax)?;
    if !sol.converged {
        log::warn!("reconstruction solve stopped at relative residual {:e}", sol.relative_residual);
    }
    let field = &mu + q.apply(&model.a.adjoint_apply(&sol.solution)?)?;
    let relative_error = match truth {
        Some(t) => {
            check_len("reconstruct (truth)", field.len(), t.len())?;
            Some((&field - t).norm() / t.norm())
        }
        None => None,
    };
    Ok(Reconstruction {
        field,
        relative_error,
        pcg_converged: sol.converged,
        pcg_iterations: sol.iterations,
    })
}
