//! Projected limited-memory BFGS on a box.
//!
//! The iteration runs in the scaled variables `x = θ / θ₀` so that
//! hyperparameters of very different magnitude see comparable steps. The
//! objective must be deterministic (a frozen probe sample), which is what
//! makes a monotone Armijo line search meaningful.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Largest scaled move of any coordinate on a step without curvature pairs.
const FIRST_STEP: f64 = 0.5;
/// Scaled moves below this are indistinguishable from staying put.
const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop once `|ΔF| ≤ f_rel_tol · |F|`.
    pub f_rel_tol: f64,
    /// Stop once the projected gradient in scaled variables has `‖·‖∞ ≤ pg_tol`.
    pub pg_tol: f64,
    pub memory: usize,
    pub max_backtracks: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            f_rel_tol: 1e-8,
            pg_tol: 1e-6,
            memory: 10,
            max_backtracks: 12,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Config("lower and upper bounds differ in length".into()));
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(l > 0.0 && l < u) || l.is_infinite() || u.is_nan() {
                return Err(Error::Config(format!(
                    "bounds for θ[{i}] must satisfy 0 < lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[1e-8, +∞)` in every coordinate.
    pub fn positive(dim: usize) -> Self {
        Self {
            lower: vec![1e-8; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, theta: &mut [f64]) {
        for ((t, &l), &u) in theta.iter_mut().zip(&self.lower).zip(&self.upper) {
            *t = t.clamp(l, u);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ProjectedGradient,
    ObjectiveChange,
    MaxIterations,
    /// No sufficient decrease within the backtracking budget, even along the
    /// projected steepest-descent direction.
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    /// `‖P(x − ∇x) − x‖∞` in scaled variables.
    pub projected_gradient: f64,
    /// Objective evaluations so far, line-search trials included.
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub reason: StopReason,
    pub trace: Vec<TraceEntry>,
}

impl OptimResult {
    pub fn converged(&self) -> bool {
        matches!(self.reason, StopReason::ProjectedGradient | StopReason::ObjectiveChange)
    }
}

struct Scaled<'a, F> {
    f: F,
    scale: &'a [f64],
    evaluations: usize,
}

impl<F> Scaled<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn theta(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(self.scale).map(|(x, s)| x * s).collect()
    }

    /// Value and scaled gradient. Numerical failures and non-finite values
    /// become `None` (an infinite objective) so the line search backs away
    /// from them; anything else propagates.
    fn eval(&mut self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        self.evaluations += 1;
        let theta = self.theta(x);
        match (self.f)(&theta) {
            Ok((v, g)) => {
                check_len("objective gradient", x.len(), g.len())?;
                if !v.is_finite() || g.iter().any(|g| !g.is_finite()) {
                    return Ok(None);
                }
                Ok(Some((v, g.iter().zip(self.scale).map(|(g, s)| g * s).collect())))
            }
            Err(e @ (Error::NotPositiveDefinite(_) | Error::SingularPreconditioner(_) | Error::Numerical(_))) => {
                log::debug!("evaluation failed at θ = {theta:?}: {e}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn projected_gradient(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|i| (x[i] - g[i]).clamp(lo[i], hi[i]) - x[i]).collect()
}

/// Coordinates pinned at a bound with the gradient pushing outward.
fn active_set(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            let tol = 1e-12 * (1.0 + x[i].abs());
            (x[i] - lo[i] <= tol && g[i] > 0.0) || (hi[i] - x[i] <= tol && g[i] < 0.0)
        })
        .collect()
}

/// Two-loop recursion on the free coordinates; returns `−H g`.
fn lbfgs_direction(g: &[f64], free: &[bool], pairs: &VecDeque<(Vec<f64>, Vec<f64>)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(v, &f)| if f { *v } else { 0.0 }).collect() };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y) in pairs.iter().rev() {
        let (s, y) = (mask(s), mask(y));
        let sy = dot(&s, &y);
        if sy <= 0.0 {
            alphas.push(None);
            continue;
        }
        let a = dot(&s, &q) / sy;
        q.iter_mut().zip(&y).for_each(|(q, y)| *q -= a * y);
        alphas.push(Some((a, sy, s, y)));
    }
    let gamma = pairs
        .back()
        .map(|(s, y)| {
            let (s, y) = (mask(s), mask(y));
            let yy = dot(&y, &y);
            if yy > 0.0 && dot(&s, &y) > 0.0 {
                dot(&s, &y) / yy
            } else {
                1.0
            }
        })
        .unwrap_or(1.0);
    q.iter_mut().for_each(|v| *v *= gamma);
    for entry in alphas.into_iter().rev().flatten() {
        let (a, sy, s, y) = entry;
        let b = dot(&y, &q) / sy;
        q.iter_mut().zip(&s).for_each(|(q, s)| *q += (a - b) * s);
    }
    q.iter().zip(free).map(|(q, &f)| if f { -q } else { 0.0 }).collect()
}

/// Minimizes `f` over `bounds` from `theta0`.
///
/// `f` returns the objective and its gradient in the original coordinates.
/// A numerical error inside `f` counts as an infinite objective; any other
/// error aborts.
pub fn minimize<F>(f: F, theta0: &[f64], bounds: &Bounds, opts: &OptimOptions) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let dim = theta0.len();
    if bounds.dim() != dim {
        return Err(Error::Config(format!(
            "θ₀ has {dim} entries but the bounds have {}",
            bounds.dim()
        )));
    }
    for i in 0..dim {
        if !(theta0[i] >= bounds.lower[i] && theta0[i] <= bounds.upper[i]) {
            return Err(Error::Config(format!(
                "θ₀[{i}] = {} lies outside [{}, {}]",
                theta0[i], bounds.lower[i], bounds.upper[i]
            )));
        }
    }
    let lo: Vec<f64> = (0..dim).map(|i| bounds.lower[i] / theta0[i]).collect();
    let hi: Vec<f64> = (0..dim).map(|i| bounds.upper[i] / theta0[i]).collect();
    let mut obj = Scaled {
        f,
        scale: theta0,
        evaluations: 0,
    };

    let mut x = vec![1.0; dim];
    let (mut fx, mut gx) = obj
        .eval(&x)?
        .ok_or_else(|| Error::Numerical("objective is not finite at θ₀".into()))?;
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(opts.memory);
    let mut trace = Vec::new();
    let mut iter = 0;
    let record = |iter: usize, x: &[f64], fx: f64, gx: &[f64], evals: usize| TraceEntry {
        iter,
        theta: x.iter().zip(theta0).map(|(x, s)| x * s).collect(),
        objective: fx,
        gradient_norm: gx.iter().zip(theta0).map(|(g, s)| (g / s).powi(2)).sum::<f64>().sqrt(),
        projected_gradient: inf_norm(&projected_gradient(x, gx, &lo, &hi)),
        evaluations: evals,
    };
    trace.push(record(0, &x, fx, &gx, obj.evaluations));

    let reason = loop {
        if inf_norm(&projected_gradient(&x, &gx, &lo, &hi)) <= opts.pg_tol {
            break StopReason::ProjectedGradient;
        }
        if iter >= opts.max_iter {
            break StopReason::MaxIterations;
        }
        let free: Vec<bool> = active_set(&x, &gx, &lo, &hi).iter().map(|a| !a).collect();

        let mut accepted = None;
        // Quasi-Newton direction first; on failure drop the memory and retry
        // along projected steepest descent.
        let attempts: &[bool] = if pairs.is_empty() { &[false] } else { &[true, false] };
        for &use_memory in attempts {
            if !use_memory {
                pairs.clear();
            }
            let steepest: Vec<f64> = gx.iter().zip(&free).map(|(g, &f)| if f { -g } else { 0.0 }).collect();
            let mut d = if use_memory {
                lbfgs_direction(&gx, &free, &pairs)
            } else {
                steepest.clone()
            };
            if dot(&d, &gx) >= 0.0 {
                d = steepest;
            }
            let dn = inf_norm(&d);
            if dn == 0.0 {
                break;
            }
            // Without curvature information no coordinate may move by more
            // than half its starting value, nor cover more than half its
            // distance to a bound, so a steep gradient cannot throw a
            // parameter straight onto its bound.
            let mut alpha = if pairs.is_empty() {
                (0..dim)
                    .filter_map(|i| {
                        let room = if d[i] < 0.0 { x[i] - lo[i] } else { hi[i] - x[i] };
                        (d[i] != 0.0 && room > 0.0).then(|| FIRST_STEP * room / d[i].abs())
                    })
                    .fold((FIRST_STEP / dn).min(1.0), f64::min)
            } else {
                1.0
            };
            for _ in 0..=opts.max_backtracks {
                let xt: Vec<f64> = (0..dim).map(|i| (x[i] + alpha * d[i]).clamp(lo[i], hi[i])).collect();
                let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
                if inf_norm(&step) <= MIN_STEP {
                    break;
                }
                if let Some((ft, gt)) = obj.eval(&xt)? {
                    if ft <= fx + opts.armijo * dot(&gx, &step) {
                        accepted = Some((xt, ft, gt, step));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((xn, fnew, gnew, s)) = accepted else {
            break StopReason::LineSearchFailed;
        };
        let y: Vec<f64> = gnew.iter().zip(&gx).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y));
        }
        iter += 1;
        let df = (fx - fnew).abs();
        let scale = fx.abs().max(fnew.abs());
        x = xn;
        fx = fnew;
        gx = gnew;
        trace.push(record(iter, &x, fx, &gx, obj.evaluations));
        log::info!("iteration {iter}: F = {fx:.10e}, θ = {:?}", obj.theta(&x));
        if df <= opts.f_rel_tol * scale {
            break StopReason::ObjectiveChange;
        }
    };

    Ok(OptimResult {
        theta: obj.theta(&x),
        objective: fx,
        gradient: gx.iter().zip(theta0).map(|(g, s)| g / s).collect(),
        iterations: iter,
        evaluations: obj.evaluations,
        reason,
        trace,
    })
}
