//! Symmetric tridiagonal eigensolver (implicit QL with Wilkinson shifts).
//!
//! Lanczos quadrature only needs the eigenvalues and the first components of
//! the eigenvectors of `T_k` to evaluate `e₁ᵀ f(T_k) e₁`. Tracking just the
//! first row of the eigenvector matrix makes that `O(k²)`, cheap enough to
//! run at every Lanczos step for the stopping rule.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone)]
pub struct TridiagEigen {
    pub values: Vec<f64>,
    /// First components of the normalized eigenvectors.
    pub first_row: Vec<f64>,
    /// Full eigenvectors as columns, when requested.
    pub vectors: Option<DMatrix<f64>>,
}

impl TridiagEigen {
    /// `e₁ᵀ f(T) e₁ = Σ_j z_{1j}² f(λ_j)`.
    pub fn first_quadratic(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values
            .iter()
            .zip(&self.first_row)
            .map(|(&l, &z)| z * z * f(l))
            .sum()
    }
}

/// Eigen-decomposes the symmetric tridiagonal matrix with diagonal `diag`
/// and off-diagonal `off` (`off.len() == diag.len() - 1`).
pub fn tridiag_eigen(diag: &[f64], off: &[f64], full_vectors: bool) -> Result<TridiagEigen> {
    let n = diag.len();
    if n == 0 || off.len() + 1 != n {
        return Err(Error::InvalidParameter(format!(
            "tridiagonal matrix needs k diagonal and k-1 off-diagonal entries, got {} and {}",
            n,
            off.len()
        )));
    }
    let mut d = diag.to_vec();
    let mut e = off.to_vec();
    e.push(0.0);

    // Rows of Z that we track: all of them, or only the first.
    let rows = if full_vectors { n } else { 1 };
    let mut z = DMatrix::<f64>::zeros(rows, n);
    for i in 0..rows {
        z[(i, i)] = 1.0;
    }

    for l in 0..n {
        let mut sweeps = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > MAX_SWEEPS {
                return Err(Error::Numerical(
                    "tridiagonal QL iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..rows {
                    let zf = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * zf;
                    z[(k, i)] = c * z[(k, i)] - s * zf;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let first_row = z.row(0).iter().copied().collect();
    Ok(TridiagEigen {
        values: d,
        first_row,
        vectors: full_vectors.then_some(z),
    })
}
