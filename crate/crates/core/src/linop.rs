//! Matrix-free linear operators.
//!
//! Every operator in the crate (the forward map `A`, the prior covariance
//! `Q(θ)`, the noise covariance `R(θ)` and their compositions) is a
//! [`LinearMap`]. Iterative methods only ever see `apply` and
//! `adjoint_apply`, so dense, sparse, Kronecker and low-rank operators are
//! interchangeable.
//!
//! Each map owns a [`MatvecCounter`]. The public `apply`/`adjoint_apply`
//! methods check dimensions and bump the counter by exactly one; the
//! `raw_*` methods are the unchecked kernels that implementors provide.
//! Composites count on themselves only, with one exception: [`PsiMap`]
//! applies its factors through their counted entry points, so that the cost
//! of one `Ψ` product shows up as two `A` products and one `Q` product.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;
pub type SharedMap = Arc<dyn LinearMap>;

/// Default refusal threshold for [`materialize`], in matrix entries.
pub const DEFAULT_MATERIALIZE_CAP: usize = 4_000_000;

/// Atomic count of forward and adjoint products.
#[derive(Debug, Default)]
pub struct MatvecCounter {
    applies: AtomicU64,
    adjoints: AtomicU64,
}

/// Plain copy of a counter at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub applies: u64,
    pub adjoints: u64,
}

impl CounterSnapshot {
    pub fn total(&self) -> u64 {
        self.applies + self.adjoints
    }

    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            applies: self.applies - earlier.applies,
            adjoints: self.adjoints - earlier.adjoints,
        }
    }
}

impl MatvecCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn applies(&self) -> u64 {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn adjoints(&self) -> u64 {
        self.adjoints.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.applies() + self.adjoints()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            applies: self.applies(),
            adjoints: self.adjoints(),
        }
    }

    fn bump_apply(&self, n: usize) {
        self.applies.fetch_add(n as u64, Ordering::Relaxed);
    }

    fn bump_adjoint(&self, n: usize) {
        self.adjoints.fetch_add(n as u64, Ordering::Relaxed);
    }
}

/// A linear operator `ℝ^cols → ℝ^rows` known only through its action.
pub trait LinearMap: Send + Sync + fmt::Debug {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;

    /// Unchecked, uncounted `y = M v`. Callers guarantee `v.len() == cols()`.
    fn raw_apply(&self, v: &Vector) -> Vector;

    /// Unchecked, uncounted `x = Mᵀ u`. Callers guarantee `u.len() == rows()`.
    fn raw_adjoint(&self, u: &Vector) -> Vector;

    fn counter(&self) -> &MatvecCounter;

    fn apply(&self, v: &Vector) -> Result<Vector> {
        check_len("LinearMap::apply", self.cols(), v.len())?;
        self.counter().bump_apply(1);
        Ok(self.raw_apply(v))
    }

    fn adjoint_apply(&self, u: &Vector) -> Result<Vector> {
        check_len("LinearMap::adjoint_apply", self.rows(), u.len())?;
        self.counter().bump_adjoint(1);
        Ok(self.raw_adjoint(u))
    }

    /// Unchecked, uncounted `Y = M X`, column by column unless overridden.
    fn raw_apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows(), x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.raw_apply(&x.column(j).into_owned()));
        }
        out
    }

    /// Unchecked, uncounted `Y = Mᵀ X`.
    fn raw_adjoint_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.cols(), x.ncols());
        for j in 0..x.ncols() {
            out.set_column(j, &self.raw_adjoint(&x.column(j).into_owned()));
        }
        out
    }

    /// Applies the map to every column of `x`, counting one product per column.
    fn apply_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("LinearMap::apply_block", self.cols(), x.nrows())?;
        self.counter().bump_apply(x.ncols());
        Ok(self.raw_apply_block(x))
    }

    /// Adjoint of every column of `x`, counting one product per column.
    fn adjoint_block(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("LinearMap::adjoint_block", self.rows(), x.nrows())?;
        self.counter().bump_adjoint(x.ncols());
        Ok(self.raw_adjoint_block(x))
    }
}

macro_rules! counter_field {
    () => {
        fn counter(&self) -> &MatvecCounter {
            &self.counter
        }
    };
}

#[derive(Debug)]
pub struct IdentityMap {
    n: usize,
    counter: MatvecCounter,
}

impl IdentityMap {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            counter: MatvecCounter::new(),
        }
    }
}

impl LinearMap for IdentityMap {
    fn rows(&self) -> usize {
        self.n
    }
    fn cols(&self) -> usize {
        self.n
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        v.clone()
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        u.clone()
    }
    counter_field!();
}

#[derive(Debug)]
pub struct ZeroMap {
    rows: usize,
    cols: usize,
    counter: MatvecCounter,
}

impl ZeroMap {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            counter: MatvecCounter::new(),
        }
    }
}

impl LinearMap for ZeroMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn raw_apply(&self, _v: &Vector) -> Vector {
        Vector::zeros(self.rows)
    }
    fn raw_adjoint(&self, _u: &Vector) -> Vector {
        Vector::zeros(self.cols)
    }
    counter_field!();
}

#[derive(Debug)]
pub struct DenseMap {
    mat: DMatrix<f64>,
    counter: MatvecCounter,
}

impl DenseMap {
    pub fn new(mat: DMatrix<f64>) -> Self {
        Self {
            mat,
            counter: MatvecCounter::new(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }
}

impl LinearMap for DenseMap {
    fn rows(&self) -> usize {
        self.mat.nrows()
    }
    fn cols(&self) -> usize {
        self.mat.ncols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        &self.mat * v
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.mat.tr_mul(u)
    }
    fn raw_apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        &self.mat * x
    }
    fn raw_adjoint_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.mat.tr_mul(x)
    }
    counter_field!();
}

#[derive(Debug)]
pub struct DiagonalMap {
    diag: Vector,
    counter: MatvecCounter,
}

impl DiagonalMap {
    pub fn new(diag: Vector) -> Self {
        Self {
            diag,
            counter: MatvecCounter::new(),
        }
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self::new(Vector::from_element(n, value))
    }

    pub fn diagonal(&self) -> &Vector {
        &self.diag
    }
}

impl LinearMap for DiagonalMap {
    fn rows(&self) -> usize {
        self.diag.len()
    }
    fn cols(&self) -> usize {
        self.diag.len()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        self.diag.component_mul(v)
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.diag.component_mul(u)
    }
    counter_field!();
}

/// Compressed sparse row storage.
#[derive(Debug)]
pub struct SparseMap {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    counter: MatvecCounter,
}

impl SparseMap {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// columns sorted within each row.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for (i, j, v) in triplets {
            if i >= rows || j >= cols {
                return Err(Error::InvalidParameter(format!(
                    "triplet ({i}, {j}) outside a {rows}x{cols} matrix"
                )));
            }
            per_row[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(j, _)| j);
            let mut iter = row.into_iter().peekable();
            while let Some((j, mut v)) = iter.next() {
                while let Some(&(j2, v2)) = iter.peek() {
                    if j2 != j {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
            counter: MatvecCounter::new(),
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over one row.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for (i, j, v) in self.triplets() {
            out[(i, j)] += v;
        }
        out
    }
}

impl LinearMap for SparseMap {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        Vector::from_iterator(
            self.rows,
            (0..self.rows).map(|i| self.row(i).map(|(j, a)| a * v[j]).sum::<f64>()),
        )
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            let ui = u[i];
            if ui == 0.0 {
                continue;
            }
            for (j, a) in self.row(i) {
                out[j] += a * ui;
            }
        }
        out
    }
    counter_field!();
}

/// `left ⊗ right`, acting on vectors stacked block-wise so that
/// `(L ⊗ R) vec(X) = vec(R X Lᵀ)` with `X` column-major.
#[derive(Debug)]
pub struct KroneckerMap {
    left: SharedMap,
    right: SharedMap,
    counter: MatvecCounter,
}

impl KroneckerMap {
    pub fn new(left: SharedMap, right: SharedMap) -> Self {
        Self {
            left,
            right,
            counter: MatvecCounter::new(),
        }
    }

    pub fn left(&self) -> &SharedMap {
        &self.left
    }

    pub fn right(&self) -> &SharedMap {
        &self.right
    }

    /// `vec(R X Lᵀ)` with `X` the `r_in × l_in` reshaping of `v`, where `inner`
    /// acts as `R` on blocks and `outer` as `L`.
    fn kron_action(
        v: &Vector,
        l_in: usize,
        r_in: usize,
        inner: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
        outer: impl Fn(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> Vector {
        let x = DMatrix::from_column_slice(r_in, l_in, v.as_slice());
        let z = inner(&x);
        let y = outer(&z.transpose()).transpose();
        Vector::from_column_slice(y.as_slice())
    }
}

impl LinearMap for KroneckerMap {
    fn rows(&self) -> usize {
        self.left.rows() * self.right.rows()
    }
    fn cols(&self) -> usize {
        self.left.cols() * self.right.cols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        Self::kron_action(
            v,
            self.left.cols(),
            self.right.cols(),
            |x| self.right.raw_apply_block(x),
            |x| self.left.raw_apply_block(x),
        )
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        Self::kron_action(
            u,
            self.left.rows(),
            self.right.rows(),
            |x| self.right.raw_adjoint_block(x),
            |x| self.left.raw_adjoint_block(x),
        )
    }
    counter_field!();
}

/// `left · core · rightᵀ` with thin outer factors.
#[derive(Debug)]
pub struct LowRankMap {
    left: DMatrix<f64>,
    core: DMatrix<f64>,
    right: DMatrix<f64>,
    counter: MatvecCounter,
}

impl LowRankMap {
    pub fn new(left: DMatrix<f64>, core: DMatrix<f64>, right: DMatrix<f64>) -> Result<Self> {
        if core.nrows() != left.ncols() || core.ncols() != right.ncols() {
            return Err(Error::InvalidParameter(format!(
                "low-rank factors do not conform: left {}x{}, core {}x{}, right {}x{}",
                left.nrows(),
                left.ncols(),
                core.nrows(),
                core.ncols(),
                right.nrows(),
                right.ncols()
            )));
        }
        Ok(Self {
            left,
            core,
            right,
            counter: MatvecCounter::new(),
        })
    }

    /// Symmetric `U M Uᵀ`.
    pub fn symmetric(u: DMatrix<f64>, core: DMatrix<f64>) -> Result<Self> {
        Self::new(u.clone(), core, u)
    }
}

impl LinearMap for LowRankMap {
    fn rows(&self) -> usize {
        self.left.nrows()
    }
    fn cols(&self) -> usize {
        self.right.nrows()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        &self.left * (&self.core * self.right.tr_mul(v))
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        &self.right * self.core.tr_mul(&self.left.tr_mul(u))
    }
    counter_field!();
}

#[derive(Debug)]
pub struct SumMap {
    terms: Vec<SharedMap>,
    counter: MatvecCounter,
}

impl SumMap {
    pub fn new(terms: Vec<SharedMap>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty operator sum".into()))?;
        let (r, c) = (first.rows(), first.cols());
        for t in &terms {
            if t.rows() != r || t.cols() != c {
                return Err(Error::InvalidParameter(format!(
                    "sum term is {}x{}, expected {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(Self {
            terms,
            counter: MatvecCounter::new(),
        })
    }
}

impl LinearMap for SumMap {
    fn rows(&self) -> usize {
        self.terms[0].rows()
    }
    fn cols(&self) -> usize {
        self.terms[0].cols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        let mut acc = self.terms[0].raw_apply(v);
        for t in &self.terms[1..] {
            acc += t.raw_apply(v);
        }
        acc
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        let mut acc = self.terms[0].raw_adjoint(u);
        for t in &self.terms[1..] {
            acc += t.raw_adjoint(u);
        }
        acc
    }
    counter_field!();
}

/// `outer · inner`.
#[derive(Debug)]
pub struct ProductMap {
    outer: SharedMap,
    inner: SharedMap,
    counter: MatvecCounter,
}

impl ProductMap {
    pub fn new(outer: SharedMap, inner: SharedMap) -> Result<Self> {
        check_len("ProductMap::new", outer.cols(), inner.rows())?;
        Ok(Self {
            outer,
            inner,
            counter: MatvecCounter::new(),
        })
    }
}

impl LinearMap for ProductMap {
    fn rows(&self) -> usize {
        self.outer.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        self.outer.raw_apply(&self.inner.raw_apply(v))
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.inner.raw_adjoint(&self.outer.raw_adjoint(u))
    }
    counter_field!();
}

#[derive(Debug)]
pub struct ScaledMap {
    alpha: f64,
    inner: SharedMap,
    counter: MatvecCounter,
}

impl ScaledMap {
    pub fn new(alpha: f64, inner: SharedMap) -> Self {
        Self {
            alpha,
            inner,
            counter: MatvecCounter::new(),
        }
    }
}

impl LinearMap for ScaledMap {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        self.inner.raw_apply(v) * self.alpha
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.inner.raw_adjoint(u) * self.alpha
    }
    counter_field!();
}

/// A view onto another map with a private counter, used to meter one
/// evaluation of a long-lived operator such as `A`.
#[derive(Debug)]
pub struct CountedMap {
    inner: SharedMap,
    counter: MatvecCounter,
}

impl CountedMap {
    pub fn new(inner: SharedMap) -> Self {
        Self {
            inner,
            counter: MatvecCounter::new(),
        }
    }
}

impl LinearMap for CountedMap {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        self.inner.raw_apply(v)
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.inner.raw_adjoint(u)
    }
    fn raw_apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.raw_apply_block(x)
    }
    fn raw_adjoint_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner.raw_adjoint_block(x)
    }
    counter_field!();
}

/// `Ψ = A Q Aᵀ + R` with diagonal `R`.
#[derive(Debug, Clone)]
pub struct PsiMap {
    a: SharedMap,
    q: SharedMap,
    r: Arc<DiagonalMap>,
    counter: Arc<MatvecCounter>,
}

impl PsiMap {
    pub fn new(a: SharedMap, q: SharedMap, r: Arc<DiagonalMap>) -> Result<Self> {
        check_len("PsiMap::new (Q rows vs A cols)", a.cols(), q.rows())?;
        check_len("PsiMap::new (Q cols vs A cols)", a.cols(), q.cols())?;
        check_len("PsiMap::new (R vs A rows)", a.rows(), r.rows())?;
        Ok(Self {
            a,
            q,
            r,
            counter: Arc::new(MatvecCounter::new()),
        })
    }

    pub fn a(&self) -> &SharedMap {
        &self.a
    }

    pub fn q(&self) -> &SharedMap {
        &self.q
    }

    pub fn r(&self) -> &DiagonalMap {
        &self.r
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

impl LinearMap for PsiMap {
    fn rows(&self) -> usize {
        self.a.rows()
    }
    fn cols(&self) -> usize {
        self.a.rows()
    }
    fn raw_apply(&self, v: &Vector) -> Vector {
        psi_kernel(&self.a, &self.q, self.r.diagonal(), v)
            .expect("PsiMap factors were dimension-checked at construction")
    }
    fn raw_adjoint(&self, u: &Vector) -> Vector {
        self.raw_apply(u)
    }
    fn raw_apply_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let run = || -> Result<DMatrix<f64>> {
            let at_x = self.a.adjoint_block(x)?;
            let q_at_x = self.q.apply_block(&at_x)?;
            let mut out = self.a.apply_block(&q_at_x)?;
            for (mut col, xc) in out.column_iter_mut().zip(x.column_iter()) {
                col += self.r.diagonal().component_mul(&xc);
            }
            Ok(out)
        };
        run().expect("PsiMap factors were dimension-checked at construction")
    }
    fn raw_adjoint_block(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.raw_apply_block(x)
    }
    fn counter(&self) -> &MatvecCounter {
        &self.counter
    }
}

fn psi_kernel(a: &SharedMap, q: &SharedMap, r_diag: &Vector, v: &Vector) -> Result<Vector> {
    let at_v = a.adjoint_apply(v)?;
    let q_at_v = q.apply(&at_v)?;
    let mut out = a.apply(&q_at_v)?;
    out += r_diag.component_mul(v);
    Ok(out)
}

/// `Ψ v`, costing one `Aᵀ`, one `Q` and one `A` product.
pub fn psi_apply(psi: &PsiMap, v: &Vector) -> Result<Vector> {
    psi.apply(v)
}

/// `(∂Ψ/∂θᵢ) v = A (∂Q/∂θᵢ) Aᵀ v + (∂R/∂θᵢ) v`.
pub fn psi_derivative_apply(
    psi: &PsiMap,
    dq: &dyn LinearMap,
    dr: &DiagonalMap,
    v: &Vector,
) -> Result<Vector> {
    check_len("psi_derivative_apply", psi.dim(), v.len())?;
    check_len("psi_derivative_apply (dQ)", psi.a.cols(), dq.cols())?;
    check_len("psi_derivative_apply (dR)", psi.dim(), dr.rows())?;
    let at_v = psi.a.adjoint_apply(v)?;
    let mut out = psi.a.apply(&dq.apply(&at_v)?)?;
    out += dr.apply(v)?;
    Ok(out)
}

/// Dense copy of `map`, built one column at a time from the identity basis.
pub fn materialize(map: &dyn LinearMap, cap: usize) -> Result<DMatrix<f64>> {
    let (rows, cols) = (map.rows(), map.cols());
    let entries = rows.saturating_mul(cols);
    if entries > cap {
        return Err(Error::MaterializeCap {
            rows,
            cols,
            entries,
            cap,
        });
    }
    let mut out = DMatrix::zeros(rows, cols);
    let mut e = Vector::zeros(cols);
    for j in 0..cols {
        e[j] = 1.0;
        out.set_column(j, &map.apply(&e)?);
        e[j] = 0.0;
    }
    Ok(out)
}

/// Textbook Kronecker product of two dense matrices.
pub fn dense_kron(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    left.kronecker(right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::rel_close;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    mod approx_eq {
        pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
        }
    }

    fn random_dense(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_sparse(rng: &mut ChaCha8Rng, r: usize, c: usize) -> SparseMap {
        let trips: Vec<_> = (0..(r * c / 2))
            .map(|_| {
                (
                    rng.random_range(0..r),
                    rng.random_range(0..c),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        SparseMap::from_triplets(r, c, trips).unwrap()
    }

    fn adjoint_gap(map: &dyn LinearMap, rng: &mut ChaCha8Rng) -> f64 {
        let u = random_vec(rng, map.rows());
        let v = random_vec(rng, map.cols());
        let lhs = u.dot(&map.apply(&v).unwrap());
        let rhs = map.adjoint_apply(&u).unwrap().dot(&v);
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
    }

    #[test]
    fn identity_and_permutation() {
        let id = IdentityMap::new(3);
        let v = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(id.apply(&v).unwrap(), v);

        let p = DenseMap::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let out = p.apply(&Vector::from_vec(vec![3.0, 5.0])).unwrap();
        assert_eq!(out, Vector::from_vec(vec![5.0, 3.0]));
    }

    #[test]
    fn dimension_mismatch_names_lengths() {
        let p = DenseMap::new(DMatrix::zeros(2, 4));
        let err = p.apply(&Vector::zeros(3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected length 4") && msg.contains("got 3"), "{msg}");
        assert!(p.adjoint_apply(&Vector::zeros(4)).is_err());
    }

    #[test]
    fn sparse_matches_dense_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_sparse(&mut rng, 5, 4);
        let dense = s.to_dense();
        let v = random_vec(&mut rng, 4);
        let diff = (s.apply(&v).unwrap() - &dense * &v).amax();
        assert!(diff <= 1e-14);
        let m = materialize(&s, DEFAULT_MATERIALIZE_CAP).unwrap();
        assert_eq!(m, dense);
    }

    #[test]
    fn sparse_sums_duplicates() {
        let s = SparseMap::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.5), (1, 0, -1.0)]).unwrap();
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.to_dense(), DMatrix::from_row_slice(2, 2, &[0.0, 3.5, -1.0, 0.0]));
        assert!(SparseMap::from_triplets(2, 2, [(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn counter_increments_once_per_product() {
        let d = DiagonalMap::new(Vector::from_vec(vec![1.0, 2.0]));
        let v = Vector::from_vec(vec![1.0, 1.0]);
        d.apply(&v).unwrap();
        d.apply(&v).unwrap();
        d.adjoint_apply(&v).unwrap();
        assert_eq!(d.counter().applies(), 2);
        assert_eq!(d.counter().adjoints(), 1);
        // A failed call does not count.
        assert!(d.apply(&Vector::zeros(3)).is_err());
        assert_eq!(d.counter().total(), 3);
    }

    #[test]
    fn materialize_examples() {
        let id = materialize(&IdentityMap::new(3), 100).unwrap();
        assert_eq!(id, DMatrix::identity(3, 3));

        let d = materialize(&DiagonalMap::new(Vector::from_vec(vec![1.0, 2.0])), 100).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));

        // Hand-evaluated Kronecker product [[1,2],[3,4]] ⊗ [[0,5],[6,7]].
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 6.0, 7.0]);
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 5.0, 0.0, 10.0, //
                6.0, 7.0, 12.0, 14.0, //
                0.0, 15.0, 0.0, 20.0, //
                18.0, 21.0, 24.0, 28.0,
            ],
        );
        let k = KroneckerMap::new(Arc::new(DenseMap::new(l)), Arc::new(DenseMap::new(r)));
        assert_eq!(materialize(&k, 100).unwrap(), expected);
    }

    #[test]
    fn materialize_refuses_over_cap() {
        let err = materialize(&IdentityMap::new(10), 99).unwrap_err();
        assert!(matches!(err, Error::MaterializeCap { entries: 100, .. }));
    }

    #[test]
    fn kronecker_matches_dense_on_small_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (p, q, s, t) in [(1, 1, 3, 2), (2, 3, 4, 2), (3, 2, 2, 5), (4, 4, 4, 4), (1, 3, 1, 7)] {
            let l = random_dense(&mut rng, p, q);
            let r = random_dense(&mut rng, s, t);
            let k = KroneckerMap::new(
                Arc::new(DenseMap::new(l.clone())),
                Arc::new(DenseMap::new(r.clone())),
            );
            let dense = dense_kron(&l, &r);
            let v = random_vec(&mut rng, q * t);
            let u = random_vec(&mut rng, p * s);
            assert!((k.apply(&v).unwrap() - &dense * &v).amax() < 1e-13);
            assert!((k.adjoint_apply(&u).unwrap() - dense.tr_mul(&u)).amax() < 1e-13);
        }
    }

    #[test]
    fn identity_kronecker_is_blockwise() {
        // (I ⊗ A_s) vec(X) = vec(A_s X)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a_s = random_dense(&mut rng, 3, 4);
        let x = random_dense(&mut rng, 4, 5);
        let k = KroneckerMap::new(
            Arc::new(IdentityMap::new(5)),
            Arc::new(DenseMap::new(a_s.clone())),
        );
        let out = k.apply(&Vector::from_column_slice(x.as_slice())).unwrap();
        let expected = &a_s * &x;
        assert!((out - Vector::from_column_slice(expected.as_slice())).amax() < 1e-14);
    }

    #[test]
    fn composites_are_adjoint_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: SharedMap = Arc::new(random_sparse(&mut rng, 6, 5));
        let b: SharedMap = Arc::new(DenseMap::new(random_dense(&mut rng, 5, 4)));
        let c: SharedMap = Arc::new(DenseMap::new(random_dense(&mut rng, 6, 4)));
        let product: SharedMap = Arc::new(ProductMap::new(a.clone(), b).unwrap());
        let maps: Vec<SharedMap> = vec![
            a.clone(),
            Arc::new(KroneckerMap::new(
                Arc::new(DenseMap::new(random_dense(&mut rng, 2, 3))),
                a.clone(),
            )),
            Arc::new(SumMap::new(vec![product.clone(), c]).unwrap()),
            product,
            Arc::new(
                LowRankMap::new(
                    random_dense(&mut rng, 7, 3),
                    random_dense(&mut rng, 3, 3),
                    random_dense(&mut rng, 4, 3),
                )
                .unwrap(),
            ),
            Arc::new(ScaledMap::new(-2.5, a)),
        ];
        for map in &maps {
            for _ in 0..100 {
                assert!(adjoint_gap(map.as_ref(), &mut rng) <= 1e-12, "{map:?}");
            }
        }
    }

    fn random_psi(rng: &mut ChaCha8Rng, m: usize, n: usize, sigma2: f64) -> (PsiMap, DMatrix<f64>) {
        let a = random_dense(rng, m, n);
        let b = random_dense(rng, n, n);
        let q = &b * b.transpose();
        let r = Vector::from_element(m, sigma2);
        let dense = &a * &q * a.transpose() + DMatrix::from_diagonal(&r);
        let psi = PsiMap::new(
            Arc::new(DenseMap::new(a)),
            Arc::new(DenseMap::new(q)),
            Arc::new(DiagonalMap::new(r)),
        )
        .unwrap();
        (psi, dense)
    }

    #[test]
    fn psi_matches_dense_assembly_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (psi, dense) = random_psi(&mut rng, 6, 9, 0.3);
        let v = random_vec(&mut rng, 6);
        let out = psi_apply(&psi, &v).unwrap();
        let expected = &dense * &v;
        assert!((out - &expected).amax() <= 1e-12 * expected.amax());
        assert_eq!(psi.a().counter().applies(), 1);
        assert_eq!(psi.a().counter().adjoints(), 1);
        assert_eq!(psi.q().counter().applies(), 1);
        assert_eq!(psi.counter().applies(), 1);

        for _ in 0..20 {
            let u = random_vec(&mut rng, 6);
            let w = random_vec(&mut rng, 6);
            let lhs = u.dot(&psi.apply(&w).unwrap());
            let rhs = psi.apply(&u).unwrap().dot(&w);
            assert!(rel_close(lhs, rhs, 1e-12));
            assert!(w.dot(&psi.apply(&w).unwrap()) > 0.0);
        }
    }

    #[test]
    fn psi_trivial_cases() {
        let sigma2 = 0.25;
        let r = Arc::new(DiagonalMap::constant(3, sigma2));
        let zero = PsiMap::new(
            Arc::new(ZeroMap::new(3, 4)),
            Arc::new(IdentityMap::new(4)),
            r.clone(),
        )
        .unwrap();
        let v = Vector::from_vec(vec![1.0, -2.0, 4.0]);
        assert_eq!(psi_apply(&zero, &v).unwrap(), &v * sigma2);

        let shift = PsiMap::new(
            Arc::new(IdentityMap::new(3)),
            Arc::new(IdentityMap::new(3)),
            r,
        )
        .unwrap();
        assert_eq!(psi_apply(&shift, &v).unwrap(), &v * (1.0 + sigma2));
    }

    #[test]
    fn psi_derivative_trivial_cases() {
        let v = Vector::from_vec(vec![1.0, 2.0]);
        let psi = PsiMap::new(
            Arc::new(IdentityMap::new(2)),
            Arc::new(IdentityMap::new(2)),
            Arc::new(DiagonalMap::constant(2, 1.0)),
        )
        .unwrap();
        let out = psi_derivative_apply(&psi, &ZeroMap::new(2, 2), &DiagonalMap::constant(2, 1.0), &v);
        assert_eq!(out.unwrap(), v);
        let out = psi_derivative_apply(&psi, &IdentityMap::new(2), &DiagonalMap::constant(2, 0.0), &v);
        assert_eq!(out.unwrap(), v);
        assert!(psi_derivative_apply(&psi, &IdentityMap::new(3), &DiagonalMap::constant(2, 0.0), &v).is_err());
    }
}
