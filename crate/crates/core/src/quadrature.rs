//! Gauss–Hermite rules, tensor-product grids, and Gaussian expectations.
//!
//! A rule integrates against the weight `e^{-x²}`. A [`TensorGrid`] carries the
//! normalizer `π^{-q/2}` so that `normalizer · Σ_t w_t g(√2 L x_t + μ)`
//! approximates `E[g(Z)]` for `Z ~ N(μ, L Lᵀ)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

pub const MAX_ORDER: usize = 100;
pub const MAX_GRID_POINTS: usize = 10_000_000;

/// One-dimensional Gauss–Hermite rule (physicists' convention).
#[derive(Debug, Clone, PartialEq)]
pub struct HermiteRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl HermiteRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Orthonormal Hermite recurrence at `x`: returns `(ψ_n(x), ψ_{n-1}(x))` for
/// the polynomials orthonormal under `e^{-x²}`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 0.0;
    let mut p = PI.powf(-0.25);
    for j in 1..=n {
        let jf = j as f64;
        let next = x * (2.0 / jf).sqrt() * p - ((jf - 1.0) / jf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    (p, p_prev)
}

/// Gauss–Hermite nodes and weights for `order` points.
///
/// Nodes start from the eigenvalues of the symmetric Jacobi matrix and are
/// polished by Newton iterations on the orthonormal recurrence; weights are
/// `2 / ψ_n'(x)²`. The result is symmetrized exactly.
pub fn hermite_rule(order: usize) -> Result<HermiteRule> {
    if order == 0 || order > MAX_ORDER {
        return Err(Error::invalid(format!(
            "quadrature order must lie in 1..={MAX_ORDER}, got {order}"
        )));
    }
    let n = order;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guesses: Vec<f64> = jacobi.symmetric_eigen().eigenvalues.iter().copied().collect();
    guesses.sort_by(|a, b| a.total_cmp(b));

    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &x0 in &guesses {
        let mut x = x0;
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (p, p_prev) = orthonormal_hermite(n, x);
            deriv = (2.0 * n as f64).sqrt() * p_prev;
            let step = p / deriv;
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                let (_, p_prev) = orthonormal_hermite(n, x);
                deriv = (2.0 * n as f64).sqrt() * p_prev;
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / (deriv * deriv));
    }

    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(HermiteRule { nodes, weights })
}

/// Tensor-product grid: `points` is row-major, one length-`q` point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    q: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    normalizer: f64,
}

impl TensorGrid {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, t: usize) -> &[f64] {
        &self.points[t * self.q..(t + 1) * self.q]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.q)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// `normalizer · w_t`, the probability mass attached to point `t`.
    pub fn mass(&self, t: usize) -> f64 {
        self.normalizer * self.weights[t]
    }
}

/// Cartesian product of the `order`-point rule in `q` dimensions. The last
/// coordinate varies fastest.
pub fn tensor_grid(q: usize, order: usize) -> Result<TensorGrid> {
    if q == 0 {
        return Err(Error::invalid("grid dimension must be positive"));
    }
    let rule = hermite_rule(order)?;
    let total = (order as u128).checked_pow(q as u32).unwrap_or(u128::MAX);
    if total > MAX_GRID_POINTS as u128 {
        return Err(Error::ResourceLimit(format!(
            "{order}^{q} quadrature points exceed the limit of {MAX_GRID_POINTS}"
        )));
    }
    let total = total as usize;
    let mut points = Vec::with_capacity(total * q);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; q];
    for _ in 0..total {
        let mut w = 1.0;
        for &i in &idx {
            points.push(rule.nodes[i]);
            w *= rule.weights[i];
        }
        weights.push(w);
        for d in (0..q).rev() {
            idx[d] += 1;
            if idx[d] < order {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(TensorGrid {
        q,
        points,
        weights,
        normalizer: PI.powf(-(q as f64) / 2.0),
    })
}

/// Maps every point `x` to `√2 L x + μ` with `L` the lower Cholesky factor of `sigma`.
pub fn transform_grid(
    grid: &TensorGrid,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<TensorGrid> {
    if mu.len() != grid.q || sigma.nrows() != grid.q || sigma.ncols() != grid.q {
        return Err(Error::invalid("mean/covariance dimension differs from the grid"));
    }
    let l = linalg::cholesky_lower(sigma)?;
    Ok(transform_with_factor(grid, mu, &l))
}

pub(crate) fn transform_with_factor(
    grid: &TensorGrid,
    mu: &DVector<f64>,
    l: &DMatrix<f64>,
) -> TensorGrid {
    let q = grid.q;
    let mut points = Vec::with_capacity(grid.points.len());
    let s2 = 2f64.sqrt();
    for x in grid.points() {
        for r in 0..q {
            let mut v = mu[r];
            for c in 0..=r {
                v += s2 * l[(r, c)] * x[c];
            }
            points.push(v);
        }
    }
    TensorGrid {
        q,
        points,
        weights: grid.weights.clone(),
        normalizer: grid.normalizer,
    }
}

/// Values that can be accumulated by [`expect`].
pub trait QuadValue: Sized {
    fn scaled(&self, w: f64) -> Self;
    fn add_scaled(&mut self, other: &Self, w: f64);
    fn all_finite(&self) -> bool;
}

impl QuadValue for f64 {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += other * w;
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl QuadValue for DVector<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.axpy(w, other, 1.0);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl QuadValue for DMatrix<f64> {
    fn scaled(&self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += other * w;
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// `normalizer · Σ_t w_t g(point_t)`, summed in point order.
pub fn expect<V, F>(grid: &TensorGrid, integrand: F) -> Result<V>
where
    V: QuadValue,
    F: Fn(&[f64]) -> V,
{
    let mut acc: Option<V> = None;
    for (t, x) in grid.points().enumerate() {
        let v = integrand(x);
        if !v.all_finite() {
            return Err(Error::degenerate(format!(
                "integrand is non-finite at quadrature point {t}"
            )));
        }
        let w = grid.mass(t);
        match acc.as_mut() {
            None => acc = Some(v.scaled(w)),
            Some(a) => a.add_scaled(&v, w),
        }
    }
    acc.ok_or_else(|| Error::invalid("empty quadrature grid"))
}
