//! Parameter and data types of the binary factor mixture model, and the
//! closed-form densities of its measurement part and latent mixture.
//!
//! The measurement model is a logit latent-trait model,
//! `logit P(y_j = 1 | z) = λ_j0 + λ_jᵀ z`, with items conditionally independent
//! given the `q` latent factors. The factors follow a `k`-component Gaussian
//! mixture whose overall mean is zero and overall covariance the identity.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance used when validating that mixture weights form a simplex.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Model dimensions: `p` items, `q` factors, `k` mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub p: usize,
    pub q: usize,
    pub k: usize,
}

impl ModelSpec {
    /// Dimensions admissible for estimation: all positive and `q` within the
    /// Ledermann bound for `p`.
    pub fn new(p: usize, q: usize, k: usize) -> Result<Self> {
        let spec = Self::unbounded(p, q, k)?;
        let q_max = ledermann_max_factors(p);
        if q > q_max {
            return Err(Error::invalid(format!(
                "q = {q} exceeds the Ledermann bound {q_max} for p = {p}"
            )));
        }
        Ok(spec)
    }

    /// Positive dimensions with `q ≤ p` but without the Ledermann check, for
    /// evaluating densities of models that are not estimable (p = 1, 2, ...).
    pub fn unbounded(p: usize, q: usize, k: usize) -> Result<Self> {
        if p == 0 || q == 0 || k == 0 {
            return Err(Error::invalid(format!(
                "model dimensions must be positive (p = {p}, q = {q}, k = {k})"
            )));
        }
        if q > p {
            return Err(Error::invalid(format!("q = {q} exceeds p = {p}")));
        }
        Ok(Self { p, q, k })
    }

    pub fn within_ledermann(&self) -> bool {
        self.q <= ledermann_max_factors(self.p)
    }

    /// Number of free parameters; see [`count_free_parameters`].
    pub fn n_free_parameters(&self) -> usize {
        count_free_parameters(self)
    }
}

/// Binary responses collapsed to distinct patterns with multiplicities.
///
/// Patterns are kept in lexicographic order so that two tables built from the
/// same multiset of rows are identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternTable {
    p: usize,
    patterns: Vec<Vec<u8>>,
    counts: Vec<usize>,
    n: usize,
}

impl PatternTable {
    pub fn new(p: usize, patterns: Vec<Vec<u8>>, counts: Vec<usize>) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("pattern length must be positive"));
        }
        if patterns.len() != counts.len() {
            return Err(Error::invalid("patterns and counts differ in length"));
        }
        let mut merged: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        for (pat, &c) in patterns.iter().zip(&counts) {
            if pat.len() != p {
                return Err(Error::invalid(format!(
                    "pattern of length {} in a table with p = {p}",
                    pat.len()
                )));
            }
            if pat.iter().any(|&v| v > 1) {
                return Err(Error::invalid("pattern cells must be 0 or 1"));
            }
            if c == 0 {
                return Err(Error::invalid("pattern counts must be positive"));
            }
            if merged.insert(pat.clone(), c).is_some() {
                return Err(Error::invalid("duplicate pattern in table"));
            }
        }
        Ok(Self::from_map(p, merged))
    }

    /// Collapses observation rows into distinct patterns.
    pub fn from_rows<R: AsRef<[u8]>>(p: usize, rows: &[R]) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("pattern length must be positive"));
        }
        let mut merged: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
        for row in rows {
            let row = row.as_ref();
            if row.len() != p || row.iter().any(|&v| v > 1) {
                return Err(Error::invalid("rows must be binary vectors of length p"));
            }
            *merged.entry(row.to_vec()).or_insert(0) += 1;
        }
        Ok(Self::from_map(p, merged))
    }

    fn from_map(p: usize, merged: BTreeMap<Vec<u8>, usize>) -> Self {
        let (patterns, counts): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
        let n = counts.iter().sum();
        Self {
            p,
            patterns,
            counts,
            n,
        }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_patterns(&self) -> usize {
        self.patterns.len()
    }

    pub fn patterns(&self) -> &[Vec<u8>] {
        &self.patterns
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn pattern(&self, h: usize) -> &[u8] {
        &self.patterns[h]
    }

    pub fn count(&self, h: usize) -> usize {
        self.counts[h]
    }

    /// Index of a pattern, if observed.
    pub fn position(&self, y: &[u8]) -> Option<usize> {
        self.patterns
            .binary_search_by(|pat| pat.as_slice().cmp(y))
            .ok()
    }

    /// One row per observation, in pattern order.
    pub fn expand_rows(&self) -> Vec<Vec<u8>> {
        self.patterns
            .iter()
            .zip(&self.counts)
            .flat_map(|(pat, &c)| std::iter::repeat_n(pat.clone(), c))
            .collect()
    }

    /// Proportion of ones per item.
    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.p];
        for (pat, &c) in self.patterns.iter().zip(&self.counts) {
            for (s, &v) in sums.iter_mut().zip(pat) {
                *s += (v as usize * c) as f64;
            }
        }
        let n = self.n.max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Items answered identically by every observation.
    pub fn constant_items(&self) -> Vec<usize> {
        self.item_means()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 0.0 || m == 1.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Intercepts and loading matrix on the logit scale.
///
/// Entry `(j, r)` of the loading matrix is structurally zero when `r > j`:
/// the upper triangle of the leading `q × q` block is fixed at zero so that
/// rotations are identified.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings {
    pub intercepts: DVector<f64>,
    pub matrix: DMatrix<f64>,
}

impl Loadings {
    pub fn new(intercepts: DVector<f64>, matrix: DMatrix<f64>) -> Result<Self> {
        if intercepts.len() != matrix.nrows() {
            return Err(Error::invalid(format!(
                "{} intercepts for a {}-row loading matrix",
                intercepts.len(),
                matrix.nrows()
            )));
        }
        if matrix.ncols() == 0 {
            return Err(Error::invalid("loading matrix needs at least one column"));
        }
        if !intercepts.iter().chain(matrix.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite loading parameter"));
        }
        for j in 0..matrix.nrows() {
            for r in 0..matrix.ncols() {
                if Self::is_masked(j, r) && matrix[(j, r)] != 0.0 {
                    return Err(Error::invalid(format!(
                        "loading ({j}, {r}) is fixed at zero but holds {}",
                        matrix[(j, r)]
                    )));
                }
            }
        }
        Ok(Self { intercepts, matrix })
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            intercepts: DVector::zeros(p),
            matrix: DMatrix::zeros(p, q),
        }
    }

    pub fn p(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn q(&self) -> usize {
        self.matrix.ncols()
    }

    #[inline]
    pub fn is_masked(j: usize, r: usize) -> bool {
        r > j
    }

    pub fn zero_mask(&self) -> DMatrix<bool> {
        DMatrix::from_fn(self.p(), self.q(), Self::is_masked)
    }

    /// Number of free loading columns in row `j`.
    #[inline]
    pub fn free_columns(&self, j: usize) -> usize {
        (j + 1).min(self.q())
    }

    /// `λ_j0 + λ_jᵀ z`.
    #[inline]
    pub fn linear_predictor(&self, j: usize, z: &[f64]) -> f64 {
        let mut eta = self.intercepts[j];
        for (r, &zr) in z.iter().enumerate() {
            eta += self.matrix[(j, r)] * zr;
        }
        eta
    }

    /// Zeroes masked entries; used after arithmetic that may leave rounding
    /// residue in fixed positions.
    pub fn enforce_mask(&mut self) {
        let q = self.q();
        for j in 0..self.p() {
            for r in (j + 1)..q {
                self.matrix[(j, r)] = 0.0;
            }
        }
    }
}

/// Weights, means and covariances of the latent Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub weights: DVector<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl MixtureParams {
    pub fn new(
        weights: DVector<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::invalid("mixture needs k weights, means and covariances"));
        }
        let q = means[0].len();
        if q == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        if (weights.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "mixture weights sum to {} rather than 1",
                weights.sum()
            )));
        }
        for (mu, sigma) in means.iter().zip(&covariances) {
            if mu.len() != q || sigma.nrows() != q || sigma.ncols() != q {
                return Err(Error::invalid("inconsistent mixture dimensions"));
            }
            if !mu.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("non-finite component mean"));
            }
            if linalg::max_abs_diff(sigma, &sigma.transpose()) > 1e-12 {
                return Err(Error::invalid("component covariance is not symmetric"));
            }
            linalg::cholesky_lower(sigma)?;
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    /// Single standard normal component, `N(0, I_q)`.
    pub fn standard(q: usize) -> Self {
        Self {
            weights: DVector::from_element(1, 1.0),
            means: vec![DVector::zeros(q)],
            covariances: vec![DMatrix::identity(q, q)],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn q(&self) -> usize {
        self.means[0].len()
    }

    /// `Σ τ_i μ_i`.
    pub fn overall_mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.q());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    /// `Σ τ_i (Σ_i + μ_i μ_iᵀ) − m mᵀ`.
    pub fn overall_covariance(&self) -> DMatrix<f64> {
        let q = self.q();
        let mut v = DMatrix::zeros(q, q);
        for ((w, mu), sigma) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            v += (sigma + mu * mu.transpose()) * *w;
        }
        let m = self.overall_mean();
        v -= &m * m.transpose();
        v
    }

    /// Largest absolute violation of the zero-mean and identity-covariance
    /// constraints.
    pub fn standardization_residual(&self) -> f64 {
        let m = self.overall_mean().amax();
        let v = linalg::max_abs_diff(
            &self.overall_covariance(),
            &DMatrix::identity(self.q(), self.q()),
        );
        m.max(v)
    }

    /// Reorders components so that new component `i` is old component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.weights[i])),
            means: perm.iter().map(|&i| self.means[i].clone()).collect(),
            covariances: perm.iter().map(|&i| self.covariances[i].clone()).collect(),
        }
    }
}

/// Full parameter set of a fitted or hypothesised model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub loadings: Loadings,
    pub mixture: MixtureParams,
}

impl ModelParams {
    pub fn new(spec: ModelSpec, loadings: Loadings, mixture: MixtureParams) -> Result<Self> {
        if loadings.p() != spec.p || loadings.q() != spec.q {
            return Err(Error::invalid(format!(
                "loadings are {}x{} but the model is p = {}, q = {}",
                loadings.p(),
                loadings.q(),
                spec.p,
                spec.q
            )));
        }
        if mixture.k() != spec.k || mixture.q() != spec.q {
            return Err(Error::invalid(format!(
                "mixture has k = {}, q = {} but the model is k = {}, q = {}",
                mixture.k(),
                mixture.q(),
                spec.k,
                spec.q
            )));
        }
        Ok(Self {
            spec,
            loadings,
            mixture,
        })
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log logistic(x)`, finite for every finite `x`.
#[inline]
pub fn log_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `P(y_j = 1 | z)` for one item.
pub fn item_response_prob(intercept: f64, loading_row: &[f64], z: &[f64]) -> Result<f64> {
    if loading_row.len() != z.len() {
        return Err(Error::invalid("loading row and latent point differ in length"));
    }
    if !intercept.is_finite() || !loading_row.iter().chain(z).all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite input to item response probability"));
    }
    let eta = intercept + loading_row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
    Ok(logistic(eta))
}

fn check_pattern(loadings: &Loadings, y: &[u8], z: &[f64]) -> Result<()> {
    if y.len() != loadings.p() {
        return Err(Error::invalid(format!(
            "pattern has length {} but the model has p = {}",
            y.len(),
            loadings.p()
        )));
    }
    if z.len() != loadings.q() {
        return Err(Error::invalid(format!(
            "latent point has length {} but the model has q = {}",
            z.len(),
            loadings.q()
        )));
    }
    Ok(())
}

/// `log f(y | z) = Σ_j [y_j log π_j(z) + (1 − y_j) log(1 − π_j(z))]`.
pub fn log_pattern_conditional_prob(loadings: &Loadings, y: &[u8], z: &[f64]) -> Result<f64> {
    check_pattern(loadings, y, z)?;
    Ok(y.iter()
        .enumerate()
        .map(|(j, &yj)| {
            let eta = loadings.linear_predictor(j, z);
            if yj == 1 {
                log_logistic(eta)
            } else {
                log_logistic(-eta)
            }
        })
        .sum())
}

/// `f(y | z)`: product of conditionally independent Bernoulli terms.
pub fn pattern_conditional_prob(loadings: &Loadings, y: &[u8], z: &[f64]) -> Result<f64> {
    log_pattern_conditional_prob(loadings, y, z).map(f64::exp)
}

/// `log φ(z; μ, Σ)`.
pub fn log_gaussian_density(z: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let l = linalg::cholesky_lower(cov)?;
    let q = z.len() as f64;
    Ok(-0.5 * (q * (2.0 * PI).ln() + linalg::log_det_from_cholesky(&l))
        - 0.5 * linalg::mahalanobis_sq(&l, z, mean))
}

/// Mixture density `Σ_i τ_i φ(z; μ_i, Σ_i)`.
pub fn latent_density(mixture: &MixtureParams, z: &[f64]) -> Result<f64> {
    if z.len() != mixture.q() {
        return Err(Error::invalid("latent point has the wrong dimension"));
    }
    let mut total = 0.0;
    for i in 0..mixture.k() {
        let lp = log_gaussian_density(z, &mixture.means[i], &mixture.covariances[i])?;
        total += mixture.weights[i] * lp.exp();
    }
    Ok(total)
}

/// Free parameters after the identification constraints.
///
/// Intercepts and loadings contribute `p(q + 1) − q(q − 1)/2`. The mixture
/// contributes `(k − 1) + kq + k q(q + 1)/2` minus the `q + q(q + 1)/2`
/// standardization constraints, which is zero for `k = 1`.
pub fn count_free_parameters(spec: &ModelSpec) -> usize {
    let ModelSpec { p, q, k } = *spec;
    let measurement = p * (q + 1) - q * (q - 1) / 2;
    let cov = q * (q + 1) / 2;
    let mixture = (k - 1) + k * q + k * cov - q - cov;
    measurement + mixture
}

/// Largest `q` with `q ≤ (2p + 1 − √(8p + 1)) / 2`, i.e. `(p − q)² ≥ p + q`.
pub fn ledermann_max_factors(p: usize) -> usize {
    let mut q = 0;
    while q < p && (p - (q + 1)).pow(2) > p + q {
        q += 1;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loadings(intercepts: &[f64], rows: &[&[f64]]) -> Loadings {
        let q = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Loadings::new(
            DVector::from_row_slice(intercepts),
            DMatrix::from_row_slice(rows.len(), q, &flat),
        )
        .unwrap()
    }

    #[test]
    fn response_prob_fixed_points() {
        assert_eq!(item_response_prob(0.0, &[0.0], &[3.0]).unwrap(), 0.5);
        assert!((item_response_prob(3f64.ln(), &[0.0, 0.0], &[1.0, -2.0]).unwrap() - 0.75).abs() < 1e-15);
        // logistic(-1.42) = 1 / (1 + e^1.42)
        let v = item_response_prob(-1.42, &[5.23], &[0.0]).unwrap();
        assert!((v - 0.194_661_583_591_577_92).abs() < 1e-15, "{v}");
    }

    #[test]
    fn response_prob_rejects_non_finite() {
        assert!(item_response_prob(f64::NAN, &[1.0], &[0.0]).is_err());
        assert!(item_response_prob(0.0, &[1.0], &[f64::INFINITY]).is_err());
        assert!(item_response_prob(0.0, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn pattern_prob_examples() {
        let l = Loadings::zeros(2, 1);
        assert!((pattern_conditional_prob(&l, &[1, 0], &[0.7]).unwrap() - 0.25).abs() < 1e-15);

        let sat = loadings(&[50.0], &[&[0.0]]);
        assert!((pattern_conditional_prob(&sat, &[1], &[0.0]).unwrap() - 1.0).abs() < 1e-15);

        let t2 = loadings(&[0.45, -0.99, 0.11], &[&[2.16], &[3.21], &[2.06]]);
        let expected: f64 = [0.45f64, -0.99, 0.11]
            .iter()
            .map(|&a| 1.0 / (1.0 + (-a).exp()))
            .product();
        let got = pattern_conditional_prob(&t2, &[1, 1, 1], &[0.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.6106 * 0.2709 * 0.5275).abs() < 1e-4);

        assert!(pattern_conditional_prob(&t2, &[1, 1], &[0.0]).is_err());
    }

    #[test]
    fn masked_loading_must_be_zero() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.5, 1.0]);
        assert!(Loadings::new(DVector::zeros(2), m).is_err());
        let l = Loadings::zeros(4, 3);
        let mask = l.zero_mask();
        let expected = [(0, 1), (0, 2), (1, 2)];
        for j in 0..4 {
            for r in 0..3 {
                assert_eq!(mask[(j, r)], expected.contains(&(j, r)));
            }
        }
    }

    #[test]
    fn latent_density_examples() {
        let std = MixtureParams::standard(1);
        let v = latent_density(&std, &[0.0]).unwrap();
        assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);

        let twin = MixtureParams::new(
            DVector::from_row_slice(&[0.5, 0.5]),
            vec![DVector::from_element(1, 0.3); 2],
            vec![DMatrix::from_element(1, 1, 0.8); 2],
        )
        .unwrap();
        let single = MixtureParams::new(
            DVector::from_element(1, 1.0),
            vec![DVector::from_element(1, 0.3)],
            vec![DMatrix::from_element(1, 1, 0.8)],
        )
        .unwrap();
        for z in [-2.0, 0.0, 0.4, 3.1] {
            let a = latent_density(&twin, &[z]).unwrap();
            let b = latent_density(&single, &[z]).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_density_three_component_fixture() {
        let mix = MixtureParams::new(
            DVector::from_row_slice(&[0.3, 0.3, 0.4]),
            vec![
                DVector::from_row_slice(&[-1.19, 0.77]),
                DVector::from_row_slice(&[1.20, 0.76]),
                DVector::from_row_slice(&[-0.01, -1.15]),
            ],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.17, 0.08, 0.08, 0.14]),
                DMatrix::from_row_slice(2, 2, &[0.16, -0.08, -0.08, 0.12]),
                DMatrix::from_row_slice(2, 2, &[0.10, -0.01, -0.01, 0.09]),
            ],
        )
        .unwrap();
        // Closed-form 2x2 evaluation, independent of the Cholesky path.
        let direct: f64 = (0..3)
            .map(|i| {
                let s = &mix.covariances[i];
                let (a, b, d) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
                let det = a * d - b * b;
                let (x, y) = (-mix.means[i][0], -mix.means[i][1]);
                let quad = (d * x * x - 2.0 * b * x * y + a * y * y) / det;
                mix.weights[i] * (-0.5 * quad).exp() / (2.0 * PI * det.sqrt())
            })
            .sum();
        let v = latent_density(&mix, &[0.0, 0.0]).unwrap();
        assert!((v - direct).abs() < 1e-13 * direct);
        assert!(v > 0.0 && v < 1e-2, "{v}");
    }

    #[test]
    fn latent_density_integrates_to_one() {
        let mix = MixtureParams::new(
            DVector::from_row_slice(&[0.4, 0.6]),
            vec![DVector::from_element(1, -1.0), DVector::from_element(1, 0.666)],
            vec![DMatrix::from_element(1, 1, 0.3), DMatrix::from_element(1, 1, 0.5)],
        )
        .unwrap();
        let n = 20_000;
        let h = 20.0 / n as f64;
        let total: f64 = (0..=n)
            .map(|t| {
                let z = -10.0 + t as f64 * h;
                let w = if t == 0 || t == n { 0.5 } else { 1.0 };
                w * latent_density(&mix, &[z]).unwrap()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-6);

        let mix2 = MixtureParams::new(
            DVector::from_row_slice(&[0.5, 0.5]),
            vec![DVector::from_row_slice(&[-1.0, 0.5]), DVector::from_row_slice(&[1.0, -0.5])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 0.6]),
            ],
        )
        .unwrap();
        let m = 600;
        let h = 12.0 / m as f64;
        let mut total = 0.0;
        for a in 0..=m {
            for b in 0..=m {
                let wa = if a == 0 || a == m { 0.5 } else { 1.0 };
                let wb = if b == 0 || b == m { 0.5 } else { 1.0 };
                let z = [-6.0 + a as f64 * h, -6.0 + b as f64 * h];
                total += wa * wb * latent_density(&mix2, &z).unwrap();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-6);
    }

    #[test]
    fn singular_covariance_is_degenerate() {
        let r = MixtureParams::new(
            DVector::from_element(1, 1.0),
            vec![DVector::zeros(2)],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])],
        );
        assert!(matches!(r, Err(Error::NumericalDegeneracy(_))));
    }

    #[test]
    fn free_parameter_examples() {
        let c = |p, q, k| count_free_parameters(&ModelSpec::unbounded(p, q, k).unwrap());
        assert_eq!(c(21, 2, 1), 62);
        assert_eq!(c(21, 2, 3), 74);
        assert_eq!(c(4, 1, 2), 11);
    }

    #[test]
    fn free_parameters_match_enumeration() {
        for p in 1..=25 {
            for q in 1..=3.min(p) {
                for k in 1..=4 {
                    let spec = ModelSpec::unbounded(p, q, k).unwrap();
                    let mut count = p; // intercepts
                    for j in 0..p {
                        for r in 0..q {
                            if !Loadings::is_masked(j, r) {
                                count += 1;
                            }
                        }
                    }
                    if k > 1 {
                        let entries = (k - 1) + k * q + k * q * (q + 1) / 2;
                        count += entries - q - q * (q + 1) / 2;
                    }
                    assert_eq!(count_free_parameters(&spec), count, "p={p} q={q} k={k}");
                }
            }
        }
    }

    #[test]
    fn ledermann_examples_and_formula() {
        assert_eq!(ledermann_max_factors(4), 1);
        assert_eq!(ledermann_max_factors(1), 0);
        assert_eq!(ledermann_max_factors(10), 6);
        for p in 1..200usize {
            let bound = (2.0 * p as f64 + 1.0 - (8.0 * p as f64 + 1.0).sqrt()) / 2.0;
            assert_eq!(ledermann_max_factors(p), (bound + 1e-9).floor() as usize, "p={p}");
        }
        assert!(ModelSpec::new(4, 2, 1).is_err());
        assert!(ModelSpec::new(4, 1, 3).is_ok());
        assert!(ModelSpec::new(4, 0, 1).is_err());
    }

    #[test]
    fn pattern_table_collapses_rows() {
        let rows = vec![vec![1u8, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
        let t = PatternTable::from_rows(2, &rows).unwrap();
        assert_eq!(t.n(), 4);
        assert_eq!(t.n_patterns(), 3);
        assert_eq!(t.count(t.position(&[1, 0]).unwrap()), 2);
        assert_eq!(PatternTable::from_rows(2, &t.expand_rows()).unwrap(), t);
        assert!(PatternTable::new(2, vec![vec![1, 0], vec![1, 0]], vec![1, 1]).is_err());
        assert!(PatternTable::new(2, vec![vec![1, 2]], vec![1]).is_err());
    }

    proptest! {
        #[test]
        fn response_prob_invariant_under_reparameterization(
            a in -2.0..2.0f64, l1 in -2.0..2.0f64, l2 in -2.0..2.0f64,
            m11 in 0.5..2.0f64, m12 in -1.0..1.0f64, m21 in -1.0..1.0f64, m22 in 0.5..2.0f64,
            s1 in -1.0..1.0f64, s2 in -1.0..1.0f64,
            z1 in -3.0..3.0f64, z2 in -3.0..3.0f64,
        ) {
            let m = DMatrix::from_row_slice(2, 2, &[m11, m12, m21, m22]);
            prop_assume!(m.determinant().abs() > 0.1);
            let lam = DMatrix::from_row_slice(1, 2, &[l1, l2]);
            let shift = DVector::from_row_slice(&[s1, s2]);
            let z = DVector::from_row_slice(&[z1, z2]);
            let base = item_response_prob(a, &[l1, l2], z.as_slice()).unwrap();
            let a2 = a + (&lam * &shift)[0];
            let lam2 = &lam * &m;
            let z2v = m.clone().try_inverse().unwrap() * (&z - &shift);
            let moved = item_response_prob(a2, lam2.as_slice(), z2v.as_slice()).unwrap();
            prop_assert!((base - moved).abs() < 1e-12);
        }

        #[test]
        fn pattern_probs_sum_to_one(
            p in 1usize..=10,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q = 2;
            let mut mat = DMatrix::from_fn(p, q, |_, _| rng.random_range(-2.0..2.0));
            let ints = DVector::from_fn(p, |_, _| rng.random_range(-2.0..2.0));
            for j in 0..p { for r in (j + 1)..q { mat[(j, r)] = 0.0; } }
            let l = Loadings::new(ints, mat).unwrap();
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let total: f64 = (0..(1u32 << p)).map(|bits| {
                let y: Vec<u8> = (0..p).map(|j| ((bits >> j) & 1) as u8).collect();
                pattern_conditional_prob(&l, &y, &z).unwrap()
            }).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }
    }
}
