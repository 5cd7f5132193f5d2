//! Dense-grid Bayes oracles for one-factor models and small random fixtures.
#![allow(dead_code)]

use fmab::{Loadings, MixtureParams, ModelParams, ModelSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trapezoid points per component.
pub const DENSE_POINTS: usize = 20_001;
/// Half-width of the integration window in component standard deviations.
pub const DENSE_HALF_WIDTH: f64 = 14.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normal_pdf(z: f64, mean: f64, var: f64) -> f64 {
    let d = z - mean;
    (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn conditional(intercepts: &[f64], slopes: &[f64], y: &[u8], z: f64) -> f64 {
    y.iter()
        .enumerate()
        .map(|(j, &yj)| {
            let pi = sigmoid(intercepts[j] + slopes[j] * z);
            if yj == 1 {
                pi
            } else {
                1.0 - pi
            }
        })
        .product()
}

/// `(∫ g, ∫ z g, ∫ z² g)` for `g(z) = φ(z; μ_i, σ_i²) f(y | z)`.
fn component_integrals(params: &ModelParams, i: usize, y: &[u8]) -> (f64, f64, f64) {
    assert_eq!(params.spec.q, 1);
    let icpt: Vec<f64> = params.loadings.intercepts.iter().copied().collect();
    let slope: Vec<f64> = (0..params.spec.p).map(|j| params.loadings.matrix[(j, 0)]).collect();
    let mean = params.mixture.means[i][0];
    let var = params.mixture.covariances[i][(0, 0)];
    let sd = var.sqrt();
    let (lo, hi) = (mean - DENSE_HALF_WIDTH * sd, mean + DENSE_HALF_WIDTH * sd);
    let h = (hi - lo) / (DENSE_POINTS - 1) as f64;
    let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for t in 0..DENSE_POINTS {
        let z = lo + h * t as f64;
        let w = if t == 0 || t == DENSE_POINTS - 1 { 0.5 * h } else { h };
        let g = w * normal_pdf(z, mean, var) * conditional(&icpt, &slope, y, z);
        m0 += g;
        m1 += g * z;
        m2 += g * z * z;
    }
    (m0, m1, m2)
}

pub struct Oracle {
    pub component_lik: Vec<f64>,
    pub marginal: f64,
    pub posteriors: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_var: Vec<f64>,
    pub score: f64,
}

pub fn oracle(params: &ModelParams, y: &[u8]) -> Oracle {
    let k = params.spec.k;
    let mut lik = Vec::with_capacity(k);
    let mut mean = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    for i in 0..k {
        let (m0, m1, m2) = component_integrals(params, i, y);
        lik.push(m0);
        let m = m1 / m0;
        mean.push(m);
        var.push(m2 / m0 - m * m);
    }
    let w: Vec<f64> = params.mixture.weights.iter().copied().collect();
    let marginal: f64 = w.iter().zip(&lik).map(|(a, b)| a * b).sum();
    let posteriors: Vec<f64> = w.iter().zip(&lik).map(|(a, b)| a * b / marginal).collect();
    let score = posteriors.iter().zip(&mean).map(|(a, b)| a * b).sum();
    Oracle {
        component_lik: lik,
        marginal,
        posteriors,
        cond_mean: mean,
        cond_var: var,
        score,
    }
}

/// Dense-grid observed-data log-likelihood.
pub fn dense_loglik(params: &ModelParams, patterns: &[Vec<u8>], counts: &[usize]) -> f64 {
    patterns
        .iter()
        .zip(counts)
        .map(|(y, &c)| c as f64 * oracle(params, y).marginal.ln())
        .sum()
}

pub fn all_patterns(p: usize) -> Vec<Vec<u8>> {
    (0..1usize << p)
        .map(|b| (0..p).map(|j| ((b >> (p - 1 - j)) & 1) as u8).collect())
        .collect()
}

/// Random one-factor model with given dimensions; loadings in `[-2, 2]`.
pub fn random_one_factor(p: usize, k: usize, rng: &mut ChaCha8Rng) -> ModelParams {
    let intercepts = DVector::from_fn(p, |_, _| rng.random_range(-1.5..1.5));
    let matrix = DMatrix::from_fn(p, 1, |_, _| rng.random_range(-2.0..2.0));
    let w0 = rng.random_range(0.2..0.8);
    let weights = if k == 1 {
        DVector::from_element(1, 1.0)
    } else {
        DVector::from_row_slice(&[w0, 1.0 - w0])
    };
    let means = (0..k)
        .map(|_| DVector::from_element(1, rng.random_range(-1.5..1.5)))
        .collect();
    let covariances = (0..k)
        .map(|_| DMatrix::from_element(1, 1, rng.random_range(0.2..1.5)))
        .collect();
    ModelParams::new(
        ModelSpec::unbounded(p, 1, k).unwrap(),
        Loadings::new(intercepts, matrix).unwrap(),
        MixtureParams::new(weights, means, covariances).unwrap(),
    )
    .unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
