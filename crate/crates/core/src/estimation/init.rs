//! Starting values: a one-group latent-trait fit supplies the loadings, and
//! the mixture comes from a seeded k-means of its posterior factor scores,
//! falling back to a random draw when the clustering degenerates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Loadings, MixtureParams, ModelParams, ModelSpec, PatternTable};
use crate::linalg;
use crate::quadrature::TensorGrid;

use super::estep::e_step;
use super::standardize::standardize;
use super::{run_gem, FitConfig};

const LLOYD_ITERATIONS: usize = 25;

/// Eigenvalue floor of clustered starting covariances.
const START_VARIANCE_FLOOR: f64 = 0.05;

/// Logistic-to-normal-ogive scale factor.
const LOGIT_SCALE: f64 = 1.7;

/// Heuristic loadings from the principal axes of the item correlation matrix,
/// rotated so the leading `q × q` block is lower triangular, with each factor
/// oriented to have a positive loading sum.
pub fn heuristic_loadings(data: &PatternTable, q: usize) -> Loadings {
    let p = data.p();
    let n = data.n().max(1) as f64;
    let mut joint = DMatrix::<f64>::zeros(p, p);
    for (pat, &c) in data.patterns().iter().zip(data.counts()) {
        for a in 0..p {
            if pat[a] == 0 {
                continue;
            }
            for b in 0..p {
                if pat[b] == 1 {
                    joint[(a, b)] += c as f64;
                }
            }
        }
    }
    joint /= n;
    let means: Vec<f64> = (0..p).map(|j| joint[(j, j)]).collect();
    let corr = DMatrix::from_fn(p, p, |a, b| {
        if a == b {
            return 1.0;
        }
        let va = means[a] * (1.0 - means[a]);
        let vb = means[b] * (1.0 - means[b]);
        if va <= 0.0 || vb <= 0.0 {
            0.0
        } else {
            (joint[(a, b)] - means[a] * means[b]) / (va * vb).sqrt()
        }
    });
    let eig = corr.symmetric_eigen();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut a = DMatrix::from_fn(p, q, |j, r| {
        let idx = order[r.min(p - 1)];
        eig.eigenvectors[(j, idx)] * eig.eigenvalues[idx].max(1e-3).sqrt()
    });

    if q > 1 {
        let top = a.rows(0, q).transpose();
        let qr = top.qr();
        a = &a * qr.q();
    }
    for r in 0..q {
        if a.column(r).sum() < 0.0 {
            a.column_mut(r).neg_mut();
        }
    }

    let mut intercepts = DVector::zeros(p);
    let mut matrix = DMatrix::zeros(p, q);
    for j in 0..p {
        let mut row: Vec<f64> = (0..q).map(|r| a[(j, r)]).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.9 {
            row.iter_mut().for_each(|v| *v *= 0.9 / norm);
        }
        let comm: f64 = row.iter().map(|v| v * v).sum();
        let scale = LOGIT_SCALE / (1.0 - comm).sqrt();
        let mut sq = 0.0;
        for r in 0..q {
            if !Loadings::is_masked(j, r) {
                matrix[(j, r)] = row[r] * scale;
                sq += matrix[(j, r)] * matrix[(j, r)];
            }
        }
        let pj = ((means[j] * n + 0.5) / (n + 1.0)).clamp(1e-4, 1.0 - 1e-4);
        let logit = (pj / (1.0 - pj)).ln();
        intercepts[j] = logit * (1.0 + std::f64::consts::PI * sq / 8.0).sqrt();
    }
    Loadings { intercepts, matrix }
}

/// One-group latent-trait fit with the factors fixed at `N(0, I)`.
pub fn latent_trait_start(
    data: &PatternTable,
    q: usize,
    grid: &TensorGrid,
    cfg: &FitConfig,
) -> Result<ModelParams> {
    let spec = ModelSpec::unbounded(data.p(), q, 1)?;
    let start = ModelParams {
        spec,
        loadings: heuristic_loadings(data, q),
        mixture: MixtureParams::standard(q),
    };
    run_gem(data, grid, start, cfg)
        .map(|r| r.params)
        .map_err(|e| Error::Initialization(format!("one-group pre-fit failed: {e}")))
}

/// Keeps the loadings of a one-group fit and draws a `k`-component mixture:
/// means from `N(0, I)`, covariances `0.5 I`, equal weights, then standardizes.
pub fn randomize_mixture(base: &ModelParams, k: usize, seed: u64) -> Result<ModelParams> {
    let q = base.spec.q;
    let spec = ModelSpec::unbounded(base.spec.p, q, k)?;
    if k == 1 {
        return Ok(ModelParams {
            spec,
            loadings: base.loadings.clone(),
            mixture: MixtureParams::standard(q),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = (0..k)
        .map(|_| DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng)))
        .collect();
    let mixture = MixtureParams {
        weights: DVector::from_element(k, 1.0 / k as f64),
        means,
        covariances: vec![DMatrix::identity(q, q) * 0.5; k],
    };
    standardize(&ModelParams {
        spec,
        loadings: base.loadings.clone(),
        mixture,
    })
}

/// Posterior factor means and covariances per distinct pattern under a fit.
#[derive(Debug, Clone)]
pub struct FactorSummary {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub counts: Vec<f64>,
}

/// Pools the components' conditional moments into `E[z | y]` and `Cov[z | y]`.
pub fn factor_summary(
    params: &ModelParams,
    data: &PatternTable,
    grid: &TensorGrid,
) -> Result<FactorSummary> {
    let es = e_step(params, data, grid)?;
    let q = params.spec.q;
    let mut means = Vec::with_capacity(data.n_patterns());
    let mut covariances = Vec::with_capacity(data.n_patterns());
    for h in 0..data.n_patterns() {
        let mut m = DVector::zeros(q);
        let mut s = DMatrix::zeros(q, q);
        for i in 0..params.spec.k {
            let r = es.responsibilities[(h, i)];
            m.axpy(r, &es.cond_mean[h][i], 1.0);
            s += &es.cond_second[h][i] * r;
        }
        s -= &m * m.transpose();
        means.push(m);
        covariances.push(s);
    }
    Ok(FactorSummary {
        means,
        covariances,
        counts: data.counts().iter().map(|&c| c as f64).collect(),
    })
}

fn nearest(z: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, m)| (c, (z - m).norm_squared()))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Count-weighted k-means of the factor scores with k-means++ seeding; each
/// component gets its cluster's share, mean, and scatter plus mean posterior
/// covariance. `None` when a cluster ends up empty.
fn cluster_scores(summary: &FactorSummary, k: usize, rng: &mut ChaCha8Rng) -> Option<MixtureParams> {
    let h = summary.means.len();
    if h < k {
        return None;
    }
    let mut centers = vec![summary.means[weighted_pick(&summary.counts, rng)?].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = (0..h)
            .map(|t| summary.counts[t] * nearest(&summary.means[t], &centers).1)
            .collect();
        centers.push(summary.means[weighted_pick(&d2, rng)?].clone());
    }
    let mut assign = vec![0usize; h];
    for _ in 0..LLOYD_ITERATIONS {
        for (t, a) in assign.iter_mut().enumerate() {
            *a = nearest(&summary.means[t], &centers).0;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let mass: f64 = (0..h).filter(|&t| assign[t] == c).map(|t| summary.counts[t]).sum();
            if mass == 0.0 {
                return None;
            }
            let mut m = DVector::zeros(center.len());
            for t in (0..h).filter(|&t| assign[t] == c) {
                m.axpy(summary.counts[t] / mass, &summary.means[t], 1.0);
            }
            *center = m;
        }
    }
    let n: f64 = summary.counts.iter().sum();
    let q = centers[0].len();
    let mut weights = DVector::zeros(k);
    let mut covariances = Vec::with_capacity(k);
    for (c, center) in centers.iter().enumerate() {
        let mass: f64 = (0..h).filter(|&t| assign[t] == c).map(|t| summary.counts[t]).sum();
        let mut s = DMatrix::zeros(q, q);
        for t in (0..h).filter(|&t| assign[t] == c) {
            let d = &summary.means[t] - center;
            s += (&d * d.transpose() + &summary.covariances[t]) * (summary.counts[t] / mass);
        }
        weights[c] = mass / n;
        covariances.push(linalg::floor_eigenvalues(&s, START_VARIANCE_FLOOR));
    }
    Some(MixtureParams {
        weights,
        means: centers,
        covariances,
    })
}

/// Keeps the loadings of a one-group fit and clusters its factor scores into
/// a `k`-component mixture, then standardizes.
pub fn clustered_mixture(
    base: &ModelParams,
    summary: &FactorSummary,
    k: usize,
    seed: u64,
) -> Result<ModelParams> {
    let spec = ModelSpec::unbounded(base.spec.p, base.spec.q, k)?;
    if k == 1 {
        return randomize_mixture(base, 1, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match cluster_scores(summary, k, &mut rng) {
        Some(mixture) => standardize(&ModelParams {
            spec,
            loadings: base.loadings.clone(),
            mixture,
        }),
        None => randomize_mixture(base, k, seed),
    }
}

/// Starting parameters for `spec`, deterministic given `cfg.seed`.
pub fn initialize(data: &PatternTable, spec: &ModelSpec, cfg: &FitConfig) -> Result<ModelParams> {
    if !spec.within_ledermann() {
        return Err(Error::invalid(format!(
            "q = {} exceeds the Ledermann bound for p = {}",
            spec.q, spec.p
        )));
    }
    let grid = crate::quadrature::tensor_grid(spec.q, cfg.quad_points)?;
    let base = latent_trait_start(data, spec.q, &grid, cfg)?;
    let summary = factor_summary(&base, data, &grid)?;
    clustered_mixture(&base, &summary, spec.k, cfg.seed)
}
