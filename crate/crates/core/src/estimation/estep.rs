//! E-step: component likelihoods by quadrature, component posteriors, and the
//! conditional latent moments, per distinct response pattern.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{log_logistic, ModelParams, PatternTable};
use crate::par;
use crate::quadrature::{self, TensorGrid};

/// `log Σ exp(v)`; `-∞` for an empty or all `-∞` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Quadrature nodes of one mixture component with per-node item log-probabilities.
#[derive(Debug, Clone)]
pub struct ComponentNodes {
    /// Grid mapped to `√2 L_i x + μ_i`.
    pub grid: TensorGrid,
    /// `log(normalizer · w_t)`.
    pub log_mass: Vec<f64>,
    /// `Σ_j log(1 − π_j(z_t))`.
    base: Vec<f64>,
    /// `log π_j(z_t) − log(1 − π_j(z_t))`, row-major `t × p`.
    diff: Vec<f64>,
    p: usize,
}

impl ComponentNodes {
    pub fn new(params: &ModelParams, grid: &TensorGrid, i: usize) -> Result<Self> {
        let mix = &params.mixture;
        let l = linalg::cholesky_lower(&mix.covariances[i])?;
        let tg = quadrature::transform_with_factor(grid, &mix.means[i], &l);
        let p = params.spec.p;
        let loadings = &params.loadings;
        let mut base = Vec::with_capacity(tg.len());
        let mut diff = Vec::with_capacity(tg.len() * p);
        let mut log_mass = Vec::with_capacity(tg.len());
        for (t, z) in tg.points().enumerate() {
            let mut b = 0.0;
            for j in 0..p {
                let eta = loadings.linear_predictor(j, z);
                let l0 = log_logistic(-eta);
                b += l0;
                // log σ(η) − log σ(−η) = η
                diff.push(eta);
            }
            base.push(b);
            log_mass.push(tg.mass(t).ln());
        }
        if !base.iter().all(|v| v.is_finite()) {
            return Err(Error::degenerate("non-finite item likelihood at a quadrature node"));
        }
        Ok(Self {
            grid: tg,
            log_mass,
            base,
            diff,
            p,
        })
    }

    /// `log f(y | z_t) + log mass_t` for every node.
    pub fn log_joint(&self, y: &[u8], out: &mut Vec<f64>) {
        out.clear();
        for t in 0..self.base.len() {
            let row = &self.diff[t * self.p..(t + 1) * self.p];
            let mut v = self.base[t] + self.log_mass[t];
            for (d, &yj) in row.iter().zip(y) {
                if yj == 1 {
                    v += d;
                }
            }
            out.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

pub fn component_nodes(params: &ModelParams, grid: &TensorGrid) -> Result<Vec<ComponentNodes>> {
    if grid.q() != params.spec.q {
        return Err(Error::invalid("quadrature grid dimension differs from q"));
    }
    (0..params.spec.k)
        .map(|i| ComponentNodes::new(params, grid, i))
        .collect()
}

fn check_pattern(params: &ModelParams, y: &[u8], i: usize) -> Result<()> {
    if y.len() != params.spec.p || y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("pattern must be a binary vector of length p"));
    }
    if i >= params.spec.k {
        return Err(Error::invalid(format!("component {i} out of range")));
    }
    Ok(())
}

/// `log f(y | s_i = 1)` by Gauss–Hermite quadrature over component `i`.
pub fn log_component_pattern_likelihood(
    params: &ModelParams,
    grid: &TensorGrid,
    y: &[u8],
    i: usize,
) -> Result<f64> {
    check_pattern(params, y, i)?;
    let nodes = ComponentNodes::new(params, grid, i)?;
    let mut buf = Vec::new();
    nodes.log_joint(y, &mut buf);
    Ok(log_sum_exp(&buf))
}

/// `f(y | s_i = 1)`.
pub fn component_pattern_likelihood(
    params: &ModelParams,
    grid: &TensorGrid,
    y: &[u8],
    i: usize,
) -> Result<f64> {
    log_component_pattern_likelihood(params, grid, y, i).map(f64::exp)
}

/// Posterior component probabilities from log weights and log likelihoods.
pub fn posteriors_from_logs(log_weights: &[f64], log_lik: &[f64]) -> Result<(Vec<f64>, f64)> {
    let joint: Vec<f64> = log_weights.iter().zip(log_lik).map(|(a, b)| a + b).collect();
    let total = log_sum_exp(&joint);
    if !total.is_finite() {
        return Err(Error::degenerate("pattern has zero likelihood under every component"));
    }
    Ok((joint.iter().map(|v| (v - total).exp()).collect(), total))
}

/// `τ_i f(y | s_i) / Σ_l τ_l f(y | s_l)`.
pub fn component_posteriors(weights: &[f64], component_lik: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != component_lik.len() || weights.is_empty() {
        return Err(Error::invalid("weights and likelihoods differ in length"));
    }
    if component_lik.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("likelihoods must be nonnegative"));
    }
    let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let ll: Vec<f64> = component_lik.iter().map(|v| v.ln()).collect();
    posteriors_from_logs(&lw, &ll).map(|(r, _)| r)
}

fn moments_from_log_joint(nodes: &ComponentNodes, log_joint: &[f64]) -> (f64, Vec<f64>, DVector<f64>, DMatrix<f64>) {
    let q = nodes.grid.q();
    let log_lik = log_sum_exp(log_joint);
    let mut mean = DVector::zeros(q);
    let mut second = DMatrix::zeros(q, q);
    let mut post = Vec::with_capacity(log_joint.len());
    for (t, &lj) in log_joint.iter().enumerate() {
        let a = (lj - log_lik).exp();
        post.push(a);
        let z = nodes.grid.point(t);
        for r in 0..q {
            mean[r] += a * z[r];
            for c in 0..=r {
                second[(r, c)] += a * z[r] * z[c];
            }
        }
    }
    for r in 0..q {
        for c in 0..r {
            second[(c, r)] = second[(r, c)];
        }
    }
    (log_lik, post, mean, second)
}

/// `(E[z | y, s_i = 1], E[z zᵀ | y, s_i = 1])` by quadrature.
pub fn conditional_latent_moments(
    params: &ModelParams,
    grid: &TensorGrid,
    y: &[u8],
    i: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_pattern(params, y, i)?;
    let nodes = ComponentNodes::new(params, grid, i)?;
    let mut buf = Vec::new();
    nodes.log_joint(y, &mut buf);
    let (log_lik, _, mean, second) = moments_from_log_joint(&nodes, &buf);
    if !log_lik.is_finite() {
        return Err(Error::degenerate("pattern has zero likelihood under the component"));
    }
    Ok((mean, second))
}

/// E-step output for every distinct pattern.
#[derive(Debug, Clone)]
pub struct EStepResult {
    /// `f(s_i = 1 | y_h)`, patterns × components.
    pub responsibilities: DMatrix<f64>,
    /// `f(y_h | s_i = 1)`.
    pub component_lik: DMatrix<f64>,
    pub log_component_lik: DMatrix<f64>,
    /// `cond_mean[h][i] = E[z | y_h, s_i = 1]`.
    pub cond_mean: Vec<Vec<DVector<f64>>>,
    /// `cond_second[h][i] = E[z zᵀ | y_h, s_i = 1]`.
    pub cond_second: Vec<Vec<DMatrix<f64>>>,
    /// `log f(y_h)` per pattern.
    pub log_marginal: Vec<f64>,
    /// `Σ_h c_h log f(y_h)`.
    pub loglik: f64,
    /// Transformed quadrature nodes per component.
    pub nodes: Vec<TensorGrid>,
    /// Expected counts at each node: `node_mass[i][t] = Σ_h c_h r_hi a_hit`,
    /// where `a_hit` is the posterior weight of node `t` given `y_h` and component `i`.
    pub node_mass: Vec<Vec<f64>>,
    /// Expected counts of `y_j = 1` at each node, row-major `t × p` per component.
    pub node_positive: Vec<Vec<f64>>,
}

struct PatternPart {
    log_lik: Vec<f64>,
    post: Vec<Vec<f64>>,
    mean: Vec<DVector<f64>>,
    second: Vec<DMatrix<f64>>,
}

/// Runs the E-step at `params` over all patterns of `data`.
pub fn e_step(params: &ModelParams, data: &PatternTable, grid: &TensorGrid) -> Result<EStepResult> {
    let spec = params.spec;
    if data.p() != spec.p {
        return Err(Error::invalid(format!(
            "data has p = {} but the model has p = {}",
            data.p(),
            spec.p
        )));
    }
    let comps = component_nodes(params, grid)?;
    let k = spec.k;
    let p = spec.p;
    let n_pat = data.n_patterns();

    let parts: Vec<PatternPart> = par::map_range(n_pat, |h| {
        let y = data.pattern(h);
        let mut buf = Vec::with_capacity(grid.len());
        let mut part = PatternPart {
            log_lik: Vec::with_capacity(k),
            post: Vec::with_capacity(k),
            mean: Vec::with_capacity(k),
            second: Vec::with_capacity(k),
        };
        for c in &comps {
            c.log_joint(y, &mut buf);
            let (ll, post, mean, second) = moments_from_log_joint(c, &buf);
            part.log_lik.push(ll);
            part.post.push(post);
            part.mean.push(mean);
            part.second.push(second);
        }
        part
    });

    let log_w: Vec<f64> = params.mixture.weights.iter().map(|w| w.ln()).collect();
    let mut resp = DMatrix::zeros(n_pat, k);
    let mut comp_lik = DMatrix::zeros(n_pat, k);
    let mut log_comp_lik = DMatrix::zeros(n_pat, k);
    let mut log_marginal = Vec::with_capacity(n_pat);
    let mut loglik = 0.0;
    let g = grid.len();
    let mut node_mass = vec![vec![0.0; g]; k];
    let mut node_positive = vec![vec![0.0; g * p]; k];
    let mut cond_mean = Vec::with_capacity(n_pat);
    let mut cond_second = Vec::with_capacity(n_pat);

    for (h, part) in parts.into_iter().enumerate() {
        let (r, lm) = posteriors_from_logs(&log_w, &part.log_lik)?;
        let c = data.count(h) as f64;
        let y = data.pattern(h);
        for i in 0..k {
            resp[(h, i)] = r[i];
            log_comp_lik[(h, i)] = part.log_lik[i];
            comp_lik[(h, i)] = part.log_lik[i].exp();
            let scale = c * r[i];
            if scale == 0.0 {
                continue;
            }
            let mass = &mut node_mass[i];
            let pos = &mut node_positive[i];
            for (t, &a) in part.post[i].iter().enumerate() {
                let m = scale * a;
                mass[t] += m;
                let row = &mut pos[t * p..(t + 1) * p];
                for (slot, &yj) in row.iter_mut().zip(y) {
                    if yj == 1 {
                        *slot += m;
                    }
                }
            }
        }
        log_marginal.push(lm);
        loglik += c * lm;
        cond_mean.push(part.mean);
        cond_second.push(part.second);
    }

    Ok(EStepResult {
        responsibilities: resp,
        component_lik: comp_lik,
        log_component_lik: log_comp_lik,
        cond_mean,
        cond_second,
        log_marginal,
        loglik,
        nodes: comps.into_iter().map(|c| c.grid).collect(),
        node_mass,
        node_positive,
    })
}

/// Observed-data log-likelihood only.
pub fn log_likelihood(params: &ModelParams, data: &PatternTable, grid: &TensorGrid) -> Result<f64> {
    e_step(params, data, grid).map(|e| e.loglik)
}
