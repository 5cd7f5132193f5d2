//! M-step updates: damped Newton on each item's expected complete-data
//! log-likelihood, and closed-form mixture moment and weight updates.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{log_logistic, logistic, Loadings, MixtureParams, ModelParams};

use super::estep::EStepResult;
use super::FitConfig;

/// Components with less total responsibility than this are treated as collapsed.
pub const COLLAPSE_MASS: f64 = 1e-8;

/// Expected complete-data log-likelihood of one item as a function of its free
/// parameters `(λ_j0, λ_j1, …, λ_jf)`, with `f = min(j + 1, q)`.
///
/// The posterior weights of the E-step are aggregated into expected counts at
/// each quadrature node, so the objective is a weighted logistic log-likelihood
/// over `k · T^q` node points.
#[derive(Debug, Clone)]
pub struct ItemObjective {
    dim: usize,
    /// `(1, z_1, …, z_f)` per node, row-major.
    design: Vec<f64>,
    mass: Vec<f64>,
    positive: Vec<f64>,
}

impl ItemObjective {
    pub fn new(estep: &EStepResult, j: usize, q: usize) -> Self {
        let free = (j + 1).min(q);
        let dim = free + 1;
        let p = estep.node_positive[0].len() / estep.node_mass[0].len().max(1);
        let mut design = Vec::new();
        let mut mass = Vec::new();
        let mut positive = Vec::new();
        for (i, grid) in estep.nodes.iter().enumerate() {
            for (t, z) in grid.points().enumerate() {
                let w = estep.node_mass[i][t];
                if w == 0.0 {
                    continue;
                }
                design.push(1.0);
                design.extend_from_slice(&z[..free]);
                mass.push(w);
                positive.push(estep.node_positive[i][t * p + j]);
            }
        }
        Self {
            dim,
            design,
            mass,
            positive,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn eta(&self, n: usize, theta: &[f64]) -> f64 {
        let row = &self.design[n * self.dim..(n + 1) * self.dim];
        row.iter().zip(theta).map(|(a, b)| a * b).sum()
    }

    /// `Σ_t [W1_t η_t − W_t log(1 + e^{η_t})]`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        (0..self.mass.len())
            .map(|n| {
                let eta = self.eta(n, theta);
                self.positive[n] * eta + self.mass[n] * log_logistic(-eta)
            })
            .sum()
    }

    /// Expected score `Σ_t (W1_t − W_t π(η_t)) z̃_t`.
    pub fn score(&self, theta: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim);
        for n in 0..self.mass.len() {
            let eta = self.eta(n, theta);
            let resid = self.positive[n] - self.mass[n] * logistic(eta);
            let row = &self.design[n * self.dim..(n + 1) * self.dim];
            for (gi, &x) in g.iter_mut().zip(row) {
                *gi += resid * x;
            }
        }
        g
    }

    /// Negative Hessian `Σ_t W_t π(1 − π) z̃_t z̃_tᵀ`.
    pub fn information(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::zeros(d, d);
        for n in 0..self.mass.len() {
            let pi = logistic(self.eta(n, theta));
            let w = self.mass[n] * pi * (1.0 - pi);
            let row = &self.design[n * d..(n + 1) * d];
            for a in 0..d {
                for b in 0..=a {
                    h[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        h
    }
}

/// Free parameters of item `j` as a flat vector.
pub fn item_parameters(loadings: &Loadings, j: usize) -> Vec<f64> {
    let free = loadings.free_columns(j);
    std::iter::once(loadings.intercepts[j])
        .chain((0..free).map(|r| loadings.matrix[(j, r)]))
        .collect()
}

fn set_item_parameters(loadings: &mut Loadings, j: usize, theta: &[f64]) {
    loadings.intercepts[j] = theta[0];
    for (r, &v) in theta[1..].iter().enumerate() {
        loadings.matrix[(j, r)] = v;
    }
}

#[derive(Debug, Clone)]
pub struct LoadingUpdate {
    pub loadings: Loadings,
    /// Newton steps that fell back to gradient ascent.
    pub gradient_fallbacks: usize,
}

/// Up to `newton_max` damped Newton steps per item; masked entries stay zero.
///
/// Each step is halved until the item objective does not decrease. A singular
/// information matrix switches that step to gradient ascent with the same
/// line search.
pub fn update_loadings(
    params: &ModelParams,
    estep: &EStepResult,
    cfg: &FitConfig,
) -> LoadingUpdate {
    let q = params.spec.q;
    let results: Vec<(Vec<f64>, usize)> = crate::par::map_range(params.spec.p, |j| {
        let obj = ItemObjective::new(estep, j, q);
        let theta = item_parameters(&params.loadings, j);
        newton_ascent(&obj, theta, cfg.newton_max)
    });
    let mut loadings = params.loadings.clone();
    let mut fallbacks = 0;
    for (j, (theta, fb)) in results.into_iter().enumerate() {
        set_item_parameters(&mut loadings, j, &theta);
        fallbacks += fb;
    }
    loadings.enforce_mask();
    LoadingUpdate {
        loadings,
        gradient_fallbacks: fallbacks,
    }
}

const MAX_HALVINGS: usize = 40;

fn newton_ascent(obj: &ItemObjective, mut theta: Vec<f64>, max_steps: usize) -> (Vec<f64>, usize) {
    let mut f0 = obj.value(&theta);
    let mut fallbacks = 0;
    for _ in 0..max_steps {
        let g = obj.score(&theta);
        if g.amax() == 0.0 {
            break;
        }
        let info = obj.information(&theta);
        let (dir, newton) = match info.clone().cholesky() {
            Some(c) => (c.solve(&g), true),
            None => {
                fallbacks += 1;
                let scale = info.diagonal().amax().max(1.0);
                (&g / scale, false)
            }
        };
        if newton && g.dot(&dir) < 1e-20 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let f = obj.value(&cand);
            if f.is_finite() && f >= f0 {
                accepted = f > f0 || cand != theta;
                theta = cand;
                f0 = f;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    (theta, fallbacks)
}

/// Count-weighted moment and weight updates with eigenvalue floor `ridge`.
pub fn update_mixture(
    counts: &[usize],
    estep: &EStepResult,
    ridge: f64,
) -> Result<MixtureParams> {
    let n_pat = estep.responsibilities.nrows();
    let k = estep.responsibilities.ncols();
    if counts.len() != n_pat {
        return Err(Error::invalid("counts and E-step patterns differ in length"));
    }
    if n_pat == 0 {
        return Err(Error::invalid("no patterns"));
    }
    let q = estep.cond_mean[0][0].len();
    let mut mass = vec![0.0; k];
    let mut means = vec![DVector::zeros(q); k];
    let mut seconds = vec![DMatrix::zeros(q, q); k];
    for h in 0..n_pat {
        let c = counts[h] as f64;
        for i in 0..k {
            let w = c * estep.responsibilities[(h, i)];
            mass[i] += w;
            means[i].axpy(w, &estep.cond_mean[h][i], 1.0);
            seconds[i] += &estep.cond_second[h][i] * w;
        }
    }
    for (i, &m) in mass.iter().enumerate() {
        if !(m >= COLLAPSE_MASS) {
            return Err(Error::ComponentCollapse { component: i, mass: m });
        }
    }
    let total: f64 = mass.iter().sum();
    let mut covs = Vec::with_capacity(k);
    for i in 0..k {
        means[i] /= mass[i];
        let mut s = &seconds[i] / mass[i] - &means[i] * means[i].transpose();
        linalg::symmetrize(&mut s);
        covs.push(linalg::floor_eigenvalues(&s, ridge));
    }
    let weights = DVector::from_iterator(k, mass.iter().map(|m| m / total));
    Ok(MixtureParams {
        weights,
        means,
        covariances: covs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::estep::e_step;
    use crate::model::{ModelSpec, PatternTable};
    use crate::quadrature::tensor_grid;

    #[test]
    fn balanced_item_keeps_zero_intercept() {
        let spec = ModelSpec::unbounded(1, 1, 1).unwrap();
        let params =
            ModelParams::new(spec, Loadings::zeros(1, 1), MixtureParams::standard(1)).unwrap();
        let data = PatternTable::new(1, vec![vec![0], vec![1]], vec![50, 50]).unwrap();
        let grid = tensor_grid(1, 8).unwrap();
        let es = e_step(&params, &data, &grid).unwrap();
        let up = update_loadings(&params, &es, &FitConfig::default());
        assert!(up.loadings.intercepts[0].abs() < 1e-12);
        assert!(up.loadings.matrix[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn masked_entries_stay_zero() {
        let spec = ModelSpec::unbounded(3, 2, 1).unwrap();
        let loadings = Loadings::new(
            DVector::from_row_slice(&[0.1, -0.2, 0.3]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 0.8, -0.4, 1.2]),
        )
        .unwrap();
        let params = ModelParams::new(spec, loadings, MixtureParams::standard(2)).unwrap();
        let rows: Vec<Vec<u8>> = (0..40).map(|i| vec![(i % 2) as u8, (i % 3 == 0) as u8, (i % 5 < 2) as u8]).collect();
        let data = PatternTable::from_rows(3, &rows).unwrap();
        let es = e_step(&params, &data, &tensor_grid(2, 6).unwrap()).unwrap();
        let up = update_loadings(&params, &es, &FitConfig::default());
        assert_eq!(up.loadings.matrix[(0, 1)], 0.0);
    }

    #[test]
    fn newton_does_not_decrease_item_objective() {
        let spec = ModelSpec::unbounded(3, 1, 1).unwrap();
        let loadings = Loadings::new(
            DVector::from_row_slice(&[2.0, -1.0, 0.0]),
            DMatrix::from_row_slice(3, 1, &[-0.5, 3.0, 0.1]),
        )
        .unwrap();
        let params = ModelParams::new(spec, loadings, MixtureParams::standard(1)).unwrap();
        let data = PatternTable::new(
            3,
            vec![vec![0, 0, 0], vec![1, 1, 1], vec![1, 0, 1], vec![0, 1, 0]],
            vec![10, 20, 5, 7],
        )
        .unwrap();
        let es = e_step(&params, &data, &tensor_grid(1, 8).unwrap()).unwrap();
        let cfg = FitConfig::default();
        let up = update_loadings(&params, &es, &cfg);
        for j in 0..3 {
            let obj = ItemObjective::new(&es, j, 1);
            let before = obj.value(&item_parameters(&params.loadings, j));
            let after = obj.value(&item_parameters(&up.loadings, j));
            assert!(after >= before);
        }
    }

    #[test]
    fn single_pattern_mean_is_its_conditional_mean() {
        let q = 1;
        let es = EStepResult {
            responsibilities: DMatrix::from_element(1, 1, 1.0),
            component_lik: DMatrix::from_element(1, 1, 0.5),
            log_component_lik: DMatrix::from_element(1, 1, 0.5f64.ln()),
            cond_mean: vec![vec![DVector::from_element(q, 0.7)]],
            cond_second: vec![vec![DMatrix::from_element(q, q, 0.7 * 0.7 + 0.2)]],
            log_marginal: vec![0.5f64.ln()],
            loglik: 0.0,
            nodes: vec![],
            node_mass: vec![],
            node_positive: vec![],
        };
        let mix = update_mixture(&[12], &es, 1e-6).unwrap();
        assert!((mix.means[0][0] - 0.7).abs() < 1e-15);
        assert!((mix.covariances[0][(0, 0)] - 0.2).abs() < 1e-12);
        assert_eq!(mix.weights[0], 1.0);
    }

    #[test]
    fn equal_patterns_average_means_and_collapse_is_reported() {
        let es = EStepResult {
            responsibilities: DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]),
            component_lik: DMatrix::zeros(2, 2),
            log_component_lik: DMatrix::zeros(2, 2),
            cond_mean: vec![
                vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
                vec![DVector::from_element(1, 3.0), DVector::from_element(1, -2.0)],
            ],
            cond_second: vec![
                vec![DMatrix::from_element(1, 1, 2.0), DMatrix::from_element(1, 1, 2.0)],
                vec![DMatrix::from_element(1, 1, 10.0), DMatrix::from_element(1, 1, 5.0)],
            ],
            log_marginal: vec![0.0, 0.0],
            loglik: 0.0,
            nodes: vec![],
            node_mass: vec![],
            node_positive: vec![],
        };
        let mix = update_mixture(&[4, 4], &es, 1e-6).unwrap();
        assert!((mix.means[0][0] - 2.0).abs() < 1e-15);
        assert!((mix.means[1][0] + 1.5).abs() < 1e-15);
        assert!((mix.weights[0] - 0.5).abs() < 1e-15);

        let mut collapsed = es.clone();
        collapsed.responsibilities = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            update_mixture(&[4, 4], &collapsed, 1e-6),
            Err(Error::ComponentCollapse { component: 1, .. })
        ));
    }
}
