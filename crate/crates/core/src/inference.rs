//! Post-fit analysis: MAP classification, factor scores, cluster-wise
//! weighted loadings and bootstrap standard errors.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{e_step, fit_from, posterior_mean, FitConfig};
use crate::model::{Loadings, MixtureParams, ModelParams, ModelSpec, PatternTable};
use crate::par;
use crate::quadrature::TensorGrid;

const BOOTSTRAP_STREAM: u64 = 0x424f_4f54;

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn classify_map(posteriors: &DMatrix<f64>) -> Vec<usize> {
    posteriors
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Posterior mean `E[z | y]` for every distinct pattern of `data`.
pub fn factor_scores(
    params: &ModelParams,
    data: &PatternTable,
    grid: &TensorGrid,
) -> Result<Vec<DVector<f64>>> {
    let es = e_step(params, data, grid)?;
    Ok((0..data.n_patterns()).map(|h| posterior_mean(&es, h)).collect())
}

/// `Λ μ_i` for each component.
pub fn weighted_loadings(loadings: &Loadings, mixture: &MixtureParams) -> Vec<DVector<f64>> {
    mixture.means.iter().map(|mu| &loadings.matrix * mu).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub b: usize,
    pub se_intercepts: Vec<f64>,
    /// Row-major `p × q`.
    pub se_loadings: Vec<Vec<f64>>,
    pub se_weights: Vec<f64>,
    pub se_means: Vec<Vec<f64>>,
    pub se_covariances: Vec<Vec<Vec<f64>>>,
    pub n_failed: usize,
    pub failures: Vec<String>,
    /// Component order applied to each replicate (`None` for failed refits):
    /// aligned component `i` is replicate component `perm[i]`.
    pub alignment_permutations: Vec<Option<Vec<usize>>>,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for mut p in permutations(k - 1) {
        for pos in 0..=p.len() {
            p.insert(pos, k - 1);
            out.push(p.clone());
            p.remove(pos);
        }
    }
    out.sort();
    out
}

/// Permutation minimizing `Σ_i ‖μ_{perm[i]}^b − μ_i‖` (lexicographically first on ties).
pub fn align_components(reference: &MixtureParams, other: &MixtureParams) -> Vec<usize> {
    let k = reference.k();
    let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
    for perm in permutations(k) {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| (&other.means[j] - &reference.means[i]).norm())
            .sum();
        if cost < best.0 {
            best = (cost, perm);
        }
    }
    best.1
}

fn resample(data: &PatternTable, seed: u64) -> Result<PatternTable> {
    let mut cumulative = Vec::with_capacity(data.n_patterns());
    let mut acc = 0;
    for &c in data.counts() {
        acc += c;
        cumulative.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; data.n_patterns()];
    for _ in 0..data.n() {
        let u = rng.random_range(0..data.n());
        counts[cumulative.partition_point(|&c| c <= u)] += 1;
    }
    let (patterns, counts): (Vec<_>, Vec<_>) = data
        .patterns()
        .iter()
        .zip(counts)
        .filter(|(_, c)| *c > 0)
        .map(|(p, c)| (p.clone(), c))
        .unzip();
    PatternTable::new(data.p(), patterns, counts)
}

/// Sample standard deviation of each coordinate, computed on values shifted
/// by the first row so identical rows give exactly zero.
fn column_sd(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    let first = &rows[0];
    (0..first.len())
        .map(|c| {
            let d: Vec<f64> = rows.iter().map(|r| r[c] - first[c]).collect();
            let mean = d.iter().sum::<f64>() / m;
            (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect()
}

fn flatten(params: &ModelParams) -> Vec<f64> {
    let l = &params.loadings;
    let mix = &params.mixture;
    let mut v: Vec<f64> = l.intercepts.iter().copied().collect();
    for j in 0..l.p() {
        v.extend((0..l.q()).map(|r| l.matrix[(j, r)]));
    }
    v.extend(mix.weights.iter());
    for m in &mix.means {
        v.extend(m.iter());
    }
    for s in &mix.covariances {
        for a in 0..s.nrows() {
            v.extend((0..s.ncols()).map(|b| s[(a, b)]));
        }
    }
    v
}

/// Nonparametric bootstrap: `b` observation-level resamples, each refitted
/// from `point_estimate` and aligned to its components.
pub fn bootstrap_standard_errors(
    data: &PatternTable,
    spec: &ModelSpec,
    cfg: &FitConfig,
    b: usize,
    point_estimate: &ModelParams,
) -> Result<BootstrapReport> {
    if b < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 replicates"));
    }
    if point_estimate.spec != *spec {
        return Err(Error::invalid("point estimate does not match the model spec"));
    }
    if data.n() == 0 {
        return Err(Error::invalid("no observations"));
    }
    cfg.validate()?;

    let outcomes = par::map_range(b, |r| -> Result<(Vec<usize>, Vec<f64>)> {
        let sample = resample(data, par::derive_seed(cfg.seed, BOOTSTRAP_STREAM, r as u64))?;
        let fitted = fit_from(&sample, point_estimate, cfg)?.params;
        let perm = align_components(&point_estimate.mixture, &fitted.mixture);
        let aligned = ModelParams {
            mixture: fitted.mixture.permuted(&perm),
            ..fitted
        };
        Ok((perm, flatten(&aligned)))
    });

    let mut rows = Vec::new();
    let mut perms = Vec::with_capacity(b);
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok((perm, v)) => {
                perms.push(Some(perm));
                rows.push(v);
            }
            Err(e) => {
                perms.push(None);
                failures.push(format!("replicate {r}: {e}"));
            }
        }
    }
    if 2 * failures.len() > b {
        return Err(Error::Bootstrap(format!(
            "{} of {b} refits failed: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    if rows.len() < 2 {
        return Err(Error::Bootstrap("fewer than 2 successful refits".into()));
    }

    let sd = column_sd(&rows);
    let (p, q, k) = (spec.p, spec.q, spec.k);
    let mut it = sd.into_iter();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let se_intercepts = take(p);
    let se_loadings = (0..p).map(|_| take(q)).collect();
    let se_weights = take(k);
    let se_means = (0..k).map(|_| take(q)).collect();
    let se_covariances = (0..k).map(|_| (0..q).map(|_| take(q)).collect()).collect();
    Ok(BootstrapReport {
        b,
        se_intercepts,
        se_loadings,
        se_weights,
        se_means,
        se_covariances,
        n_failed: failures.len(),
        failures,
        alignment_permutations: perms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_examples() {
        let post = DMatrix::from_row_slice(3, 2, &[0.7, 0.3, 0.5, 0.5, 0.2, 0.8]);
        assert_eq!(classify_map(&post), vec![0, 0, 1]);
    }

    #[test]
    fn map_is_invariant_under_monotone_transform() {
        let post = DMatrix::from_row_slice(2, 3, &[0.2, 0.5, 0.3, 0.4, 0.4, 0.2]);
        let t = post.map(|v: f64| (3.0 * v).exp() - 1.0);
        assert_eq!(classify_map(&post), classify_map(&t));
    }

    #[test]
    fn weighted_loading_examples() {
        let l = Loadings::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let mix = MixtureParams {
            weights: DVector::from_row_slice(&[0.5, 0.5]),
            means: vec![DVector::from_row_slice(&[2.0, -3.0]), DVector::zeros(2)],
            covariances: vec![DMatrix::identity(2, 2); 2],
        };
        let w = weighted_loadings(&l, &mix);
        assert_eq!(w[0].as_slice(), &[2.0, -3.0]);
        assert_eq!(w[1].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn permutations_of_three() {
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[0], vec![0, 1, 2]);
    }

    #[test]
    fn alignment_recovers_swap() {
        let a = MixtureParams {
            weights: DVector::from_row_slice(&[0.5, 0.5]),
            means: vec![DVector::from_element(1, -1.0), DVector::from_element(1, 1.0)],
            covariances: vec![DMatrix::identity(1, 1); 2],
        };
        let b = a.permuted(&[1, 0]);
        let perm = align_components(&a, &b);
        assert_eq!(perm, vec![1, 0]);
        assert_eq!(b.permuted(&perm), a);
    }

    #[test]
    fn resample_preserves_n() {
        let t = PatternTable::new(2, vec![vec![0, 0], vec![1, 1]], vec![3, 7]).unwrap();
        let r = resample(&t, 5).unwrap();
        assert_eq!(r.n(), 10);
        assert_eq!(resample(&t, 5).unwrap(), r);
    }
}
