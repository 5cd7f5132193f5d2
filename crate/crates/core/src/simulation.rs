//! Monte-Carlo designs, sampling from the model, misclassification scoring,
//! and replicated selection studies.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit, standardize, FitConfig, FitResult};
use crate::inference::classify_map;
use crate::linalg;
use crate::model::{
    ModelSpec, PatternTable, Loadings, MixtureParams, ModelParams, logistic,
};
use crate::par;
use crate::selection::{run_selection, SelectionCriterion, SelectionOptions, SelectionTrace};

const REPLICATE_STREAM: u64 = 0x5245_504c;

/// Largest `k` accepted by the exhaustive permutation search.
pub const MAX_PERMUTATION_K: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignOptions {
    pub p: usize,
    pub n: usize,
    pub n_reps: usize,
    /// Distance scale of the component means before standardization.
    pub separation: f64,
    /// Within-component variance before standardization.
    pub within_variance: f64,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            p: 10,
            n: 300,
            n_reps: 20,
            separation: 1.5,
            within_variance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub spec: ModelSpec,
    pub true_params: ModelParams,
    pub n: usize,
    pub n_reps: usize,
    pub seed: u64,
}

/// Block of the factor that item `j` loads on strongly.
fn item_block(j: usize, p: usize, q: usize) -> usize {
    (j / (p / q).max(1)).min(q - 1)
}

fn mixture_weights(k: usize) -> DVector<f64> {
    const BASE: [f64; 3] = [0.3, 0.3, 0.4];
    if k > BASE.len() {
        return DVector::from_element(k, 1.0 / k as f64);
    }
    let w = DVector::from_row_slice(&BASE[..k]);
    let s = w.sum();
    w / s
}

fn mean_directions(q: usize, k: usize) -> Vec<DVector<f64>> {
    if k == 1 {
        return vec![DVector::zeros(q)];
    }
    if q == 1 {
        return (0..k)
            .map(|i| DVector::from_element(1, -1.0 + 2.0 * i as f64 / (k - 1) as f64))
            .collect();
    }
    (0..k)
        .map(|i| {
            let theta = 2.0 * PI * i as f64 / k as f64 + PI / 4.0;
            DVector::from_fn(q, |d, _| match d {
                0 => theta.cos(),
                1 => theta.sin(),
                _ => (theta + d as f64).cos(),
            })
        })
        .collect()
}

/// Design with the default options (`p = 10`, `n = 300`, 20 replicates).
pub fn generate_design(q: usize, k: usize, seed: u64) -> Result<SimDesign> {
    generate_design_with(q, k, seed, &DesignOptions::default())
}

/// Intercepts `U[−3, 3]`; items in `q` contiguous blocks with on-block
/// loadings `U[2, 4]` and off-block `U[0, 0.5]`; weights `(0.3, 0.3, 0.4)`
/// truncated to `k`; separated component means; mixture standardized.
pub fn generate_design_with(
    q: usize,
    k: usize,
    seed: u64,
    opts: &DesignOptions,
) -> Result<SimDesign> {
    let spec = ModelSpec::new(opts.p, q, k)?;
    if opts.p < q {
        return Err(Error::invalid("need at least one item per factor"));
    }
    if !(opts.separation >= 0.0) || !(opts.within_variance > 0.0) {
        return Err(Error::invalid("separation must be nonnegative and variance positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let icpt = Uniform::new_inclusive(-3.0, 3.0).expect("valid range");
    let strong = Uniform::new_inclusive(2.0, 4.0).expect("valid range");
    let weak = Uniform::new_inclusive(0.0, 0.5).expect("valid range");

    let mut loadings = Loadings::zeros(opts.p, q);
    for j in 0..opts.p {
        loadings.intercepts[j] = icpt.sample(&mut rng);
        let b = item_block(j, opts.p, q);
        for r in 0..q {
            let v = if r == b { strong.sample(&mut rng) } else { weak.sample(&mut rng) };
            if !Loadings::is_masked(j, r) {
                loadings.matrix[(j, r)] = v;
            }
        }
    }

    let raw = MixtureParams {
        weights: mixture_weights(k),
        means: mean_directions(q, k)
            .into_iter()
            .map(|m| m * opts.separation)
            .collect(),
        covariances: vec![DMatrix::identity(q, q) * opts.within_variance; k],
    };
    let mixture = standardize(&ModelParams {
        spec,
        loadings: Loadings::zeros(opts.p, q),
        mixture: raw,
    })?
    .mixture;

    Ok(SimDesign {
        spec,
        true_params: ModelParams::new(spec, loadings, mixture)?,
        n: opts.n,
        n_reps: opts.n_reps,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledData {
    pub table: PatternTable,
    /// Component of each observation, 0-based.
    pub labels: Vec<usize>,
    /// `n × q` latent draws.
    pub latents: DMatrix<f64>,
    /// Row of `table` holding each observation's pattern.
    pub pattern_index: Vec<usize>,
}

/// Draws `n` observations from the generative hierarchy
/// `s ~ τ`, `z | s ~ N(μ_s, Σ_s)`, `y_j | z ~ Bernoulli(π_j(z))`.
pub fn sample_responses(params: &ModelParams, n: usize, seed: u64) -> Result<SampledData> {
    let mix = &params.mixture;
    let (p, q, k) = (params.spec.p, params.spec.q, mix.k());
    let factors = mix
        .covariances
        .iter()
        .map(linalg::cholesky_lower)
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut latents = DMatrix::zeros(n, q);
    let mut rows = Vec::with_capacity(n);
    for obs in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut s = k - 1;
        for i in 0..k {
            acc += mix.weights[i];
            if u < acc {
                s = i;
                break;
            }
        }
        let e = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let z = &mix.means[s] + &factors[s] * e;
        let row: Vec<u8> = (0..p)
            .map(|j| {
                let pi = logistic(params.loadings.linear_predictor(j, z.as_slice()));
                u8::from(rng.random::<f64>() < pi)
            })
            .collect();
        latents.row_mut(obs).copy_from(&z.transpose());
        labels.push(s);
        rows.push(row);
    }
    let table = if n == 0 {
        PatternTable::new(p, Vec::new(), Vec::new())?
    } else {
        PatternTable::from_rows(p, &rows)?
    };
    let pattern_index = rows
        .iter()
        .map(|r| table.position(r).expect("row is in its own table"))
        .collect();
    Ok(SampledData {
        table,
        labels,
        latents,
        pattern_index,
    })
}

fn for_each_permutation(k: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..k).collect();
    let mut c = vec![0usize; k];
    f(&perm);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            f(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Smallest mismatch fraction over all relabelings of `estimated`. Labels are
/// 0-based and must be below `k`.
pub fn misclassification_error(truth: &[usize], estimated: &[usize], k: usize) -> Result<f64> {
    if truth.len() != estimated.len() {
        return Err(Error::invalid("label vectors differ in length"));
    }
    if k > MAX_PERMUTATION_K {
        return Err(Error::ResourceLimit(format!(
            "permutation search over k = {k} > {MAX_PERMUTATION_K} components"
        )));
    }
    if k == 0 || truth.iter().chain(estimated).any(|&l| l >= k) {
        return Err(Error::invalid("labels must lie in 0..k"));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let mut table = vec![0usize; k * k];
    for (&t, &e) in truth.iter().zip(estimated) {
        table[t * k + e] += 1;
    }
    let mut best = 0;
    for_each_permutation(k, |perm| {
        let hits: usize = (0..k).map(|t| table[t * k + perm[t]]).sum();
        best = best.max(hits);
    });
    Ok(1.0 - best as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    /// Defaults to one more than the design's `q`, capped by the Ledermann bound.
    pub q_max: Option<usize>,
    pub k_max: usize,
    pub selection: SelectionOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            q_max: None,
            k_max: 4,
            selection: SelectionOptions::default(),
        }
    }
}

/// Intercepts and row-major `p × q` loadings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub intercepts: Vec<f64>,
    pub loadings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionRates {
    pub aic: Vec<f64>,
    pub bic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub n_reps: usize,
    pub n_succeeded: usize,
    pub n_failed: usize,
    pub failures: Vec<String>,
    pub q_max: usize,
    pub k_max: usize,
    /// Fraction of successful replicates in which some `k` passed the residual
    /// screen at each `q` (index `q − 1`).
    pub q_selection_rates: Vec<f64>,
    /// Fraction of successful replicates choosing each `k` (index `k − 1`).
    pub k_selection_rates: KSelectionRates,
    pub param_means: Option<ParamSummary>,
    pub param_rmse: Option<ParamSummary>,
    pub misclass_mean: Option<f64>,
    pub misclass_se: Option<f64>,
    pub misclassification: Vec<f64>,
}

struct Replicate {
    passed_q: Vec<bool>,
    k_aic: usize,
    k_bic: usize,
    estimate: ModelParams,
    misclass: f64,
}

fn best_k(trace: &SelectionTrace, q: usize, c: SelectionCriterion) -> Option<usize> {
    trace
        .records
        .iter()
        .filter(|r| r.q == q)
        .filter_map(|r| r.criterion(c).map(|v| (r.k, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k)
}

fn replicate(
    design: &SimDesign,
    cfg: &FitConfig,
    opts: &StudyOptions,
    q_max: usize,
    seed: u64,
) -> Result<Replicate> {
    let sample = sample_responses(&design.true_params, design.n, seed)?;
    let rcfg = FitConfig { seed, ..*cfg };
    let run = run_selection(&sample.table, q_max, opts.k_max, &rcfg, &opts.selection)?;

    let mut passed_q = vec![false; q_max];
    for r in &run.trace.records {
        if r.max_residual.is_some_and(|m| m <= opts.selection.threshold) {
            passed_q[r.q - 1] = true;
        }
    }
    let q_used = match run.chosen {
        Some((q, _)) => q,
        None => run.trace.records.iter().map(|r| r.q).max().unwrap_or(1),
    };
    let k_aic = best_k(&run.trace, q_used, SelectionCriterion::Aic)
        .ok_or_else(|| Error::degenerate("no candidate fit succeeded"))?;
    let k_bic = best_k(&run.trace, q_used, SelectionCriterion::Bic)
        .ok_or_else(|| Error::degenerate("no candidate fit succeeded"))?;

    let spec = design.spec;
    let reused = run
        .trace
        .records
        .iter()
        .zip(run.fits)
        .find(|(r, _)| r.q == spec.q && r.k == spec.k)
        .and_then(|(_, f)| f);
    let truth_fit: FitResult = match reused {
        Some(f) => f,
        None => fit(&sample.table, &spec, &rcfg)?,
    };
    let map = classify_map(&truth_fit.posteriors);
    let est: Vec<usize> = sample.pattern_index.iter().map(|&h| map[h]).collect();
    let misclass = misclassification_error(&sample.labels, &est, spec.k)?;
    Ok(Replicate {
        passed_q,
        k_aic,
        k_bic,
        estimate: truth_fit.params,
        misclass,
    })
}

fn summary_of(rows: impl Fn(usize, usize) -> f64, icpt: impl Fn(usize) -> f64, p: usize, q: usize) -> ParamSummary {
    ParamSummary {
        intercepts: (0..p).map(icpt).collect(),
        loadings: (0..p).map(|j| (0..q).map(|r| rows(j, r)).collect()).collect(),
    }
}

/// Study with default options.
pub fn run_study(design: &SimDesign, cfg: &FitConfig) -> Result<StudySummary> {
    run_study_with(design, cfg, &StudyOptions::default())
}

/// Runs every replicate (in parallel, one derived seed each) and aggregates.
pub fn run_study_with(
    design: &SimDesign,
    cfg: &FitConfig,
    opts: &StudyOptions,
) -> Result<StudySummary> {
    cfg.validate()?;
    let spec = design.spec;
    let (p, q) = (spec.p, spec.q);
    let q_max = opts
        .q_max
        .unwrap_or_else(|| (q + 1).min(crate::model::ledermann_max_factors(p)))
        .max(1);
    if opts.k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    ModelSpec::new(p, q_max, 1)?;

    let outcomes = par::map_range(design.n_reps, |r| {
        let seed = par::derive_seed(design.seed, REPLICATE_STREAM, r as u64);
        replicate(design, cfg, opts, q_max, seed)
    });

    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    let m = ok.len();
    let frac = |c: usize| if m == 0 { 0.0 } else { c as f64 / m as f64 };
    let q_selection_rates = (0..q_max)
        .map(|qi| frac(ok.iter().filter(|r| r.passed_q[qi]).count()))
        .collect();
    let k_rates = |get: fn(&Replicate) -> usize| -> Vec<f64> {
        (1..=opts.k_max)
            .map(|k| frac(ok.iter().filter(|r| get(r) == k).count()))
            .collect()
    };
    let k_selection_rates = KSelectionRates {
        aic: k_rates(|r| r.k_aic),
        bic: k_rates(|r| r.k_bic),
    };

    let (param_means, param_rmse, misclass_mean, misclass_se) = if m == 0 {
        (None, None, None, None)
    } else {
        let mf = m as f64;
        let truth = &design.true_params.loadings;
        let mean_l = |j: usize, r: usize| ok.iter().map(|x| x.estimate.loadings.matrix[(j, r)]).sum::<f64>() / mf;
        let mean_i = |j: usize| ok.iter().map(|x| x.estimate.loadings.intercepts[j]).sum::<f64>() / mf;
        let rmse_l = |j: usize, r: usize| {
            (ok.iter()
                .map(|x| (x.estimate.loadings.matrix[(j, r)] - truth.matrix[(j, r)]).powi(2))
                .sum::<f64>()
                / mf)
                .sqrt()
        };
        let rmse_i = |j: usize| {
            (ok.iter()
                .map(|x| (x.estimate.loadings.intercepts[j] - truth.intercepts[j]).powi(2))
                .sum::<f64>()
                / mf)
                .sqrt()
        };
        let mc_mean = ok.iter().map(|x| x.misclass).sum::<f64>() / mf;
        let mc_se = if m > 1 {
            let var = ok.iter().map(|x| (x.misclass - mc_mean).powi(2)).sum::<f64>() / (mf - 1.0);
            (var / mf).sqrt()
        } else {
            0.0
        };
        (
            Some(summary_of(mean_l, mean_i, p, q)),
            Some(summary_of(rmse_l, rmse_i, p, q)),
            Some(mc_mean),
            Some(mc_se),
        )
    };

    Ok(StudySummary {
        n_reps: design.n_reps,
        n_succeeded: m,
        n_failed: failures.len(),
        failures,
        q_max,
        k_max: opts.k_max,
        q_selection_rates,
        k_selection_rates,
        param_means,
        param_rmse,
        misclass_mean,
        misclass_se,
        misclassification: ok.iter().map(|r| r.misclass).collect(),
    })
}
