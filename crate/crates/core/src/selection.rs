//! Information criteria, bivariate residuals, pattern goodness-of-fit tests
//! and forward selection of the number of factors and components.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{e_step, fit, FitConfig, FitResult};
use crate::linalg;
use crate::model::{logistic, ModelParams, ModelSpec, PatternTable};
use crate::par;
use crate::quadrature::{tensor_grid, transform_with_factor, TensorGrid};

/// Residuals above this value flag a misfitting bivariate margin.
pub const DEFAULT_RESIDUAL_THRESHOLD: f64 = 4.0;

/// Expected counts below this are not divided by.
pub const MIN_EXPECTED: f64 = 1e-12;

pub const DF_CONVENTION: &str = "observed patterns - 1 - free parameters";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub aic: f64,
    pub bic: f64,
}

/// `AIC = −2ℓ + 2m`, `BIC = −2ℓ + m log n`.
pub fn information_criteria(loglik: f64, n_par: usize, n: usize) -> Criteria {
    let m = n_par as f64;
    Criteria {
        aic: -2.0 * loglik + 2.0 * m,
        bic: -2.0 * loglik + m * (n as f64).ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionCriterion {
    #[default]
    Aic,
    Bic,
}

impl SelectionCriterion {
    pub fn value(self, c: &Criteria) -> f64 {
        match self {
            SelectionCriterion::Aic => c.aic,
            SelectionCriterion::Bic => c.bic,
        }
    }
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionCriterion::Aic => "AIC",
            SelectionCriterion::Bic => "BIC",
        })
    }
}

impl FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(SelectionCriterion::Aic),
            "bic" => Ok(SelectionCriterion::Bic),
            _ => Err(Error::invalid(format!("unknown criterion '{s}'"))),
        }
    }
}

/// One cell of one item-pair margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateCell {
    pub j: usize,
    pub l: usize,
    pub a: u8,
    pub b: u8,
    pub observed: f64,
    pub expected: f64,
    /// `(O − E)² / E`; `None` when `E` is too small to divide by.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BivariateResidualReport {
    /// Pairs `j < l` in lexicographic order, cells `00, 01, 10, 11` within each.
    pub entries: Vec<BivariateCell>,
    /// Largest stable residual (0 when there are none).
    pub max_residual: f64,
    pub threshold: f64,
    pub n_unstable: usize,
}

impl BivariateResidualReport {
    /// Builds the report from observed and expected cell counts laid out as in `entries`.
    pub fn from_counts(p: usize, observed: &[f64], expected: &[f64], threshold: f64) -> Self {
        let mut entries = Vec::with_capacity(observed.len());
        let mut idx = 0;
        for j in 0..p {
            for l in j + 1..p {
                for a in 0..2u8 {
                    for b in 0..2u8 {
                        let o = observed[idx];
                        let e = expected[idx];
                        let residual = (e >= MIN_EXPECTED).then(|| (o - e) * (o - e) / e);
                        entries.push(BivariateCell {
                            j,
                            l,
                            a,
                            b,
                            observed: o,
                            expected: e,
                            residual,
                        });
                        idx += 1;
                    }
                }
            }
        }
        let max_residual = entries
            .iter()
            .filter_map(|c| c.residual)
            .fold(0.0, f64::max);
        let n_unstable = entries.iter().filter(|c| c.residual.is_none()).count();
        Self {
            entries,
            max_residual,
            threshold,
            n_unstable,
        }
    }

    pub fn passes(&self) -> bool {
        self.max_residual <= self.threshold
    }

    /// Largest residual involving each item.
    pub fn max_per_item(&self, p: usize) -> Vec<f64> {
        let mut out = vec![0.0f64; p];
        for c in &self.entries {
            if let Some(r) = c.residual {
                out[c.j] = out[c.j].max(r);
                out[c.l] = out[c.l].max(r);
            }
        }
        out
    }
}

fn observed_bivariate(data: &PatternTable) -> Vec<f64> {
    let p = data.p();
    let mut obs = vec![0.0; 2 * p * p.saturating_sub(1)];
    for (y, &c) in data.patterns().iter().zip(data.counts()) {
        let mut idx = 0;
        for j in 0..p {
            for l in j + 1..p {
                obs[idx + 2 * y[j] as usize + y[l] as usize] += c as f64;
                idx += 4;
            }
        }
    }
    obs
}

/// Model-implied bivariate cell probabilities in report order.
pub fn bivariate_probabilities(params: &ModelParams, grid: &TensorGrid) -> Result<Vec<f64>> {
    let p = params.spec.p;
    let mix = &params.mixture;
    let mut probs = vec![0.0; 2 * p * p.saturating_sub(1)];
    let mut pi = vec![0.0; p];
    for i in 0..mix.k() {
        let l = linalg::cholesky_lower(&mix.covariances[i])?;
        let tg = transform_with_factor(grid, &mix.means[i], &l);
        for (t, z) in tg.points().enumerate() {
            let w = mix.weights[i] * tg.mass(t);
            for (j, v) in pi.iter_mut().enumerate() {
                *v = logistic(params.loadings.linear_predictor(j, z));
            }
            let mut idx = 0;
            for j in 0..p {
                for l in j + 1..p {
                    let (pj, pl) = (pi[j], pi[l]);
                    probs[idx] += w * (1.0 - pj) * (1.0 - pl);
                    probs[idx + 1] += w * (1.0 - pj) * pl;
                    probs[idx + 2] += w * pj * (1.0 - pl);
                    probs[idx + 3] += w * pj * pl;
                    idx += 4;
                }
            }
        }
    }
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(Error::degenerate("non-finite bivariate margin"));
    }
    Ok(probs)
}

/// Pearson residuals on every 2×2 item-pair margin, threshold 4.
pub fn bivariate_residuals(
    params: &ModelParams,
    data: &PatternTable,
    grid: &TensorGrid,
) -> Result<BivariateResidualReport> {
    bivariate_residuals_with_threshold(params, data, grid, DEFAULT_RESIDUAL_THRESHOLD)
}

pub fn bivariate_residuals_with_threshold(
    params: &ModelParams,
    data: &PatternTable,
    grid: &TensorGrid,
    threshold: f64,
) -> Result<BivariateResidualReport> {
    if data.p() != params.spec.p {
        return Err(Error::invalid("data and model differ in the number of items"));
    }
    let n = data.n() as f64;
    let expected: Vec<f64> = bivariate_probabilities(params, grid)?
        .into_iter()
        .map(|v| n * v)
        .collect();
    let observed = observed_bivariate(data);
    Ok(BivariateResidualReport::from_counts(
        data.p(),
        &observed,
        &expected,
        threshold,
    ))
}

/// Pearson `Σ (O − E)²/E` and deviance `2 Σ O log(O/E)` over matching cells.
pub fn pearson_and_deviance(observed: &[f64], expected: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != expected.len() {
        return Err(Error::invalid("observed and expected lengths differ"));
    }
    let mut gf = 0.0;
    let mut lr = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        if !(e > 0.0) {
            return Err(Error::degenerate("zero expected frequency"));
        }
        gf += (o - e) * (o - e) / e;
        if o > 0.0 {
            lr += o * (o / e).ln();
        }
    }
    Ok((gf, 2.0 * lr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternFitTests {
    /// Pearson statistic including the unobserved-pattern remainder cell.
    pub gf: f64,
    pub lr: f64,
    pub df: i64,
    pub df_convention: String,
}

/// Overall GF and LR statistics over the observed response patterns.
pub fn pattern_fit_tests(
    params: &ModelParams,
    data: &PatternTable,
    grid: &TensorGrid,
) -> Result<PatternFitTests> {
    let es = e_step(params, data, grid)?;
    let n = data.n() as f64;
    let expected: Vec<f64> = es.log_marginal.iter().map(|l| n * l.exp()).collect();
    let observed: Vec<f64> = data.counts().iter().map(|&c| c as f64).collect();
    let (mut gf, lr) = pearson_and_deviance(&observed, &expected)?;
    let remainder = n - expected.iter().sum::<f64>();
    if remainder > 0.0 {
        gf += remainder;
    }
    let df = data.n_patterns() as i64 - 1 - params.spec.n_free_parameters() as i64;
    Ok(PatternFitTests {
        gf,
        lr,
        df,
        df_convention: DF_CONVENTION.to_string(),
    })
}

/// One fitted candidate in the selection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub q: usize,
    pub k: usize,
    pub loglik: Option<f64>,
    pub n_par: usize,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub max_residual: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

impl CandidateRecord {
    pub fn criterion(&self, c: SelectionCriterion) -> Option<f64> {
        match c {
            SelectionCriterion::Aic => self.aic,
            SelectionCriterion::Bic => self.bic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub q_max: usize,
    pub k_max: usize,
    pub criterion: SelectionCriterion,
    pub threshold: f64,
    pub records: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_q: usize,
    pub chosen_k: usize,
    pub criterion: SelectionCriterion,
    pub trace: SelectionTrace,
}

impl SelectionResult {
    pub fn chosen(&self) -> &CandidateRecord {
        self.trace
            .records
            .iter()
            .find(|r| r.q == self.chosen_q && r.k == self.chosen_k)
            .expect("chosen candidate is in the trace")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub criterion: SelectionCriterion,
    pub threshold: f64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            criterion: SelectionCriterion::Aic,
            threshold: DEFAULT_RESIDUAL_THRESHOLD,
        }
    }
}

/// Selection outcome together with the fits behind every record.
pub(crate) struct SelectionRun {
    pub trace: SelectionTrace,
    pub fits: Vec<Option<FitResult>>,
    pub chosen: Option<(usize, usize)>,
}

fn fit_candidate(
    data: &PatternTable,
    q: usize,
    k: usize,
    cfg: &FitConfig,
    threshold: f64,
) -> (CandidateRecord, Option<FitResult>) {
    let n_par = ModelSpec::unbounded(data.p(), q, k)
        .map(|s| s.n_free_parameters())
        .unwrap_or(0);
    let outcome = ModelSpec::new(data.p(), q, k).and_then(|spec| {
        let r = fit(data, &spec, cfg)?;
        let grid = tensor_grid(q, cfg.quad_points)?;
        let rep = bivariate_residuals_with_threshold(&r.params, data, &grid, threshold)?;
        Ok((r, rep.max_residual))
    });
    match outcome {
        Ok((r, max_res)) => (
            CandidateRecord {
                q,
                k,
                loglik: Some(r.loglik()),
                n_par,
                aic: Some(r.criteria.aic),
                bic: Some(r.criteria.bic),
                max_residual: Some(max_res),
                converged: r.converged,
                error: None,
            },
            Some(r),
        ),
        Err(e) => (
            CandidateRecord {
                q,
                k,
                loglik: None,
                n_par,
                aic: None,
                bic: None,
                max_residual: None,
                converged: false,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

pub(crate) fn run_selection(
    data: &PatternTable,
    q_max: usize,
    k_max: usize,
    cfg: &FitConfig,
    opts: &SelectionOptions,
) -> Result<SelectionRun> {
    if q_max == 0 || k_max == 0 {
        return Err(Error::invalid("q_max and k_max must be at least 1"));
    }
    ModelSpec::new(data.p(), q_max, 1)?;
    cfg.validate()?;

    let mut trace = SelectionTrace {
        q_max,
        k_max,
        criterion: opts.criterion,
        threshold: opts.threshold,
        records: Vec::new(),
    };
    let mut fits = Vec::new();
    for q in 1..=q_max {
        let level = par::map_range(k_max, |i| fit_candidate(data, q, i + 1, cfg, opts.threshold));
        let start = trace.records.len();
        for (rec, f) in level {
            trace.records.push(rec);
            fits.push(f);
        }
        let at_q = &trace.records[start..];
        let passes = at_q
            .iter()
            .any(|r| r.max_residual.is_some_and(|m| m <= opts.threshold));
        if passes {
            let best = at_q
                .iter()
                .filter_map(|r| r.criterion(opts.criterion).map(|v| (r.k, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k)
                .expect("a passing candidate has criteria");
            return Ok(SelectionRun {
                trace,
                fits,
                chosen: Some((q, best)),
            });
        }
    }
    Ok(SelectionRun {
        trace,
        fits,
        chosen: None,
    })
}

/// Forward selection with AIC and threshold 4.
pub fn forward_select(
    data: &PatternTable,
    q_max: usize,
    k_max: usize,
    cfg: &FitConfig,
) -> Result<SelectionResult> {
    forward_select_with(data, q_max, k_max, cfg, &SelectionOptions::default())
}

/// Raises `q` from 1 until some `k ≤ k_max` passes the residual screen, then
/// picks `k` at that `q` by the configured criterion.
pub fn forward_select_with(
    data: &PatternTable,
    q_max: usize,
    k_max: usize,
    cfg: &FitConfig,
    opts: &SelectionOptions,
) -> Result<SelectionResult> {
    let run = run_selection(data, q_max, k_max, cfg, opts)?;
    match run.chosen {
        Some((q, k)) => Ok(SelectionResult {
            chosen_q: q,
            chosen_k: k,
            criterion: opts.criterion,
            trace: run.trace,
        }),
        None => Err(Error::SelectionFailed(Box::new(run.trace))),
    }
}
