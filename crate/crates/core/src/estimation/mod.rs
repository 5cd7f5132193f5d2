//! Generalized EM estimation.
//!
//! Each iteration runs the E-step at the current parameters, takes damped
//! Newton steps on every item's expected log-likelihood, updates the mixture
//! moments and weights in closed form, and re-standardizes the latent scale.
//! A candidate whose quadrature log-likelihood falls below the current one is
//! retried with the mixture moments moved only part of the way; the last
//! fallback keeps the old moments, which is an exact EM step on the discrete
//! node model and therefore cannot decrease the likelihood.

pub mod estep;
pub mod init;
pub mod mstep;
pub mod standardize;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixtureParams, ModelParams, ModelSpec, PatternTable};
use crate::par;
use crate::quadrature::{tensor_grid, TensorGrid};
use crate::selection::{information_criteria, Criteria};

pub use estep::{
    component_pattern_likelihood, component_posteriors, conditional_latent_moments, e_step,
    log_likelihood, EStepResult,
};
pub use init::initialize;
pub use mstep::{update_loadings, update_mixture, ItemObjective};
pub use standardize::standardize;

const START_STREAM: u64 = 0x5354_4152;

/// Fraction of the mixture-moment update tried after a rejected full step.
const MIXTURE_STEPS: [f64; 4] = [1.0, 0.5, 0.25, 0.0];

/// Slack allowed on the moment-free fallback step, which is ascent in exact
/// arithmetic.
const FALLBACK_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Gauss–Hermite points per latent dimension.
    pub quad_points: usize,
    /// Absolute log-likelihood change that ends the iterations.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Newton steps per item per iteration.
    pub newton_max: usize,
    /// Seeded restarts; the best final log-likelihood wins.
    pub n_starts: usize,
    /// Eigenvalue floor for component covariances.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            quad_points: 8,
            epsilon: 1e-5,
            max_iter: 500,
            newton_max: 5,
            n_starts: 1,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quad_points == 0
            || self.max_iter == 0
            || self.newton_max == 0
            || self.n_starts == 0
        {
            return Err(Error::invalid(
                "quad_points, max_iter, newton_max and n_starts must be positive",
            ));
        }
        if !(self.epsilon > 0.0) || !(self.ridge > 0.0) {
            return Err(Error::invalid("epsilon and ridge must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Largest violation of the standardization constraints after each
    /// iteration, starting with the initial parameters.
    pub standardization_trace: Vec<f64>,
    /// Newton steps that fell back to gradient ascent.
    pub gradient_fallbacks: usize,
    /// Iterations whose mixture-moment step had to be shortened.
    pub damped_mixture_steps: usize,
    /// The last iteration could not find an ascent step.
    pub stalled: bool,
    /// Index of the winning start.
    pub start_index: usize,
    /// Messages of starts that failed.
    pub failed_starts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// Component posteriors per distinct pattern at the optimum.
    pub posteriors: DMatrix<f64>,
    pub criteria: Criteria,
    pub config: FitConfig,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }
}

fn blend_mixture(old: &MixtureParams, new: &MixtureParams, alpha: f64) -> MixtureParams {
    if alpha == 1.0 {
        return new.clone();
    }
    let means = old
        .means
        .iter()
        .zip(&new.means)
        .map(|(a, b)| a * (1.0 - alpha) + b * alpha)
        .collect();
    let covariances = old
        .covariances
        .iter()
        .zip(&new.covariances)
        .map(|(a, b)| a * (1.0 - alpha) + b * alpha)
        .collect();
    MixtureParams {
        weights: new.weights.clone(),
        means,
        covariances,
    }
}

/// Runs the GEM loop from `start` on a prepared grid.
pub(crate) fn run_gem(
    data: &PatternTable,
    grid: &TensorGrid,
    start: ModelParams,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let mut params = standardize(&start)?;
    let mut es = e_step(&params, data, grid)?;
    let mut trace = vec![es.loglik];
    let mut diag = FitDiagnostics {
        standardization_trace: vec![params.mixture.standardization_residual()],
        ..Default::default()
    };
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < cfg.max_iter {
        n_iter += 1;
        let lu = update_loadings(&params, &es, cfg);
        diag.gradient_fallbacks += lu.gradient_fallbacks;
        let target = update_mixture(data.counts(), &es, cfg.ridge)?;

        let mut accepted = None;
        for (attempt, &alpha) in MIXTURE_STEPS.iter().enumerate() {
            let candidate = ModelParams {
                spec: params.spec,
                loadings: lu.loadings.clone(),
                mixture: blend_mixture(&params.mixture, &target, alpha),
            };
            let candidate = standardize(&candidate)?;
            let ces = e_step(&candidate, data, grid)?;
            let slack = if alpha == 0.0 { FALLBACK_SLACK } else { 0.0 };
            if ces.loglik >= es.loglik - slack {
                if attempt > 0 {
                    diag.damped_mixture_steps += 1;
                }
                accepted = Some((candidate, ces));
                break;
            }
        }
        let Some((next, next_es)) = accepted else {
            diag.stalled = true;
            converged = true;
            break;
        };
        let delta = next_es.loglik - es.loglik;
        params = next;
        es = next_es;
        trace.push(es.loglik);
        diag.standardization_trace
            .push(params.mixture.standardization_residual());
        if delta.abs() < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let criteria = information_criteria(es.loglik, params.spec.n_free_parameters(), data.n());
    Ok(FitResult {
        params,
        loglik_trace: trace,
        converged,
        n_iter,
        posteriors: es.responsibilities,
        criteria,
        config: *cfg,
        diagnostics: diag,
    })
}

fn check_inputs(data: &PatternTable, spec: &ModelSpec, cfg: &FitConfig) -> Result<()> {
    cfg.validate()?;
    if data.p() != spec.p {
        return Err(Error::invalid(format!(
            "data has {} items but the model has p = {}",
            data.p(),
            spec.p
        )));
    }
    if data.n() == 0 {
        return Err(Error::invalid("no observations"));
    }
    if !spec.within_ledermann() {
        return Err(Error::invalid(format!(
            "q = {} exceeds the Ledermann bound for p = {}",
            spec.q, spec.p
        )));
    }
    Ok(())
}

/// Fits the model with `cfg.n_starts` seeded restarts and returns the start
/// with the highest final log-likelihood (lowest index on ties).
pub fn fit(data: &PatternTable, spec: &ModelSpec, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(data, spec, cfg)?;
    let grid = tensor_grid(spec.q, cfg.quad_points)?;
    let base = init::latent_trait_start(data, spec.q, &grid, cfg)?;
    let summary = init::factor_summary(&base, data, &grid)?;
    let starts = if spec.k == 1 { 1 } else { cfg.n_starts };

    let outcomes: Vec<Result<FitResult>> = par::map_range(starts, |s| {
        let seed = if s == 0 && starts == 1 {
            cfg.seed
        } else {
            par::derive_seed(cfg.seed, START_STREAM, s as u64)
        };
        let start = init::clustered_mixture(&base, &summary, spec.k, seed)?;
        run_gem(data, &grid, start, cfg)
    });

    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for (s, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(mut r) => {
                r.diagnostics.start_index = s;
                if best.as_ref().is_none_or(|b| r.loglik() > b.loglik()) {
                    best = Some(r);
                }
            }
            Err(e) => failures.push(format!("start {s}: {e}")),
        }
    }
    match best {
        Some(mut r) => {
            r.diagnostics.failed_starts = failures;
            Ok(r)
        }
        None => Err(Error::FitFailed(failures)),
    }
}

/// Single GEM run from given parameters (standardized first).
pub fn fit_from(data: &PatternTable, start: &ModelParams, cfg: &FitConfig) -> Result<FitResult> {
    check_inputs(data, &start.spec, cfg)?;
    let grid = tensor_grid(start.spec.q, cfg.quad_points)?;
    run_gem(data, &grid, start.clone(), cfg)
}

/// Conditional mean `E[z | y]` combining components by posterior weight.
pub fn posterior_mean(es: &EStepResult, h: usize) -> DVector<f64> {
    let k = es.responsibilities.ncols();
    let q = es.cond_mean[h][0].len();
    let mut m = DVector::zeros(q);
    for i in 0..k {
        m.axpy(es.responsibilities[(h, i)], &es.cond_mean[h][i], 1.0);
    }
    m
}
