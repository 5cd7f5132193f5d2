mod common;

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use fmab::estimation::{e_step, fit, fit_from, initialize, log_likelihood, standardize, update_mixture, FitConfig};
use fmab::quadrature::{tensor_grid, TensorGrid};
use fmab::simulation::{generate_design_with, sample_responses, DesignOptions};
use fmab::{Loadings, MixtureParams, ModelParams, ModelSpec, PatternTable};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn one_factor(intercepts: &[f64], slopes: &[f64]) -> ModelParams {
    let p = intercepts.len();
    ModelParams::new(
        ModelSpec::unbounded(p, 1, 1).unwrap(),
        Loadings::new(
            DVector::from_column_slice(intercepts),
            DMatrix::from_column_slice(p, 1, slopes),
        )
        .unwrap(),
        MixtureParams::standard(1),
    )
    .unwrap()
}

fn flip_to_positive(params: &ModelParams) -> Vec<f64> {
    let sign = params.loadings.matrix[(0, 0)].signum();
    params
        .loadings
        .intercepts
        .iter()
        .copied()
        .chain(params.loadings.matrix.iter().map(|v| sign * v))
        .collect()
}

struct NegLoglik<'a> {
    data: &'a PatternTable,
    grid: &'a TensorGrid,
}

impl CostFunction for NegLoglik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> Result<f64, argmin::core::Error> {
        let p = theta.len() / 2;
        let params = one_factor(&theta[..p], &theta[p..]);
        Ok(-log_likelihood(&params, self.data, self.grid).unwrap())
    }
}

#[test]
fn converged_items_match_generic_optimizer() {
    let truth = one_factor(&[-0.5, 0.3, 0.8], &[1.2, 1.5, 0.9]);
    let data = sample_responses(&truth, 1000, 11).unwrap().table;
    let spec = ModelSpec::new(3, 1, 1).unwrap();
    let cfg = FitConfig {
        quad_points: 20,
        epsilon: 1e-11,
        max_iter: 20_000,
        ..FitConfig::default()
    };
    let fitted = fit(&data, &spec, &cfg).unwrap();
    let ours = flip_to_positive(&fitted.params);

    let grid = tensor_grid(1, 20).unwrap();
    let start = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += 0.5;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-13).unwrap();
    let res = Executor::new(NegLoglik { data: &data, grid: &grid }, solver)
        .configure(|s| s.max_iters(50_000))
        .run()
        .unwrap();
    let best = res.state().best_param.clone().unwrap();
    let sign = best[3].signum();
    let oracle: Vec<f64> = best[..3]
        .iter()
        .copied()
        .chain(best[3..].iter().map(|v| sign * v))
        .collect();
    for (a, b) in ours.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-4, "{ours:?} vs {oracle:?}");
    }
}

fn recovery_truth() -> ModelParams {
    one_factor(&[-1.0, -0.4, 0.0, 0.5, 1.0], &[1.0, 1.5, 1.2, 0.8, 1.4])
}

#[test]
fn single_group_fit_recovers_items() {
    let truth = one_factor(
        &[-0.5, -0.2, 0.0, 0.2, 0.5, -0.3, 0.3, 0.1, -0.1, 0.4],
        &[1.0, 1.2, 0.8, 1.1, 0.9, 1.0, 1.2, 0.8, 1.1, 0.9],
    );
    let data = sample_responses(&truth, 2000, 0).unwrap().table;
    let fitted = fit(&data, &ModelSpec::new(10, 1, 1).unwrap(), &FitConfig::default()).unwrap();
    let est = flip_to_positive(&fitted.params);
    let tru = flip_to_positive(&truth);
    for (a, b) in est.iter().zip(&tru) {
        assert!((a - b).abs() < 0.15, "{est:?} vs {tru:?}");
    }
}

#[test]
fn single_group_estimates_center_on_truth() {
    let truth = recovery_truth();
    let tru = flip_to_positive(&truth);
    let reps = 20;
    let mut mean = vec![0.0; tru.len()];
    for seed in 0..reps {
        let data = sample_responses(&truth, 2000, 100 + seed).unwrap().table;
        let fitted = fit(&data, &ModelSpec::new(5, 1, 1).unwrap(), &FitConfig::default()).unwrap();
        for (m, v) in mean.iter_mut().zip(flip_to_positive(&fitted.params)) {
            *m += v / reps as f64;
        }
    }
    for (a, b) in mean.iter().zip(&tru) {
        assert!((a - b).abs() < 0.05, "{mean:?} vs {tru:?}");
    }
}

#[test]
fn single_group_mixture_stays_standard_normal() {
    let truth = one_factor(&[0.2, -0.3, 0.5, 0.0], &[1.0, 2.0, 1.5, 0.7]);
    let data = sample_responses(&truth, 300, 5).unwrap().table;
    let fitted = fit(&data, &ModelSpec::new(4, 1, 1).unwrap(), &FitConfig::default()).unwrap();
    assert_eq!(fitted.params.mixture, MixtureParams::standard(1));
}

#[test]
fn initializer_contracts() {
    let truth = one_factor(&[0.2, -0.3, 0.5, 0.0, 0.4], &[1.0, 2.0, 1.5, 0.7, 1.1]);
    let data = sample_responses(&truth, 300, 6).unwrap().table;
    let cfg = FitConfig { seed: 42, ..FitConfig::default() };

    let spec1 = ModelSpec::new(5, 1, 1).unwrap();
    let single = initialize(&data, &spec1, &cfg).unwrap();
    assert_eq!(single.mixture, MixtureParams::standard(1));
    let grid = tensor_grid(1, cfg.quad_points).unwrap();
    let lt = fit(&data, &spec1, &cfg).unwrap();
    let gap = lt.loglik() - log_likelihood(&single, &data, &grid).unwrap();
    assert!((0.0..1e-3).contains(&gap), "gap {gap}");

    let spec = ModelSpec::new(5, 1, 3).unwrap();
    let a = initialize(&data, &spec, &cfg).unwrap();
    let b = initialize(&data, &spec, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.mixture.standardization_residual() < 1e-10);
}

#[test]
fn weights_equal_tabulated_responsibilities() {
    let mut rng = common::rng(17);
    let params = common::random_one_factor(4, 2, &mut rng);
    let params = standardize(&params).unwrap();
    let data = sample_responses(&params, 500, 2).unwrap().table;
    let grid = tensor_grid(1, 12).unwrap();
    let es = e_step(&params, &data, &grid).unwrap();
    let mix = update_mixture(data.counts(), &es, 1e-6).unwrap();
    for i in 0..2 {
        let mut total = 0.0;
        for h in 0..data.n_patterns() {
            let z = common::oracle(&params, data.pattern(h));
            total += data.count(h) as f64 * z.posteriors[i];
        }
        let tab = total / data.n() as f64;
        assert!((mix.weights[i] - tab).abs() < 1e-6, "{} vs {tab}", mix.weights[i]);
    }
}

#[test]
fn final_posteriors_are_row_stochastic() {
    let mut rng = common::rng(4);
    let truth = standardize(&common::random_one_factor(5, 2, &mut rng)).unwrap();
    let data = sample_responses(&truth, 300, 8).unwrap().table;
    let fitted = fit(&data, &ModelSpec::new(5, 1, 2).unwrap(), &FitConfig::default()).unwrap();
    for row in fitted.posteriors.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-10);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
    for w in fitted.loglik_trace.windows(2) {
        assert!(w[1] - w[0] >= -1e-8);
    }
}

#[test]
fn warm_start_from_optimum_stays_put() {
    let design = generate_design_with(
        1,
        2,
        12,
        &DesignOptions { p: 6, ..DesignOptions::default() },
    )
    .unwrap();
    let data = sample_responses(&design.true_params, 400, 1).unwrap().table;
    let cfg = FitConfig { epsilon: 1e-8, max_iter: 5000, ..FitConfig::default() };
    let first = fit_from(&data, &design.true_params, &cfg).unwrap();
    assert!(first.converged);
    let again = fit_from(&data, &first.params, &cfg).unwrap();
    assert!((again.loglik() - first.loglik()).abs() < 1e-5);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = PatternTable::from_rows(3, &[[0u8, 1, 1], [1, 0, 1], [1, 1, 1]]).unwrap();
    let spec = ModelSpec::new(3, 1, 1).unwrap();
    for cfg in [
        FitConfig { epsilon: 0.0, ..FitConfig::default() },
        FitConfig { quad_points: 0, ..FitConfig::default() },
        FitConfig { n_starts: 0, ..FitConfig::default() },
        FitConfig { ridge: -1.0, ..FitConfig::default() },
    ] {
        assert!(matches!(fit(&data, &spec, &cfg), Err(fmab::Error::InvalidArgument(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn standardize_preserves_loglik(seed in any::<u64>(), k in 1usize..=2, p in 3usize..=5) {
        let mut rng = common::rng(seed);
        let params = common::random_one_factor(p, k, &mut rng);
        let data = PatternTable::new(
            p,
            common::all_patterns(p),
            (0..1usize << p).map(|h| 1 + h % 3).collect(),
        ).unwrap();
        let grid = tensor_grid(1, 10).unwrap();
        let before = log_likelihood(&params, &data, &grid).unwrap();
        let after_params = standardize(&params).unwrap();
        let after = log_likelihood(&after_params, &data, &grid).unwrap();
        prop_assert!((before - after).abs() < 1e-9 * before.abs().max(1.0));
        prop_assert!(after_params.mixture.standardization_residual() < 1e-10);
    }

    #[test]
    fn responsibilities_are_row_stochastic(seed in any::<u64>(), p in 2usize..=5) {
        let mut rng = common::rng(seed);
        let params = common::random_one_factor(p, 2, &mut rng);
        let data = PatternTable::new(p, common::all_patterns(p), vec![1; 1 << p]).unwrap();
        let es = e_step(&params, &data, &tensor_grid(1, 8).unwrap()).unwrap();
        for row in es.responsibilities.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }
}
