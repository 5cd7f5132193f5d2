mod common;

use fmab::estimation::{fit, log_likelihood, standardize, FitConfig};
use fmab::quadrature::tensor_grid;
use fmab::selection::{
    bivariate_residuals, forward_select, forward_select_with, pattern_fit_tests,
    pearson_and_deviance, SelectionCriterion, SelectionOptions,
};
use fmab::simulation::{generate_design, sample_responses};
use fmab::{Error, PatternTable};
use proptest::prelude::*;

#[test]
fn two_item_deviance_matches_direct_multinomial() {
    let mut rng = common::rng(31);
    let params = common::random_one_factor(2, 1, &mut rng);
    let data = PatternTable::new(2, common::all_patterns(2), vec![37, 12, 25, 51]).unwrap();
    let grid = tensor_grid(1, 20).unwrap();
    let tests = pattern_fit_tests(&params, &data, &grid).unwrap();

    let n = data.n() as f64;
    let mut deviance = 0.0;
    for h in 0..data.n_patterns() {
        let single = PatternTable::new(2, vec![data.pattern(h).to_vec()], vec![1]).unwrap();
        let log_f = log_likelihood(&params, &single, &grid).unwrap();
        let o = data.count(h) as f64;
        deviance += 2.0 * o * (o.ln() - n.ln() - log_f);
    }
    assert!((tests.lr - deviance).abs() < 1e-10, "{} vs {deviance}", tests.lr);
    assert_eq!(tests.df, 4 - 1 - 4);
}

#[test]
fn matching_frequencies_give_zero_statistics() {
    let e = [12.5, 30.0, 7.5];
    assert_eq!(pearson_and_deviance(&e, &e).unwrap(), (0.0, 0.0));
}

#[test]
fn residual_screen_passes_on_model_generated_data() {
    let design = generate_design(1, 2, 77).unwrap();
    let grid = tensor_grid(1, 8).unwrap();
    let cfg = FitConfig::default();
    let reps = 50;
    let passed = (0..reps)
        .filter(|&r| {
            let data = sample_responses(&design.true_params, 300, 500 + r).unwrap().table;
            let fitted = fit(&data, &design.spec, &cfg).unwrap();
            bivariate_residuals(&fitted.params, &data, &grid).unwrap().passes()
        })
        .count();
    assert!(passed as f64 >= 0.9 * reps as f64, "{passed} of {reps}");
}

#[test]
fn single_component_budget_chooses_one() {
    let design = generate_design(1, 2, 3).unwrap();
    let data = sample_responses(&design.true_params, 300, 1).unwrap().table;
    let res = forward_select(&data, 2, 1, &FitConfig::default()).unwrap();
    assert_eq!(res.chosen_k, 1);
    assert!(res.trace.records.iter().all(|r| r.k == 1));
}

#[test]
fn one_factor_design_selects_one_factor() {
    let design = generate_design(1, 2, 2024).unwrap();
    let data = sample_responses(&design.true_params, 300, 5).unwrap().table;
    let res = forward_select(&data, 2, 3, &FitConfig::default()).unwrap();
    assert_eq!(res.chosen_q, 1);
    let chosen = res.chosen();
    assert_eq!((chosen.q, chosen.k), (res.chosen_q, res.chosen_k));
    assert!(res.trace.records.iter().all(|r| r.q == 1));
}

#[test]
fn two_factor_design_selects_two_factors() {
    let design = generate_design(2, 3, 2025).unwrap();
    let data = sample_responses(&design.true_params, 300, 6).unwrap().table;
    let cfg = FitConfig { n_starts: 2, ..FitConfig::default() };
    let res = forward_select(&data, 3, 3, &cfg).unwrap();
    assert_eq!(res.chosen_q, 2);
}

#[test]
fn impossible_threshold_reports_the_whole_trace() {
    let design = generate_design(1, 2, 8).unwrap();
    let data = sample_responses(&design.true_params, 200, 2).unwrap().table;
    let opts = SelectionOptions { criterion: SelectionCriterion::Bic, threshold: -1.0 };
    match forward_select_with(&data, 2, 2, &FitConfig::default(), &opts) {
        Err(Error::SelectionFailed(trace)) => {
            assert_eq!(trace.records.len(), 4);
            assert_eq!(trace.criterion, SelectionCriterion::Bic);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_budgets_are_rejected() {
    let data = PatternTable::from_rows(4, &[[0u8, 1, 1, 0], [1, 0, 1, 1]]).unwrap();
    assert!(matches!(
        forward_select(&data, 0, 2, &FitConfig::default()),
        Err(Error::InvalidArgument(_))
    ));
    assert!(forward_select(&data, 2, 2, &FitConfig::default()).is_err());
}

fn random_table(p: usize, rng: &mut rand_chacha::ChaCha8Rng) -> PatternTable {
    use rand::Rng;
    let rows: Vec<Vec<u8>> = (0..120)
        .map(|_| (0..p).map(|_| rng.random_range(0..2u8)).collect())
        .collect();
    PatternTable::from_rows(p, &rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residuals_ignore_component_labels(seed in any::<u64>(), p in 2usize..=5) {
        let mut rng = common::rng(seed);
        let params = standardize(&common::random_one_factor(p, 2, &mut rng)).unwrap();
        let data = random_table(p, &mut rng);
        let grid = tensor_grid(1, 8).unwrap();
        let swapped = fmab::ModelParams { mixture: params.mixture.permuted(&[1, 0]), ..params.clone() };
        let a = bivariate_residuals(&params, &data, &grid).unwrap();
        let b = bivariate_residuals(&swapped, &data, &grid).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            prop_assert!((x.expected - y.expected).abs() < 1e-9 * x.expected.max(1.0));
        }
        prop_assert!((a.max_residual - b.max_residual).abs() < 1e-8 * a.max_residual.max(1.0));
    }

    #[test]
    fn residual_report_is_consistent(seed in any::<u64>(), p in 2usize..=5) {
        let mut rng = common::rng(seed);
        let params = common::random_one_factor(p, 2, &mut rng);
        let data = random_table(p, &mut rng);
        let rep = bivariate_residuals(&params, &data, &tensor_grid(1, 8).unwrap()).unwrap();
        prop_assert_eq!(rep.entries.len(), 2 * p * (p - 1));
        let max = rep.entries.iter().filter_map(|c| c.residual).fold(0.0, f64::max);
        prop_assert_eq!(max, rep.max_residual);
        prop_assert!(rep.entries.iter().filter_map(|c| c.residual).all(|r| r >= 0.0));
        let n = data.n() as f64;
        for pair in rep.entries.chunks(4) {
            let e: f64 = pair.iter().map(|c| c.expected).sum();
            let o: f64 = pair.iter().map(|c| c.observed).sum();
            prop_assert!((e - n).abs() < 1e-8 * n);
            prop_assert_eq!(o, n);
        }
    }

    #[test]
    fn pattern_statistics_are_nonnegative(seed in any::<u64>(), p in 2usize..=5) {
        let mut rng = common::rng(seed);
        let params = common::random_one_factor(p, 2, &mut rng);
        let data = random_table(p, &mut rng);
        let t = pattern_fit_tests(&params, &data, &tensor_grid(1, 8).unwrap()).unwrap();
        prop_assert!(t.gf >= 0.0);
        prop_assert!(t.lr >= -1e-9);
    }
}
