mod common;

use common::{ks_distance, toy_model, toy_posterior_cdf};
use iterlace_core::calibration::{rank_chi_square, sbc_run, simulate_prior_predictive, FitSampler};
use iterlace_core::expr::parse_expr;
use iterlace_core::inference::{fit, generate, ExprEvaluator};
use iterlace_core::model::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

const GAMMA: f64 = 0.5;

fn simulated_toy(dir: &std::path::Path, n: usize, seed: u64) -> (Model, Vec<f64>) {
    let template = toy_model(dir, &vec![0.0; n], GAMMA);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sim, _) = simulate_prior_predictive(&template, &mut rng).unwrap();
    let y = sim.likelihoods[0].y.clone();
    (toy_model(dir, &y, GAMMA), y)
}

#[test]
fn posterior_matches_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let (model, y) = simulated_toy(dir.path(), 100, 42);
    let f = fit(&model).unwrap();
    assert!(f.converged);
    let expr = parse_expr("lambda").unwrap();
    let draws: Vec<f64> = generate(&f, &expr, None, 20_000, 7).unwrap().into_iter().map(|s| s[0]).collect();
    let d = ks_distance(&draws, toy_posterior_cdf(&y, GAMMA));
    assert!(d <= 0.05, "KS distance {d}");
}

// Exact conjugate sampler in place of the fitter.
fn gamma_oracle(model: &Model, _: &ExprEvaluator, j: usize, rng: &mut ChaCha8Rng) -> iterlace_core::Result<Vec<f64>> {
    let y = &model.likelihoods[0].y;
    let post = Gamma::new(1.0 + y.iter().sum::<f64>(), 1.0 / (GAMMA + y.len() as f64)).unwrap();
    Ok((0..j).map(|_| post.sample(rng)).collect())
}

#[test]
fn oracle_ranks_are_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path(), &[0.0; 10], GAMMA);
    let h = parse_expr("lambda").unwrap();
    let r = sbc_run(&model, &h, 2000, 8, Some(10), 3, &gamma_oracle).unwrap();
    assert_eq!(r.failures, 0);
    assert_eq!(r.w_values.len(), 2000);
    let (_, p) = rank_chi_square(&r.ranks, 8).unwrap();
    assert!(p > 0.01, "chi-square p {p}");
    let r = sbc_run(&model, &h, 300, 200, None, 4, &gamma_oracle).unwrap();
    assert!(r.ks_pvalue > 0.05, "KS p {}", r.ks_pvalue);
}

#[test]
fn sbc_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path(), &[0.0; 20], GAMMA);
    let h = parse_expr("lambda").unwrap();
    let a = sbc_run(&model, &h, 6, 50, None, 9, &FitSampler).unwrap();
    let b = sbc_run(&model, &h, 6, 50, None, 9, &FitSampler).unwrap();
    assert_eq!(a, b);
    assert!(a.w_values.iter().all(|w| (-0.01..1.0).contains(w)));
    assert!(sbc_run(&model, &h, 2, 5, Some(3), 9, &FitSampler).is_err());
}
