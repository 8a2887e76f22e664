mod common;

use common::{dense_posterior, random_points};
use eatlab::bo::{bo_maximize, expected_improvement, gp_fit, propose_next, se_kernel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn posterior_matches_dense_solve() {
    for seed in 0..3 {
        let gp = gp_fit(&random_points(12, 3, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..10 {
            let q: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
            let (mu, var) = gp.predict(&q);
            let (mu_d, var_d) = dense_posterior(&gp, &q);
            assert!((mu - mu_d).abs() < 1e-8, "mean {mu} vs {mu_d}");
            assert!((var - var_d.max(0.0)).abs() < 1e-8, "var {var} vs {var_d}");
        }
    }
}

#[test]
fn posterior_reproduces_observations() {
    let pts = random_points(15, 3, 9);
    let gp = gp_fit(&pts).unwrap();
    for (x, y) in &pts {
        let (mu, var) = gp.predict(x);
        assert!((mu - y).abs() <= 3.0 * gp.noise_var.sqrt() + 1e-9, "{mu} vs {y}");
        assert!(var <= gp.noise_var + 1e-9);
    }
}

#[test]
fn kernel_is_symmetric_and_peaked() {
    let ls = [0.3, 0.5];
    assert_eq!(se_kernel(&[0.1, 0.2], &[0.1, 0.2], &ls, 2.0), 2.0);
    assert_eq!(se_kernel(&[0.1, 0.9], &[0.4, 0.2], &ls, 1.0), se_kernel(&[0.4, 0.2], &[0.1, 0.9], &ls, 1.0));
}

#[test]
fn ei_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let mu: f64 = rng.gen_range(-1.0..1.0);
        let sigma: f64 = rng.gen_range(0.2..2.0);
        let best: f64 = rng.gen_range(-0.5..0.5);
        let normal = Normal::new(mu, sigma).unwrap();
        let n = 1_000_000;
        let mc = (0..n).map(|_| (normal.sample(&mut rng) - best).max(0.0)).sum::<f64>() / n as f64;
        let ei = expected_improvement(mu, sigma, best);
        assert!((ei - mc).abs() / mc < 0.01, "ei {ei} vs mc {mc}");
    }
}

#[test]
fn proposal_explores_away_from_single_point() {
    let gp = gp_fit(&[(vec![0.4, 0.4, 0.4], 1.0)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = propose_next(&gp, 512, &mut rng);
    assert_ne!(x, vec![0.4, 0.4, 0.4]);
    let at_obs = gp.expected_improvement(&[0.4, 0.4, 0.4], 1.0);
    assert!(at_obs <= gp.noise_var.sqrt());
    assert!(gp.expected_improvement(&x, 1.0) > 10.0 * at_obs);
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn bo_finds_quadratic_optimum() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = |x: &[f64]| -(x[0] - 0.7).powi(2);
        let hist = bo_maximize(&mut f, 1, 3, 15, 4096, &mut rng).unwrap();
        assert_eq!(hist.len(), 15);
        let best = hist.iter().max_by(|a, b| a.value.total_cmp(&b.value)).unwrap();
        assert!((best.x[0] - 0.7).abs() < 0.05, "seed {seed}: {:?}", best.x);
        for w in hist.windows(2) {
            assert!(w[1].incumbent >= w[0].incumbent);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ei_is_nonnegative(mu in -5.0f64..5.0, sigma in 0.0f64..3.0, best in -5.0f64..5.0) {
        prop_assert!(expected_improvement(mu, sigma, best) >= 0.0);
    }

    #[test]
    fn proposals_stay_in_unit_box(seed in 0u64..1000) {
        let gp = gp_fit(&random_points(6, 3, seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = propose_next(&gp, 64, &mut rng);
        prop_assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
