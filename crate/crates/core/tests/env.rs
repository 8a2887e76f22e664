mod common;

use eatlab::embodiment::{evaluation_grid, training_grid, EmbodimentBounds, EmbodimentVector};
use eatlab::env::{derive_dynamics, lqr_gain, reward, run_episode, EnvSpec, NoiseProfile};
use eatlab::policy::{Expert, Scripted};
use proptest::prelude::*;

#[test]
fn lqr_gain_matches_grid_search() {
    let spec = EnvSpec::default();
    for e in evaluation_grid() {
        let p = derive_dynamics(&e, &spec.embodiment_bounds).unwrap();
        let k = lqr_gain(&p, spec.dt).unwrap();
        let grid = common::grid_gain(&p, spec.dt, 20.0, spec.episode_length);
        assert!((k - grid).abs() <= common::K_STEP, "{e:?}: riccati {k}, grid {grid}");
    }
}

#[test]
fn expert_is_near_its_ceiling_on_training_bodies() {
    let spec = EnvSpec::default();
    for e in training_grid() {
        let r = common::expert_ceiling_ratio(&e, &spec, 4);
        assert!(r >= 0.9, "{e:?}: {r}");
    }
}

#[test]
fn expert_dominates_its_gain_family_when_quiet() {
    let quiet = EnvSpec::default().with_noise(NoiseProfile::none());
    let e = EmbodimentVector::new(0.35, 0.15, 0.3);
    let expert = common::mean_return(&Expert::tuned(), &e, &quiet, 4);
    let ceiling = common::noiseless_ceiling(&e, &quiet, 4);
    assert!(expert <= ceiling + 1e-9);
    assert!(expert >= 0.95 * ceiling, "{expert} vs {ceiling}");
}

#[test]
fn expert_return_falls_with_limb_imbalance() {
    let quiet = EnvSpec::default().with_noise(NoiseProfile::none());
    for torso in [0.2, 0.3, 0.4] {
        // Mean limb length fixed at 0.225 so only the imbalance changes.
        let returns: Vec<f64> = [0.0, 0.0125, 0.025, 0.05, 0.075]
            .iter()
            .map(|&d| common::mean_return(&Expert::tuned(), &EmbodimentVector::new(torso, 0.225 + d, 0.225 - d), &quiet, 4))
            .collect();
        assert!(returns.windows(2).all(|w| w[1] < w[0]), "torso {torso}: {returns:?}");
    }
}

fn body() -> impl Strategy<Value = EmbodimentVector> {
    let b = EmbodimentBounds::evaluation();
    (b.torso.0..=b.torso.1, b.front.0..=b.front.1, b.hind.0..=b.hind.1).prop_map(|(t, f, h)| EmbodimentVector::new(t, f, h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episodes_are_bit_exact_per_seed(e in body(), seed in any::<u64>(), a in -1.5f64..1.5) {
        let spec = EnvSpec::default().with_noise(NoiseProfile::noisy());
        let policy = Scripted(vec![a, -a, 0.5 * a]);
        let x = run_episode(&policy, &e, &spec, seed).unwrap();
        let y = run_episode(&policy, &e, &spec, seed).unwrap();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn returns_stay_within_reward_bounds(e in body(), seed in any::<u64>(), actions in prop::collection::vec(-1.0f64..=1.0, 1..40)) {
        let spec = EnvSpec::default();
        let ep = run_episode(&Scripted(actions), &e, &spec, seed).unwrap();
        prop_assert!(ep.total_return <= ep.len() as f64);
        prop_assert!(ep.total_return >= spec.return_floor());
        prop_assert!(ep.rewards.iter().all(|&r| r <= 1.0 && r >= EnvSpec::min_reward()));
    }

    #[test]
    fn reward_never_exceeds_one(v in -10.0f64..10.0, a in -1.0f64..=1.0, prev in -1.0f64..=1.0) {
        prop_assert!(reward(v, a, prev, &EnvSpec::default()) <= 1.0);
    }

    #[test]
    fn limb_swap_leaves_dynamics_unchanged(e in body()) {
        let bounds = EmbodimentBounds::evaluation();
        let swapped = EmbodimentVector::new(e.torso, e.hind, e.front);
        prop_assert_eq!(derive_dynamics(&e, &bounds).unwrap(), derive_dynamics(&swapped, &bounds).unwrap());
    }
}
