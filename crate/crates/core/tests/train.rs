use eatlab::dataset::{collect, Dataset};
use eatlab::eabc::{EabcConfig, EabcModel};
use eatlab::eat::{EatConfig, EatModel, WindowBatch};
use eatlab::embodiment::training_grid;
use eatlab::env::EnvSpec;
use eatlab::gpt::GptConfig;
use eatlab::optim::{AdamConfig, AdamState};
use eatlab::policy::Expert;
use eatlab::train::{batch_loss, train, train_step, Learner, Schedule, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> Dataset {
    collect(&EnvSpec::default(), &Expert::tuned(), &training_grid(), 4, 11).unwrap()
}

fn eat(h: usize, with_e: bool, d: &Dataset) -> EatModel {
    let gpt = GptConfig { n_layers: 1, n_heads: 2, d_model: 16, max_tokens: 0, dropout_rate: 0.0 };
    EatModel::new(EatConfig::new(h, with_e, gpt), d.normalization.to_normalizer(EnvSpec::default().embodiment_bounds), 3).unwrap()
}

fn cfg(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 16,
        learning_rate: 1e-3,
        warmup_steps: iterations.min(10),
        schedule: Schedule::Cosine,
        log_every: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn params(m: &dyn Learner) -> Vec<u64> {
    m.params().tensors().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn same_seed_gives_identical_curves() {
    let d = data();
    let mut a = eat(4, true, &d);
    let mut b = eat(4, true, &d);
    let ra = train(&mut a, &d, &cfg(20), None).unwrap();
    let rb = train(&mut b, &d, &cfg(20), None).unwrap();
    assert_eq!(ra.to_csv(), rb.to_csv());
    assert_eq!(params(&a), params(&b));
    let mut c = eat(4, true, &d);
    let rc = train(&mut c, &d, &TrainConfig { seed: 6, ..cfg(20) }, None).unwrap();
    assert_ne!(ra.losses, rc.losses);
}

#[test]
fn first_loss_is_the_normalised_action_power() {
    let d = data();
    let mut m = eat(6, true, &d);
    let rep = train(&mut m, &d, &TrainConfig { batch_size: 64, ..cfg(1) }, None).unwrap();
    let first = rep.losses[0].1;
    assert!((first - 1.0).abs() < 0.2, "{first}");
}

#[test]
fn replaying_a_step_reproduces_the_post_step_loss() {
    let d = data();
    let mut m = eat(4, true, &d);
    train(&mut m, &d, &cfg(5), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let windows = d.sample_batch(4, 8, &mut rng).unwrap();
    let batch = WindowBatch::from_windows(&windows, &m.normalizer, &m.config.limits()).unwrap();
    let clone = m.clone();
    let adam = |m: &EatModel| AdamState::new(AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() }, m.store.tensors());
    let mut state = adam(&m);
    train_step(&mut m, &mut state, &batch, 1e-3, 1.0, None).unwrap();
    let recorded = batch_loss(&m, &batch).unwrap();
    let mut replay = clone;
    let mut state = adam(&replay);
    let pre = train_step(&mut replay, &mut state, &batch, 1e-3, 1.0, None).unwrap();
    assert_eq!(batch_loss(&replay, &batch).unwrap().to_bits(), recorded.to_bits());
    assert!(recorded < pre);
}

#[test]
fn vanilla_training_ignores_embodiment_labels() {
    let d = data();
    let mut shuffled = d.clone();
    let n = shuffled.trajectories.len();
    let labels: Vec<_> = d.trajectories.iter().map(|t| t.embodiment).collect();
    for (i, t) in shuffled.trajectories.iter_mut().enumerate() {
        t.embodiment = labels[(i * 7 + 3) % n];
    }
    assert_ne!(shuffled.trajectories, d.trajectories);
    let mut a = eat(4, false, &d);
    let mut b = eat(4, false, &shuffled);
    let ra = train(&mut a, &d, &cfg(15), None).unwrap();
    let rb = train(&mut b, &shuffled, &cfg(15), None).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(params(&a), params(&b));
}

#[test]
fn history_free_models_fit_worse() {
    let d = data();
    let tc = TrainConfig { iterations: 400, log_every: 50, ..cfg(400) };
    let mut full = eat(10, true, &d);
    let full_loss = train(&mut full, &d, &tc, None).unwrap().final_loss;
    let mut h1 = eat(1, true, &d);
    let h1_loss = train(&mut h1, &d, &TrainConfig { batch_size: 160, ..tc }, None).unwrap().final_loss;
    let norm = d.normalization.to_normalizer(EnvSpec::default().embodiment_bounds);
    let mut mlp = EabcModel::new(EabcConfig { hidden_widths: vec![32, 32], ..EabcConfig::default() }, norm, 3).unwrap();
    let mlp_loss = train(&mut mlp, &d, &TrainConfig { batch_size: 160, ..tc }, None).unwrap().final_loss;
    assert!(full_loss < h1_loss, "eat {full_loss}, h1 {h1_loss}");
    assert!(full_loss < mlp_loss, "eat {full_loss}, eabc {mlp_loss}");
}

#[test]
fn divergence_reports_the_iteration() {
    let d = data();
    let mut m = eat(4, true, &d);
    let tc = TrainConfig { learning_rate: 1e300, warmup_steps: 0, schedule: Schedule::Constant, grad_clip: f64::INFINITY, ..cfg(30) };
    match train(&mut m, &d, &tc, None) {
        Err(TrainError::NonFinite { iteration, last_finite }) => {
            assert!(iteration > 0);
            assert!(last_finite.is_some_and(f64::is_finite));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let d = data();
    let gpt = GptConfig { n_layers: 1, n_heads: 1, d_model: 4, max_tokens: 0, dropout_rate: 0.0 };
    let mut c = EatConfig::new(2, true, gpt);
    c.state_dim = 3;
    let mut m = EatModel::new(c, eatlab::eat::Normalizer::identity(3, 1), 0).unwrap();
    assert!(matches!(train(&mut m, &d, &cfg(1), None), Err(TrainError::Config(_))));
}
