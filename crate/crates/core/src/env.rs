//! Morphology-dependent one-dimensional locomotion.
//!
//! A body of mass `1 + 2·torso` is driven by a thrust actuator whose gain grows
//! with mean limb length and slowed by drag that grows with limb asymmetry.
//! A hidden sinusoidal force with random phase acts on the body; the
//! observation is `(velocity, measured acceleration)`, so the phase cannot be
//! read off a single observation.
//!
//! The Stepper variant adds a terrain step: once the body passes
//! `step_position` the drag multiplies and a one-off backward impulse hits the
//! body, scaled by how far the limb asymmetry is from `optimal_asymmetry`.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embodiment::{EmbodimentBounds, EmbodimentError, EmbodimentVector};
use crate::policy::{EpisodeView, Policy};
use crate::seeding;

/// Observation width: velocity and acceleration.
pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 1;

const RICCATI_TOL: f64 = 1e-12;
const RICCATI_MAX_ITERS: usize = 1_000_000;
/// State and action weights of the expert's quadratic cost.
pub const LQR_STATE_COST: f64 = 1.0;
pub const LQR_ACTION_COST: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Embodiment(#[from] EmbodimentError),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("episode already finished at step {0}")]
    Finished(usize),
    #[error("invalid environment spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Half-width of the per-episode multiplicative gain perturbation.
    pub gain_jitter: f64,
    pub mass_jitter: f64,
    /// Per-step probability of a random velocity push.
    pub push_probability: f64,
    /// Standard deviation of a push, m/s.
    pub push_amplitude: f64,
    /// Scales every amplitude; 1 for training conditions, 2 for the noisy
    /// evaluation.
    pub multiplier: f64,
}

impl NoiseProfile {
    pub fn training() -> Self {
        Self { gain_jitter: 0.05, mass_jitter: 0.05, push_probability: 0.02, push_amplitude: 0.05, multiplier: 1.0 }
    }

    pub fn noisy() -> Self {
        Self { multiplier: 2.0, ..Self::training() }
    }

    pub fn none() -> Self {
        Self { gain_jitter: 0.0, mass_jitter: 0.0, push_probability: 0.0, push_amplitude: 0.0, multiplier: 1.0 }
    }

    pub fn with_multiplier(self, multiplier: f64) -> Self {
        Self { multiplier, ..self }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.multiplier != 1.0 && self.multiplier != 2.0 {
            return Err(EnvError::Spec(format!("noise multiplier must be 1 or 2, got {}", self.multiplier)));
        }
        let amps = [self.gain_jitter, self.mass_jitter, self.push_amplitude];
        if amps.iter().any(|a| !a.is_finite() || *a < 0.0) || !(0.0..=1.0).contains(&self.push_probability) {
            return Err(EnvError::Spec("noise amplitudes must be non-negative, probability in [0, 1]".into()));
        }
        if self.gain_jitter * self.multiplier >= 1.0 || self.mass_jitter * self.multiplier >= 1.0 {
            return Err(EnvError::Spec("jitter must keep gain and mass positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepperSpec {
    pub step_position: f64,
    pub drag_factor: f64,
    /// Impulse per meter of asymmetry error, N·s/m.
    pub impulse_gain: f64,
    pub optimal_asymmetry: f64,
    pub fitness_cap: f64,
}

impl Default for StepperSpec {
    fn default() -> Self {
        Self { step_position: 5.0, drag_factor: 2.0, impulse_gain: 60.0, optimal_asymmetry: -0.03, fitness_cap: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cruiser,
    Stepper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub episode_length: usize,
    pub dt: f64,
    pub target_velocity: f64,
    pub embodiment_bounds: EmbodimentBounds,
    pub noise: NoiseProfile,
    pub disturbance_amplitude: f64,
    /// Period of the hidden force, in steps.
    pub disturbance_period: f64,
    /// Width `w` of the velocity-tracking term `exp(−(v − v*)²/w)`.
    pub tracking_width: f64,
    /// An episode ends early once `|v|` exceeds this multiple of the target.
    pub instability_factor: f64,
    pub task: Task,
    pub stepper: StepperSpec,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            episode_length: 200,
            dt: 0.05,
            target_velocity: 1.0,
            embodiment_bounds: EmbodimentBounds::evaluation(),
            noise: NoiseProfile::training(),
            disturbance_amplitude: 0.3,
            disturbance_period: 100.0,
            tracking_width: 0.02,
            instability_factor: 5.0,
            task: Task::Cruiser,
            stepper: StepperSpec::default(),
        }
    }
}

impl EnvSpec {
    pub fn stepper() -> Self {
        Self { task: Task::Stepper, embodiment_bounds: EmbodimentBounds::evolution(), ..Self::default() }
    }

    pub fn with_noise(self, noise: NoiseProfile) -> Self {
        Self { noise, ..self }
    }

    /// Same spec without noise or hidden force.
    pub fn quiet(self) -> Self {
        Self { noise: NoiseProfile::none(), disturbance_amplitude: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.embodiment_bounds.validate()?;
        self.noise.validate()?;
        let positive = [self.dt, self.target_velocity, self.disturbance_period, self.tracking_width, self.instability_factor];
        if self.episode_length == 0 || positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(EnvError::Spec("episode length, dt, target, period, width and instability must be positive".into()));
        }
        if !self.disturbance_amplitude.is_finite() || self.disturbance_amplitude < 0.0 {
            return Err(EnvError::Spec("disturbance amplitude must be non-negative".into()));
        }
        Ok(())
    }

    /// Hidden force at `step` for episode phase `phase`.
    pub fn disturbance(&self, step: usize, phase: f64) -> f64 {
        self.disturbance_amplitude * (2.0 * PI * step as f64 / self.disturbance_period + phase).sin()
    }

    /// Smallest possible per-step reward.
    pub fn min_reward() -> f64 {
        -0.05 - 0.01 * 4.0
    }

    /// Lowest achievable episode return; failed rollouts score this.
    pub fn return_floor(&self) -> f64 {
        Self::min_reward() * self.episode_length as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub mass: f64,
    pub actuator_gain: f64,
    pub drag: f64,
    /// Drag multiplier caused by limb asymmetry, `1 + 3·|front − hind|`.
    pub asymmetry_penalty: f64,
}

pub fn derive_dynamics(e: &EmbodimentVector, bounds: &EmbodimentBounds) -> Result<DynamicsParams, EnvError> {
    bounds.check(e)?;
    Ok(derive_dynamics_unchecked(e))
}

pub(crate) fn derive_dynamics_unchecked(e: &EmbodimentVector) -> DynamicsParams {
    let asymmetry_penalty = 1.0 + 3.0 * (e.front - e.hind).abs();
    DynamicsParams {
        mass: 1.0 + 2.0 * e.torso,
        actuator_gain: 4.0 * (e.front + e.hind) / 2.0,
        drag: 0.5 * asymmetry_penalty,
        asymmetry_penalty,
    }
}

/// Infinite-horizon LQR gain of `v' = A·v + B·a` linearised around the
/// target, from the scalar discrete Riccati recursion.
pub fn lqr_gain(p: &DynamicsParams, dt: f64) -> Option<f64> {
    let a = 1.0 - dt * p.drag / p.mass;
    let b = dt * p.actuator_gain / p.mass;
    let (q, r) = (LQR_STATE_COST, LQR_ACTION_COST);
    let mut s = q;
    for _ in 0..RICCATI_MAX_ITERS {
        let next = q + a * a * s - (a * b * s).powi(2) / (r + b * b * s);
        if !next.is_finite() {
            return None;
        }
        let done = (next - s).abs() <= RICCATI_TOL;
        s = next;
        if done {
            return Some(a * b * s / (r + b * b * s));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub previous_action: f64,
    /// Hidden force phase; never part of the observation.
    pub phase: f64,
    pub step_index: usize,
    /// Per-episode multiplicative noise on gain and mass.
    pub gain_scale: f64,
    pub mass_scale: f64,
    /// Stepper only: whether the terrain step has been crossed.
    pub crossed_step: bool,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        vec![self.velocity, self.acceleration]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub unstable: bool,
}

/// `exp(−(v − v*)²/w) − 0.05·a² − 0.01·(a − a_prev)²`.
pub fn reward(velocity: f64, action: f64, previous_action: f64, spec: &EnvSpec) -> f64 {
    let err = velocity - spec.target_velocity;
    (-err * err / spec.tracking_width).exp() - 0.05 * action * action - 0.01 * (action - previous_action).powi(2)
}

/// Draws the initial state of an episode.
pub fn reset(spec: &EnvSpec, rng: &mut ChaCha8Rng) -> EnvState {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let n = &spec.noise;
    let gain_u: f64 = rng.gen_range(-1.0..=1.0);
    let mass_u: f64 = rng.gen_range(-1.0..=1.0);
    EnvState {
        position: 0.0,
        velocity: 0.0,
        acceleration: 0.0,
        previous_action: 0.0,
        phase,
        step_index: 0,
        gain_scale: 1.0 + n.gain_jitter * n.multiplier * gain_u,
        mass_scale: 1.0 + n.mass_jitter * n.multiplier * mass_u,
        crossed_step: false,
    }
}

/// Advances one control step. The action is clipped to `[−1, 1]`.
pub fn step(
    state: &EnvState,
    action: f64,
    p: &DynamicsParams,
    e: &EmbodimentVector,
    spec: &EnvSpec,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, EnvError> {
    if state.step_index >= spec.episode_length {
        return Err(EnvError::Finished(state.step_index));
    }
    if !action.is_finite() {
        return Err(EnvError::NonFinite("action"));
    }
    let a = action.clamp(-1.0, 1.0);
    let d = spec.disturbance(state.step_index, state.phase);
    let mass = p.mass * state.mass_scale;
    let gain = p.actuator_gain * state.gain_scale;
    let drag = if state.crossed_step { p.drag * spec.stepper.drag_factor } else { p.drag };
    let mut v = state.velocity + spec.dt * (gain * a - drag * state.velocity + d) / mass;

    // Both draws happen every step so the stream stays aligned across
    // branches.
    let u: f64 = rng.gen();
    let z: f64 = StandardNormal.sample(rng);
    if u < spec.noise.push_probability {
        v += z * spec.noise.push_amplitude * spec.noise.multiplier;
    }

    let mut x = state.position + spec.dt * v;
    let mut crossed_step = state.crossed_step;
    if spec.task == Task::Stepper && !crossed_step && x >= spec.stepper.step_position {
        crossed_step = true;
        let miss = (e.front - e.hind - spec.stepper.optimal_asymmetry).abs();
        v -= spec.stepper.impulse_gain * miss / mass;
        x = spec.stepper.step_position.max(state.position);
    }
    if !v.is_finite() || !x.is_finite() {
        return Err(EnvError::NonFinite("state"));
    }

    let r = reward(v, a, state.previous_action, spec);
    let unstable = v.abs() > spec.instability_factor * spec.target_velocity;
    let next = EnvState {
        position: x,
        velocity: v,
        acceleration: (v - state.velocity) / spec.dt,
        previous_action: a,
        phase: state.phase,
        step_index: state.step_index + 1,
        gain_scale: state.gain_scale,
        mass_scale: state.mass_scale,
        crossed_step,
    };
    Ok(StepOutcome { state: next, reward: r, done: unstable || next.step_index >= spec.episode_length, unstable })
}

/// Everything recorded from one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub embodiment: EmbodimentVector,
    /// Observation before each action.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub total_return: f64,
    pub final_position: f64,
    pub unstable: bool,
    pub seed: u64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Runs `policy` on body `e` until the episode ends. The embodiment is checked
/// against the spec bounds.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &P,
    e: &EmbodimentVector,
    spec: &EnvSpec,
    seed: u64,
) -> Result<Episode, EnvError> {
    let p = derive_dynamics(e, &spec.embodiment_bounds)?;
    let mut rng = seeding::rng(seed, &[0xE1_5EED]);
    let mut state = reset(spec, &mut rng);
    let t = spec.episode_length;
    let mut states = Vec::with_capacity(t);
    let mut actions = Vec::with_capacity(t);
    let mut rewards = Vec::with_capacity(t);
    let unstable;
    loop {
        states.push(state.observation());
        let view = EpisodeView {
            embodiment: *e,
            states: &states,
            actions: &actions,
            step: state.step_index,
            disturbance: spec.disturbance(state.step_index, state.phase),
            spec,
        };
        let a = policy.act(&view);
        if !a.is_finite() {
            return Err(EnvError::NonFinite("policy action"));
        }
        let out = step(&state, a, &p, e, spec, &mut rng)?;
        actions.push(out.state.previous_action);
        rewards.push(out.reward);
        state = out.state;
        if out.done {
            unstable = out.unstable;
            break;
        }
    }
    Ok(Episode {
        embodiment: *e,
        total_return: rewards.iter().sum(),
        states,
        actions,
        rewards,
        final_position: state.position,
        unstable,
        seed,
    })
}

/// Mean over `trials` Stepper episodes of the distance covered, capped.
/// Seeds derive from `seed` and the trial index only.
pub fn stepper_fitness<P: Policy + ?Sized>(
    e: &EmbodimentVector,
    policy: &P,
    spec: &EnvSpec,
    trials: usize,
    seed: u64,
) -> Result<f64, EnvError> {
    if spec.task != Task::Stepper {
        return Err(EnvError::Spec("stepper fitness needs the stepper task".into()));
    }
    let mut total = 0.0;
    for trial in 0..trials {
        let ep = run_episode(policy, e, spec, seeding::derive(seed, &[trial as u64]))?;
        total += ep.final_position.min(spec.stepper.fitness_cap);
    }
    Ok(total / trials.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{expert_action, Expert, PhaseBlind, Scripted, Zero};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn nominal() -> EmbodimentVector {
        EmbodimentVector::new(0.3, 0.2, 0.2)
    }

    #[test]
    fn dynamics_of_nominal_body() {
        let p = derive_dynamics(&nominal(), &EmbodimentBounds::evaluation()).unwrap();
        assert_abs_diff_eq!(p.mass, 1.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.actuator_gain, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(p.drag, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn swapping_limbs_keeps_dynamics() {
        let a = derive_dynamics_unchecked(&EmbodimentVector::new(0.25, 0.15, 0.3));
        let b = derive_dynamics_unchecked(&EmbodimentVector::new(0.25, 0.3, 0.15));
        assert_eq!(a, b);
        let sym = derive_dynamics_unchecked(&EmbodimentVector::new(0.25, 0.2, 0.2));
        assert!(sym.drag < a.drag);
    }

    #[test]
    fn out_of_bounds_body_rejected() {
        let e = EmbodimentVector::new(0.5, 0.2, 0.2);
        assert!(derive_dynamics(&e, &EmbodimentBounds::evaluation()).is_err());
    }

    #[test]
    fn reward_examples() {
        let s = EnvSpec::default();
        assert_eq!(reward(1.0, 0.0, 0.0, &s), 1.0);
        assert_abs_diff_eq!(reward(1.0, 1.0, 1.0, &s), 0.95, epsilon = 1e-15);
    }

    #[test]
    fn equilibrium_without_action_or_force() {
        let spec = EnvSpec::default().quiet();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = reset(&spec, &mut rng);
        let p = derive_dynamics_unchecked(&nominal());
        let out = step(&s0, 0.0, &p, &nominal(), &spec, &mut rng).unwrap();
        assert_eq!(out.state.velocity, 0.0);
        assert_eq!(out.state.position, 0.0);
        assert_eq!(out.state.step_index, 1);
    }

    #[test]
    fn feedforward_action_holds_target_velocity() {
        let spec = EnvSpec::default().quiet();
        for e in crate::embodiment::training_grid() {
            let p = derive_dynamics_unchecked(&e);
            let a_star = p.drag * spec.target_velocity / p.actuator_gain;
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut s = reset(&spec, &mut rng);
            s.velocity = spec.target_velocity;
            for _ in 0..100 {
                s = step(&s, a_star, &p, &e, &spec, &mut rng).unwrap().state;
            }
            assert!((s.velocity - spec.target_velocity).abs() < 1e-9);
        }
    }

    #[test]
    fn expert_at_target_without_force_plays_feedforward() {
        let spec = EnvSpec::default();
        let e = nominal();
        let p = derive_dynamics_unchecked(&e);
        assert_eq!(expert_action(1.0, 0.0, &e, &spec), p.drag / p.actuator_gain);
    }

    #[test]
    fn noisy_episodes_depend_on_seed() {
        let spec = EnvSpec::default().with_noise(NoiseProfile::noisy());
        let script = Scripted(vec![0.7; 200]);
        let a = run_episode(&script, &nominal(), &spec, 1).unwrap();
        let b = run_episode(&script, &nominal(), &spec, 2).unwrap();
        assert_ne!(a.states, b.states);
        let c = run_episode(&script, &nominal(), &spec, 1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn nan_action_is_rejected() {
        let spec = EnvSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = reset(&spec, &mut rng);
        let p = derive_dynamics_unchecked(&nominal());
        assert!(step(&s, f64::NAN, &p, &nominal(), &spec, &mut rng).is_err());
    }

    #[test]
    fn zero_policy_matches_closed_form_recursion() {
        // v' = v(1 − dt·c/m) + dt·d/m, computed here from the formulas alone.
        let spec = EnvSpec { noise: NoiseProfile::none(), ..EnvSpec::default() };
        let e = EmbodimentVector::new(0.35, 0.15, 0.3);
        let ep = run_episode(&Zero, &e, &spec, 9).unwrap();
        let mut rng = seeding::rng(9, &[0xE1_5EED]);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let (m, c) = (1.0 + 0.7, 0.5 * (1.0 + 3.0 * 0.15));
        let mut v: f64 = 0.0;
        let mut expected = 0.0;
        for k in 0..200 {
            let d = 0.3 * (2.0 * PI * k as f64 / 100.0 + phase).sin();
            v += 0.05 * (d - c * v) / m;
            expected += (-(v - 1.0).powi(2) / 0.02).exp();
        }
        assert_abs_diff_eq!(ep.total_return, expected, epsilon = 1e-12);
        let still = run_episode(&Zero, &e, &spec.quiet(), 9).unwrap();
        assert_abs_diff_eq!(still.total_return, 200.0 * (-1.0f64 / 0.02).exp(), epsilon = 1e-30);
    }

    #[test]
    fn hidden_force_opens_a_gap_between_expert_and_phase_blind() {
        let spec = EnvSpec::default();
        let grid = crate::embodiment::evaluation_grid();
        let mean = |p: &dyn Policy| {
            grid.iter().map(|e| run_episode(p, e, &spec, e.seed_key()).unwrap().total_return).sum::<f64>()
                / grid.len() as f64
        };
        let expert = mean(&Expert::tuned());
        let blind = mean(&PhaseBlind);
        assert!(blind < 0.9 * expert, "expert {expert}, blind {blind}");
    }

    #[test]
    fn stepper_rewards_the_preferred_asymmetry() {
        let spec = EnvSpec::stepper();
        let base = stepper_fitness(&nominal(), &Expert::tuned(), &spec, 5, 3).unwrap();
        let tuned =
            stepper_fitness(&EmbodimentVector::new(0.3, 0.185, 0.215), &Expert::tuned(), &spec, 5, 3).unwrap();
        assert!(tuned > base, "{tuned} vs {base}");
        let idle = stepper_fitness(&nominal(), &Zero, &spec, 3, 3).unwrap();
        assert!(idle.abs() < 0.5, "{idle}");
        assert!(base <= spec.stepper.fitness_cap);
    }
}
