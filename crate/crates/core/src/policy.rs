//! Controllers that act on an unfolding episode.

use crate::embodiment::EmbodimentVector;
use crate::env::{derive_dynamics_unchecked, lqr_gain, EnvSpec};

/// What a policy sees when asked for the next action.
///
/// `states` runs from the first observation up to the one awaiting an action;
/// `actions` holds every action already taken, so it is one shorter.
/// `disturbance` is privileged simulator state and must only be read by
/// teacher controllers.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeView<'a> {
    pub embodiment: EmbodimentVector,
    pub states: &'a [Vec<f64>],
    pub actions: &'a [f64],
    pub step: usize,
    pub disturbance: f64,
    pub spec: &'a EnvSpec,
}

impl EpisodeView<'_> {
    pub fn current_state(&self) -> &[f64] {
        self.states.last().expect("episode view holds at least one state")
    }

    pub fn velocity(&self) -> f64 {
        self.current_state()[0]
    }
}

pub trait Policy: Sync {
    fn act(&self, view: &EpisodeView<'_>) -> f64;

    fn label(&self) -> String;
}

/// Analytic LQR teacher with feed-forward and disturbance cancellation.
///
/// With `design = None` the controller is tuned for whichever body it drives;
/// with `Some(e)` it always uses the gains designed for `e`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert {
    pub design: Option<EmbodimentVector>,
}

impl Expert {
    pub fn tuned() -> Self {
        Self { design: None }
    }

    pub fn fixed(e: EmbodimentVector) -> Self {
        Self { design: Some(e) }
    }
}

impl Policy for Expert {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        let e = self.design.unwrap_or(view.embodiment);
        expert_action(view.velocity(), view.disturbance, &e, view.spec)
    }

    fn label(&self) -> String {
        match self.design {
            None => "expert".into(),
            Some(_) => "single-expert".into(),
        }
    }
}

/// `clip(K·(v* − v) + a_ff − d/gain, −1, 1)` with `a_ff = drag·v*/gain`.
pub fn expert_action(velocity: f64, disturbance: f64, e: &EmbodimentVector, spec: &EnvSpec) -> f64 {
    let p = derive_dynamics_unchecked(e);
    let k = lqr_gain(&p, spec.dt).expect("Riccati iteration converges for positive dynamics");
    let vt = spec.target_velocity;
    let a_ff = p.drag * vt / p.actuator_gain;
    (k * (vt - velocity) + a_ff - disturbance / p.actuator_gain).clamp(-1.0, 1.0)
}

/// The expert's feedback law without disturbance cancellation; the best a
/// controller can do from the current observation alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseBlind;

impl Policy for PhaseBlind {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        expert_action(view.velocity(), 0.0, &view.embodiment, view.spec)
    }

    fn label(&self) -> String {
        "phase-blind".into()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Zero;

impl Policy for Zero {
    fn act(&self, _: &EpisodeView<'_>) -> f64 {
        0.0
    }

    fn label(&self) -> String {
        "zero".into()
    }
}

/// Replays a fixed action sequence, holding the last value afterwards.
#[derive(Debug, Clone)]
pub struct Scripted(pub Vec<f64>);

impl Policy for Scripted {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        self.0.get(view.step).or(self.0.last()).copied().unwrap_or(0.0)
    }

    fn label(&self) -> String {
        "scripted".into()
    }
}
