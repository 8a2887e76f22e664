//! Embodiment-aware transformer policy.
//!
//! Each timestep contributes the tokens `(e, s, a)`: every modality goes through
//! its own linear layer and layer norm, then the learned embedding of the
//! absolute episode timestep is added. The action for timestep `t` is read from
//! the hidden state of the `s` token of `t`, so under the causal mask it sees
//! `e₁..e_t, s₁..s_t, a₁..a_{t−1}`. Without the embodiment token the same code
//! gives the plain decision-transformer-style baseline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_atomic, CheckpointError, ParamStore};
use crate::embodiment::{EmbodimentBounds, EmbodimentVector, EMBODIMENT_DIM};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::gpt::{self, Gpt, GptConfig, GptError, INIT_STD};
use crate::graph::{Dropout, Graph, Var};
use crate::policy::{EpisodeView, Policy};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EatError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid window: {0}")]
    Window(String),
    #[error("timestep {t} outside the episode table of {max} steps")]
    Timestep { t: usize, max: usize },
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("sidecar {path}: {msg}")]
    Sidecar { path: String, msg: String },
}

pub type Result<T, E = EatError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EatConfig {
    /// Context length in timesteps.
    pub context_len: usize,
    pub include_embodiment_token: bool,
    pub state_dim: usize,
    pub action_dim: usize,
    pub embodiment_dim: usize,
    /// Size of the timestep table, the longest episode the model can see.
    pub max_timestep: usize,
    /// Scale of the sinusoidal pattern the timestep table starts from.
    pub timestep_init_scale: f64,
    pub gpt: GptConfig,
}

impl Default for EatConfig {
    fn default() -> Self {
        Self::new(20, true, GptConfig::default())
    }
}

impl EatConfig {
    /// Config for the environment's dimensions with `gpt.max_tokens` sized to
    /// the context.
    pub fn new(context_len: usize, include_embodiment_token: bool, gpt: GptConfig) -> Self {
        let mut c = Self {
            context_len,
            include_embodiment_token,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            embodiment_dim: EMBODIMENT_DIM,
            max_timestep: 200,
            timestep_init_scale: 0.3,
            gpt,
        };
        c.gpt.max_tokens = c.tokens_per_step() * context_len;
        c
    }

    pub fn tokens_per_step(&self) -> usize {
        if self.include_embodiment_token {
            3
        } else {
            2
        }
    }

    pub fn limits(&self) -> WindowLimits {
        WindowLimits {
            context_len: self.context_len,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            max_timestep: self.max_timestep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gpt.validate()?;
        if self.context_len == 0 || self.state_dim == 0 || self.action_dim == 0 || self.embodiment_dim == 0 {
            return Err(EatError::Config("context length and dimensions must be positive".into()));
        }
        if self.embodiment_dim != EMBODIMENT_DIM {
            return Err(EatError::Config(format!("embodiment_dim must be {EMBODIMENT_DIM}")));
        }
        if self.gpt.max_tokens != self.tokens_per_step() * self.context_len {
            return Err(EatError::Config(format!(
                "gpt.max_tokens {} must equal {}·H = {}",
                self.gpt.max_tokens,
                self.tokens_per_step(),
                self.tokens_per_step() * self.context_len
            )));
        }
        if self.max_timestep == 0 || !self.timestep_init_scale.is_finite() || self.timestep_init_scale < 0.0 {
            return Err(EatError::Config("timestep table must be non-empty with a finite init scale".into()));
        }
        Ok(())
    }
}

/// Shape constraints a model places on its input windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLimits {
    pub context_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub max_timestep: usize,
}

/// Affine maps between raw and model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    /// Embodiment components map to `[−1, 1]` over these bounds.
    pub embodiment_bounds: EmbodimentBounds,
}

impl Normalizer {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            embodiment_bounds: EmbodimentBounds::evaluation(),
        }
    }

    pub fn state(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(s.iter().zip(&self.state_mean).zip(&self.state_std).map(|((x, m), sd)| (x - m) / sd));
    }

    pub fn action(&self, a: &[f64], out: &mut Vec<f64>) {
        out.extend(a.iter().zip(&self.action_mean).zip(&self.action_std).map(|((x, m), sd)| (x - m) / sd));
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.action_mean).zip(&self.action_std).map(|((x, m), sd)| x * sd + m).collect()
    }

    pub fn embodiment(&self, e: &EmbodimentVector) -> [f64; EMBODIMENT_DIM] {
        self.embodiment_bounds.normalize(e)
    }
}

/// `h` consecutive timesteps of one trajectory in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWindow {
    pub embodiment: EmbodimentVector,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub timesteps: Vec<usize>,
    /// Regression targets; when empty the window's own actions are used.
    pub labels: Vec<Vec<f64>>,
}

impl TokenWindow {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self, config: &WindowLimits) -> Result<()> {
        let h = self.states.len();
        if h == 0 || h > config.context_len {
            return Err(EatError::Window(format!("length {h} outside 1..={}", config.context_len)));
        }
        if self.actions.len() != h || self.timesteps.len() != h || !(self.labels.is_empty() || self.labels.len() == h) {
            return Err(EatError::Window("states, actions, labels and timesteps must align".into()));
        }
        if self.states.iter().any(|s| s.len() != config.state_dim) {
            return Err(EatError::Window(format!("state width must be {}", config.state_dim)));
        }
        if self.actions.iter().chain(&self.labels).any(|a| a.len() != config.action_dim) {
            return Err(EatError::Window(format!("action width must be {}", config.action_dim)));
        }
        if self.timesteps.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(EatError::Window("timesteps must be consecutive".into()));
        }
        let last = *self.timesteps.last().unwrap();
        if last >= config.max_timestep {
            return Err(EatError::Timestep { t: last, max: config.max_timestep });
        }
        Ok(())
    }
}

/// Equal-length windows stacked and normalised for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub h: usize,
    /// `[batch × embodiment_dim]`.
    pub embodiments: Vec<f64>,
    /// `[batch·h × state_dim]`.
    pub states: Vec<f64>,
    /// `[batch·h × action_dim]`.
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// `[batch·h × action_dim]` regression targets.
    pub targets: Vec<f64>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[TokenWindow], norm: &Normalizer, config: &WindowLimits) -> Result<Self> {
        let h = windows.first().map(TokenWindow::len).ok_or_else(|| EatError::Window("empty batch".into()))?;
        let b = windows.len();
        let mut out = WindowBatch {
            batch: b,
            h,
            embodiments: Vec::with_capacity(b * EMBODIMENT_DIM),
            states: Vec::with_capacity(b * h * config.state_dim),
            actions: Vec::with_capacity(b * h * config.action_dim),
            timesteps: Vec::with_capacity(b * h),
            targets: Vec::with_capacity(b * h * config.action_dim),
        };
        for w in windows {
            w.validate(config)?;
            if w.len() != h {
                return Err(EatError::Window("windows in a batch must share a length".into()));
            }
            out.embodiments.extend(norm.embodiment(&w.embodiment));
            for s in &w.states {
                norm.state(s, &mut out.states);
            }
            for a in &w.actions {
                norm.action(a, &mut out.actions);
            }
            out.timesteps.extend(&w.timesteps);
            for a in if w.labels.is_empty() { &w.actions } else { &w.labels } {
                norm.action(a, &mut out.targets);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct ModalityParams {
    w: usize,
    b: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone)]
pub struct EatModel {
    pub config: EatConfig,
    pub normalizer: Normalizer,
    pub store: ParamStore,
    gpt: Gpt,
    embed_e: Option<ModalityParams>,
    embed_s: ModalityParams,
    embed_a: ModalityParams,
    timestep_table: usize,
    head_w: usize,
    head_b: usize,
}

fn register_modality(store: &mut ParamStore, name: &str, in_dim: usize, d: usize, rng: &mut ChaCha8Rng) -> ModalityParams {
    ModalityParams {
        w: store.push(format!("embed.{name}.w"), Tensor::randn(&[in_dim, d], INIT_STD, rng)),
        b: store.push(format!("embed.{name}.b"), Tensor::zeros(&[d])),
        ln_g: store.push(format!("embed.{name}.ln.g"), Tensor::full(&[d], 1.0)),
        ln_b: store.push(format!("embed.{name}.ln.b"), Tensor::zeros(&[d])),
    }
}

/// Sinusoidal position pattern, `[n × d]`.
fn sinusoid_table(n: usize, d: usize, scale: f64) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in (0..d).step_by(2) {
            let freq = (-(1000.0f64).ln() * i as f64 / d as f64).exp();
            let angle = pos as f64 * freq;
            data[pos * d + i] = scale * angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = scale * angle.cos();
            }
        }
    }
    Tensor::new(vec![n, d], data).expect("table shape")
}

impl EatModel {
    pub fn new(config: EatConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.gpt.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed_e = config
            .include_embodiment_token
            .then(|| register_modality(&mut store, "e", config.embodiment_dim, d, &mut rng));
        let embed_s = register_modality(&mut store, "s", config.state_dim, d, &mut rng);
        let embed_a = register_modality(&mut store, "a", config.action_dim, d, &mut rng);
        let table = if config.timestep_init_scale > 0.0 {
            sinusoid_table(config.max_timestep, d, config.timestep_init_scale)
        } else {
            Tensor::randn(&[config.max_timestep, d], INIT_STD, &mut rng)
        };
        let timestep_table = store.push("embed.timestep", table);
        let gpt = Gpt::init(config.gpt, &mut store, "gpt", &mut rng)?;
        let head_w = store.push("head.w", Tensor::zeros(&[d, config.action_dim]));
        let head_b = store.push("head.b", Tensor::zeros(&[config.action_dim]));
        Ok(Self { config, normalizer, store, gpt, embed_e, embed_s, embed_a, timestep_table, head_w, head_b })
    }

    pub fn gpt(&self) -> &Gpt {
        &self.gpt
    }

    fn embed_modality(&self, g: &mut Graph, vars: &[Var], p: ModalityParams, x: Var) -> Result<Var> {
        let h = g.linear(x, vars[p.w], vars[p.b])?;
        Ok(g.layer_norm(h, vars[p.ln_g], vars[p.ln_b])?)
    }

    /// Token embeddings `[batch·k·h × d_model]` in per-timestep `(e, s, a)`
    /// order, `k` tokens per timestep.
    pub fn embed(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch) -> Result<Var> {
        let c = &self.config;
        let (b, h) = (batch.batch, batch.h);
        if h == 0 || h > c.context_len {
            return Err(EatError::Window(format!("length {h} outside 1..={}", c.context_len)));
        }
        if let Some(&t) = batch.timesteps.iter().find(|&&t| t >= c.max_timestep) {
            return Err(EatError::Timestep { t, max: c.max_timestep });
        }
        let rows = b * h;
        let s = g.constant(Tensor::new(vec![rows, c.state_dim], batch.states.clone())?);
        let a = g.constant(Tensor::new(vec![rows, c.action_dim], batch.actions.clone())?);
        let te = g.gather_rows(vars[self.timestep_table], &batch.timesteps)?;

        let mut blocks = Vec::with_capacity(3);
        if let Some(pe) = self.embed_e {
            let e = g.constant(Tensor::new(vec![b, c.embodiment_dim], batch.embodiments.clone())?);
            let e = self.embed_modality(g, vars, pe, e)?;
            let per_step: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(h)).collect();
            let e = g.gather_rows(e, &per_step)?;
            blocks.push(g.add(e, te)?);
        }
        let s = self.embed_modality(g, vars, self.embed_s, s)?;
        blocks.push(g.add(s, te)?);
        let a = self.embed_modality(g, vars, self.embed_a, a)?;
        blocks.push(g.add(a, te)?);

        let k = blocks.len();
        let stacked = g.concat(&blocks, 0)?;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| (0..h).flat_map(move |t| (0..k).map(move |j| j * rows + i * h + t)))
            .collect();
        Ok(g.gather_rows(stacked, &order)?)
    }

    /// Normalised action predictions `[batch·h × action_dim]`, one per
    /// timestep, read from the `s` tokens.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch, dropout: Option<&mut Dropout>) -> Result<Var> {
        let tokens = self.embed(g, vars, batch)?;
        let k = self.config.tokens_per_step();
        let n = k * batch.h;
        let hidden = self.gpt.forward(g, vars, tokens, batch.batch, n, dropout)?;
        let s_rows: Vec<usize> = (0..batch.batch * batch.h).map(|r| r * k + (k - 2)).collect();
        let hs = g.gather_rows(hidden, &s_rows)?;
        Ok(g.linear(hs, vars[self.head_w], vars[self.head_b])?)
    }

    /// Mean squared error between `pred` and the batch targets.
    pub fn loss(&self, g: &mut Graph, pred: Var, batch: &WindowBatch) -> Result<Var> {
        let target = g.constant(Tensor::new(vec![batch.batch * batch.h, self.config.action_dim], batch.targets.clone())?);
        Ok(mse(g, pred, target)?)
    }

    /// Predicted actions in raw units for every timestep of `w`.
    pub fn predict_actions(&self, w: &TokenWindow) -> Result<Vec<Vec<f64>>> {
        let batch = WindowBatch::from_windows(std::slice::from_ref(w), &self.normalizer, &self.config.limits())?;
        let mut g = Graph::inference();
        let vars = gpt::bind(&mut g, &self.store);
        let pred = self.forward(&mut g, &vars, &batch, None)?;
        Ok(g.data(pred).chunks(self.config.action_dim).map(|a| self.normalizer.denormalize_action(a)).collect())
    }

    /// Action for the last of `states`, given every action taken before it.
    /// Uses the trailing `min(len, H)` timesteps with a zero placeholder in
    /// the pending action slot.
    pub fn act(&self, states: &[Vec<f64>], actions: &[Vec<f64>], e: &EmbodimentVector) -> Result<Vec<f64>> {
        let n = states.len();
        if n == 0 || actions.len() + 1 != n {
            return Err(EatError::Window("history needs one more state than actions".into()));
        }
        let h = n.min(self.config.context_len);
        let start = n - h;
        let mut acts: Vec<Vec<f64>> = actions[start..].to_vec();
        acts.push(vec![0.0; self.config.action_dim]);
        let w = TokenWindow { embodiment: *e, states: states[start..].to_vec(), actions: acts, timesteps: (start..n).collect(), labels: vec![] };
        Ok(self.predict_actions(&w)?.pop().expect("non-empty window"))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the parameters to `path` and config plus normalisation to
    /// `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        let side = Sidecar { kind: "eat".into(), config: self.config, normalizer: self.normalizer.clone() };
        let text = serde_json::to_vec_pretty(&side).expect("sidecar serialises");
        write_atomic(&Self::sidecar_path(path), &text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let text = fs::read(&side_path).map_err(|e| CheckpointError::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_slice(&text)
            .map_err(|e| EatError::Sidecar { path: side_path.display().to_string(), msg: e.to_string() })?;
        if side.kind != "eat" {
            return Err(EatError::Sidecar { path: side_path.display().to_string(), msg: format!("kind {}", side.kind) });
        }
        let mut model = Self::new(side.config, side.normalizer, 0)?;
        let stored = ParamStore::load(path)?;
        model.store.load_from(&stored)?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    config: EatConfig,
    normalizer: Normalizer,
}

/// `mean((pred − target)²)` on the graph.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var, TensorError> {
    if g.value(pred).is_empty() {
        return Err(TensorError::InvalidShape { op: "mse", shape: g.shape(pred).to_vec(), reason: "empty".into() });
    }
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Mean over timesteps and action dimensions of the squared error.
pub fn loss_mse(predicted: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != target.len() {
        return Err(EatError::Window("loss needs equal, non-empty sequences".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in predicted.iter().zip(target) {
        if p.len() != t.len() {
            return Err(EatError::Window("action widths differ".into()));
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    Ok(total / count as f64)
}

/// A frozen model used as a controller.
#[derive(Debug, Clone)]
pub struct EatPolicy {
    pub model: EatModel,
    pub label: String,
}

impl EatPolicy {
    pub fn new(model: EatModel, label: impl Into<String>) -> Self {
        Self { model, label: label.into() }
    }
}

impl Policy for EatPolicy {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        let actions: Vec<Vec<f64>> = view.actions.iter().map(|&a| vec![a]).collect();
        match self.model.act(view.states, &actions, &view.embodiment) {
            Ok(a) => a[0],
            Err(_) => f64::NAN,
        }
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}
