//! Stateless behaviour-cloning baseline: an MLP from the concatenated
//! `(embodiment, state)` to the action.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, CheckpointError, ParamStore};
use crate::eat::{EatError, Normalizer, Result, WindowBatch, WindowLimits};
use crate::embodiment::{EmbodimentVector, EMBODIMENT_DIM};
use crate::env::{ACTION_DIM, STATE_DIM};
use crate::gpt;
use crate::graph::{Graph, Var};
use crate::policy::{EpisodeView, Policy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EabcConfig {
    pub hidden_widths: Vec<usize>,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl Default for EabcConfig {
    fn default() -> Self {
        Self { hidden_widths: vec![128, 128], state_dim: STATE_DIM, action_dim: ACTION_DIM }
    }
}

impl EabcConfig {
    pub fn input_width(&self) -> usize {
        EMBODIMENT_DIM + self.state_dim
    }

    pub fn limits(&self) -> WindowLimits {
        WindowLimits { context_len: 1, state_dim: self.state_dim, action_dim: self.action_dim, max_timestep: usize::MAX }
    }
}

#[derive(Debug, Clone)]
pub struct EabcModel {
    pub config: EabcConfig,
    pub normalizer: Normalizer,
    pub store: ParamStore,
}

impl EabcModel {
    /// He-initialised hidden layers, zero output layer.
    pub fn new(config: EabcConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        if config.hidden_widths.iter().any(|&w| w == 0) || config.state_dim == 0 || config.action_dim == 0 {
            return Err(EatError::Config("widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut fan_in = config.input_width();
        for (i, &w) in config.hidden_widths.iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            store.push(format!("mlp.{i}.w"), Tensor::randn(&[fan_in, w], std, &mut rng));
            store.push(format!("mlp.{i}.b"), Tensor::zeros(&[w]));
            fan_in = w;
        }
        store.push("mlp.out.w", Tensor::zeros(&[fan_in, config.action_dim]));
        store.push("mlp.out.b", Tensor::zeros(&[config.action_dim]));
        Ok(Self { config, normalizer, store })
    }

    /// Predictions `[batch·h × action_dim]`; each row depends only on its own
    /// state and the window's embodiment.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch) -> Result<Var> {
        let rows = batch.batch * batch.h;
        let sd = self.config.state_dim;
        let mut input = Vec::with_capacity(rows * self.config.input_width());
        for r in 0..rows {
            let b = r / batch.h;
            input.extend_from_slice(&batch.embodiments[b * EMBODIMENT_DIM..(b + 1) * EMBODIMENT_DIM]);
            input.extend_from_slice(&batch.states[r * sd..(r + 1) * sd]);
        }
        let mut x = g.constant(Tensor::new(vec![rows, self.config.input_width()], input)?);
        let layers = self.config.hidden_widths.len();
        for l in 0..layers {
            x = g.linear(x, vars[2 * l], vars[2 * l + 1])?;
            x = g.relu(x);
        }
        Ok(g.linear(x, vars[2 * layers], vars[2 * layers + 1])?)
    }

    pub fn act_on(&self, state: &[f64], e: &EmbodimentVector) -> Result<Vec<f64>> {
        if state.len() != self.config.state_dim {
            return Err(EatError::Window(format!("state width must be {}", self.config.state_dim)));
        }
        let mut states = Vec::new();
        self.normalizer.state(state, &mut states);
        let batch = WindowBatch {
            batch: 1,
            h: 1,
            embodiments: self.normalizer.embodiment(e).to_vec(),
            states,
            actions: vec![0.0; self.config.action_dim],
            timesteps: vec![0],
            targets: vec![],
        };
        let mut g = Graph::inference();
        let vars = gpt::bind(&mut g, &self.store);
        let out = self.forward(&mut g, &vars, &batch)?;
        Ok(self.normalizer.denormalize_action(g.data(out)))
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)?;
        let side = Sidecar { kind: "eabc".into(), config: self.config.clone(), normalizer: self.normalizer.clone() };
        write_atomic(&Self::sidecar_path(path), &serde_json::to_vec_pretty(&side).expect("sidecar serialises"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(path);
        let text = fs::read(&side_path).map_err(|e| CheckpointError::io(&side_path, e))?;
        let side: Sidecar = serde_json::from_slice(&text)
            .map_err(|e| EatError::Sidecar { path: side_path.display().to_string(), msg: e.to_string() })?;
        if side.kind != "eabc" {
            return Err(EatError::Sidecar { path: side_path.display().to_string(), msg: format!("kind {}", side.kind) });
        }
        let mut model = Self::new(side.config, side.normalizer, 0)?;
        model.store.load_from(&ParamStore::load(path)?)?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    config: EabcConfig,
    normalizer: Normalizer,
}

#[derive(Debug, Clone)]
pub struct EabcPolicy(pub EabcModel);

impl Policy for EabcPolicy {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        self.0.act_on(view.current_state(), &view.embodiment).map_or(f64::NAN, |a| a[0])
    }

    fn label(&self) -> String {
        "eabc".into()
    }
}
