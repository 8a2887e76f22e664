//! Supervised training on expert windows.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_atomic, CheckpointError, ParamStore};
use crate::dataset::{Dataset, DatasetError};
use crate::eabc::EabcModel;
use crate::eat::{mse, EatError, EatModel, Normalizer, WindowBatch, WindowLimits};
use crate::gpt::{bind, collect_grads};
use crate::graph::{Dropout, Graph, Var};
use crate::optim::{clip_grad_norm, warmup_lr, AdamConfig, AdamState};
use crate::seeding;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration} (last finite loss {last_finite:?})")]
    NonFinite { iteration: usize, last_finite: Option<f64> },
    #[error(transparent)]
    Model(#[from] EatError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Eat,
    Vanilla,
    Eabc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Eat => "eat",
            ModelKind::Vanilla => "vanilla",
            ModelKind::Eabc => "eabc",
        }
    }
}

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub grad_clip: f64,
    pub seed: u64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub eval_every: usize,
    pub log_every: usize,
    pub model_kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 1000,
            schedule: Schedule::Constant,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
            log_every: 100,
            model_kind: ModelKind::Eat,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(TrainError::Config("iterations, batch size and log period must be positive".into()));
        }
        if self.warmup_steps > self.iterations {
            return Err(TrainError::Config("warmup longer than training".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let base = warmup_lr(self.learning_rate, self.warmup_steps, iteration);
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let progress = iteration as f64 / self.iterations as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// A parametric action regressor over windows.
pub trait Learner {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn limits(&self) -> WindowLimits;
    fn normalizer(&self) -> &Normalizer;
    fn predict(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch, dropout: Option<&mut Dropout>)
        -> Result<Var, EatError>;
    fn dropout_rate(&self) -> f64 {
        0.0
    }
}

impl Learner for EatModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn limits(&self) -> WindowLimits {
        self.config.limits()
    }
    fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }
    fn predict(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch, dropout: Option<&mut Dropout>) -> Result<Var, EatError> {
        self.forward(g, vars, batch, dropout)
    }
    fn dropout_rate(&self) -> f64 {
        self.config.gpt.dropout_rate
    }
}

impl Learner for EabcModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn limits(&self) -> WindowLimits {
        self.config.limits()
    }
    fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }
    fn predict(&self, g: &mut Graph, vars: &[Var], batch: &WindowBatch, _: Option<&mut Dropout>) -> Result<Var, EatError> {
        self.forward(g, vars, batch)
    }
}

/// Mean squared action error of `model` on `batch` without dropout.
pub fn batch_loss<L: Learner + ?Sized>(model: &L, batch: &WindowBatch) -> Result<f64, EatError> {
    let mut g = Graph::inference();
    let vars = bind(&mut g, model.params());
    let pred = model.predict(&mut g, &vars, batch, None)?;
    let target = g.constant(Tensor::new(vec![batch.batch * batch.h, model.limits().action_dim], batch.targets.clone())?);
    let loss = mse(&mut g, pred, target)?;
    Ok(g.value(loss).item())
}

/// One optimiser update. Returns the pre-update loss.
pub fn train_step<L: Learner + ?Sized>(
    model: &mut L,
    adam: &mut AdamState,
    batch: &WindowBatch,
    lr: f64,
    grad_clip: f64,
    dropout: Option<&mut Dropout>,
) -> Result<f64, EatError> {
    let mut g = Graph::new();
    let vars = bind(&mut g, model.params());
    let pred = model.predict(&mut g, &vars, batch, dropout)?;
    let target = g.constant(Tensor::new(vec![batch.batch * batch.h, model.limits().action_dim], batch.targets.clone())?);
    let loss = mse(&mut g, pred, target)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let mut grads = collect_grads(&g, &vars);
    clip_grad_norm(&mut grads, grad_clip);
    adam.step_with_lr(model.params_mut().tensors_mut(), &grads, lr);
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `(iteration, loss)` at every logged step and the final one.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in &self.losses {
            writeln!(out, "{i},{l:e}").unwrap();
        }
        out
    }
}

/// Trains `model` on windows of its context length drawn from `data`.
/// With `checkpoint`, parameters are written there every `eval_every`
/// iterations and at the end.
pub fn train<L: Learner + ?Sized>(
    model: &mut L,
    data: &Dataset,
    config: &TrainConfig,
    checkpoint: Option<&dyn Fn(&L) -> Result<(), EatError>>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let limits = model.limits();
    if data.state_dim != limits.state_dim || data.action_dim != limits.action_dim {
        return Err(TrainError::Config(format!(
            "dataset dims ({}, {}) differ from model dims ({}, {})",
            data.state_dim, data.action_dim, limits.state_dim, limits.action_dim
        )));
    }
    let mut sampler: ChaCha8Rng = seeding::rng(config.seed, &[0x5A_4D]);
    let mut dropout = (model.dropout_rate() > 0.0)
        .then(|| Dropout::new(model.dropout_rate(), seeding::rng(config.seed, &[0xD7_0F])));
    let mut adam = AdamState::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() }, model.params().tensors());
    let mut losses = Vec::new();
    let mut last_finite = None;
    for it in 0..config.iterations {
        let windows = data.sample_batch(limits.context_len, config.batch_size, &mut sampler)?;
        let batch = WindowBatch::from_windows(&windows, model.normalizer(), &limits)?;
        let loss = train_step(model, &mut adam, &batch, config.lr_at(it), config.grad_clip, dropout.as_mut())?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { iteration: it, last_finite });
        }
        last_finite = Some(loss);
        if it % config.log_every == 0 || it + 1 == config.iterations {
            losses.push((it, loss));
        }
        if let Some(save) = checkpoint {
            if config.eval_every > 0 && (it + 1) % config.eval_every == 0 && it + 1 < config.iterations {
                save(model)?;
            }
        }
    }
    if let Some(save) = checkpoint {
        save(model)?;
    }
    let final_loss = losses.last().map_or(f64::NAN, |l| l.1);
    Ok(TrainReport { losses, final_loss })
}

pub fn write_loss_csv(report: &TrainReport, path: &Path) -> Result<(), TrainError> {
    Ok(write_atomic(path, report.to_csv().as_bytes())?)
}
