//! The single serializable run description shared by every subcommand.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bo::EvolveConfig;
use crate::checkpoint::write_atomic;
use crate::dataset::{collect_exploring, Dataset, DatasetError};
use crate::eabc::EabcConfig;
use crate::eat::EatConfig;
use crate::embodiment::{less_diverse_grid, training_grid, EmbodimentVector};
use crate::env::{EnvSpec, Task};
use crate::eval::EvalConfig;
use crate::policy::Expert;
use crate::train::{ModelKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("invalid run config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetChoice {
    Full27,
    Ld8,
    Ld8x5,
    Ld8x10,
}

impl DatasetChoice {
    pub const ALL: [DatasetChoice; 4] = [DatasetChoice::Full27, DatasetChoice::Ld8, DatasetChoice::Ld8x5, DatasetChoice::Ld8x10];

    pub fn name(self) -> &'static str {
        match self {
            DatasetChoice::Full27 => "full27",
            DatasetChoice::Ld8 => "ld8",
            DatasetChoice::Ld8x5 => "ld8x5",
            DatasetChoice::Ld8x10 => "ld8x10",
        }
    }

    pub fn embodiments(self) -> Vec<EmbodimentVector> {
        match self {
            DatasetChoice::Full27 => training_grid(),
            _ => less_diverse_grid(),
        }
    }

    /// Trajectory-count multiplier over the per-embodiment base.
    pub fn multiplier(self) -> usize {
        match self {
            DatasetChoice::Full27 | DatasetChoice::Ld8 => 1,
            DatasetChoice::Ld8x5 => 5,
            DatasetChoice::Ld8x10 => 10,
        }
    }
}

impl FromStr for DatasetChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown dataset '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eat,
    Vanilla,
    Eabc,
    Expert,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Eat, Method::Vanilla, Method::Eabc, Method::Expert];

    pub fn name(self) -> &'static str {
        match self {
            Method::Eat => "eat",
            Method::Vanilla => "vanilla",
            Method::Eabc => "eabc",
            Method::Expert => "expert",
        }
    }

    pub fn model_kind(self) -> Option<ModelKind> {
        match self {
            Method::Eat => Some(ModelKind::Eat),
            Method::Vanilla => Some(ModelKind::Vanilla),
            Method::Eabc => Some(ModelKind::Eabc),
            Method::Expert => None,
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown method '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub choice: DatasetChoice,
    /// Trajectories per embodiment before the dataset multiplier.
    pub per_embodiment: usize,
    /// Standard deviation of the Gaussian noise added to executed expert
    /// actions during collection. Labels stay noise-free.
    pub demo_noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { choice: DatasetChoice::Full27, per_embodiment: 200, demo_noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub method: Method,
    /// Noise multiplier applied to the environment for evaluation.
    pub noise: f64,
    pub env: EnvSpec,
    pub dataset: DatasetSpec,
    pub eat: EatConfig,
    pub eabc: EabcConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub evolve: EvolveConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            method: Method::Eat,
            noise: 1.0,
            env: EnvSpec::default(),
            dataset: DatasetSpec::default(),
            eat: EatConfig::default(),
            eabc: EabcConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            evolve: EvolveConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Sets the master seed and every stage seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.evolve.seed = seed;
        self
    }

    /// The EAT config for a transformer method, with the embodiment token and
    /// token budget matched to it.
    pub fn eat_config(&self, method: Method) -> EatConfig {
        self.eat_config_with_context(method, self.eat.context_len)
    }

    pub fn eat_config_with_context(&self, method: Method, context_len: usize) -> EatConfig {
        let mut c = EatConfig::new(context_len, method != Method::Vanilla, self.eat.gpt);
        c.max_timestep = self.eat.max_timestep;
        c.timestep_init_scale = self.eat.timestep_init_scale;
        c
    }

    pub fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig { model_kind: method.model_kind().unwrap_or(self.train.model_kind), ..self.train }
    }

    pub fn evaluation_spec(&self) -> EnvSpec {
        self.env.with_noise(self.env.noise.with_multiplier(self.noise))
    }

    /// The stepper task over the evolution box, otherwise matching `env`.
    pub fn stepper_spec(&self) -> EnvSpec {
        EnvSpec { task: Task::Stepper, embodiment_bounds: self.evolve.bounds, ..self.env }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.env.validate().map_err(|e| bad(&e))?;
        self.evaluation_spec().validate().map_err(|e| bad(&e))?;
        self.eat_config(Method::Eat).validate().map_err(|e| bad(&e))?;
        self.train.validate().map_err(|e| bad(&e))?;
        self.eval.validate().map_err(|e| bad(&e))?;
        self.evolve.validate(&self.env).map_err(|e| bad(&e))?;
        if self.dataset.per_embodiment == 0 {
            return Err(ConfigError::Invalid("dataset.per_embodiment must be positive".into()));
        }
        if !(self.dataset.demo_noise >= 0.0 && self.dataset.demo_noise.is_finite()) {
            return Err(ConfigError::Invalid("dataset.demo_noise must be finite and non-negative".into()));
        }
        if self.eabc.hidden_widths.is_empty() || self.eabc.hidden_widths.contains(&0) {
            return Err(ConfigError::Invalid("eabc.hidden_widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Collects the configured expert dataset.
    pub fn collect_dataset(&self, choice: DatasetChoice) -> Result<Dataset, DatasetError> {
        let per = self.dataset.per_embodiment * choice.multiplier();
        collect_exploring(&self.env, &Expert::tuned(), &choice.embodiments(), per, self.seed, self.dataset.demo_noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 5, "train": {"iterations": 10, "warmup_steps": 2}}"#, Path::new("x")).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.env, EnvSpec::default());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default().with_seed(3);
        let back = RunConfig::from_json(&c.to_json(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn vanilla_config_drops_embodiment_token() {
        let c = RunConfig::default();
        let v = c.eat_config(Method::Vanilla);
        assert!(!v.include_embodiment_token);
        assert_eq!(v.gpt.max_tokens, 2 * v.context_len);
        assert!(v.validate().is_ok());
    }

    #[test]
    fn dataset_names_parse() {
        for c in DatasetChoice::ALL {
            assert_eq!(c.name().parse::<DatasetChoice>().unwrap(), c);
        }
        assert_eq!(DatasetChoice::Ld8x10.embodiments().len(), 8);
        assert!("ld9".parse::<DatasetChoice>().is_err());
    }
}
