//! End-to-end stages shared by the command line and the integration tests.
//! Every stage reads and writes under `RunConfig::out`.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::bo::{evolve, grid_search, random_search, BoError, EvolveResult};
use crate::checkpoint::{write_atomic, CheckpointError};
use crate::config::{ConfigError, DatasetChoice, Method, RunConfig};
use crate::dataset::{Dataset, DatasetError};
use crate::eabc::{EabcModel, EabcPolicy};
use crate::eat::{EatConfig, EatError, EatModel, EatPolicy};
use crate::embodiment::{evaluation_grid, training_grid, EmbodimentVector};
use crate::eval::{matrices_csv, method_table, return_matrix, EvalError, MethodTable, ReturnMatrix};
use crate::policy::{Expert, Policy};
use crate::report::{matrices_from_csv, table_markdown, torso_heatmaps, ReportError};
use crate::train::{train, write_loss_csv, TrainError, TrainReport};

/// Body the single-expert baseline is designed for.
pub const NOMINAL: EmbodimentVector = EmbodimentVector::new(0.3, 0.2, 0.2);

pub const CONFIG_FILE: &str = "run_config.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input {0}; run the upstream subcommand first")]
    Missing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] EatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Evolve(#[from] BoError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0} has no trained model")]
    NotTrainable(&'static str),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Files written by one stage, removed again if the stage fails.
#[derive(Debug, Default)]
pub struct Artifacts {
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
        }
        self.written.push(path.to_path_buf());
        write_atomic(path, bytes)?;
        Ok(())
    }

    /// Records a file written by another component.
    pub fn track(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn discard(&mut self) {
        for p in self.written.drain(..) {
            let _ = fs::remove_file(&p);
            let mut partial = p.into_os_string();
            partial.push(".partial");
            let _ = fs::remove_file(PathBuf::from(partial));
        }
    }
}

/// Runs `stage`, copying the config into `out` first and deleting everything
/// the stage wrote if it fails.
pub fn run_stage<T>(cfg: &RunConfig, stage: impl FnOnce(&mut Artifacts) -> Result<T>) -> Result<T> {
    let mut art = Artifacts::default();
    let result = art.write(&cfg.out.join(CONFIG_FILE), cfg.to_json().as_bytes()).and_then(|_| stage(&mut art));
    if result.is_err() {
        art.discard();
    }
    result
}

pub fn dataset_path(cfg: &RunConfig, choice: DatasetChoice) -> PathBuf {
    cfg.out.join("data").join(format!("{}.eatd", choice.name()))
}

pub fn checkpoint_path(cfg: &RunConfig, method: Method, choice: DatasetChoice, context_len: usize) -> PathBuf {
    let h = if method == Method::Eabc { 1 } else { context_len };
    cfg.out.join("models").join(format!("{}_{}_h{h}_s{}.ckpt", method.name(), choice.name(), cfg.train.seed))
}

pub fn matrix_path(cfg: &RunConfig, label: &str, noise: f64) -> PathBuf {
    cfg.out.join("eval").join(format!("matrix_{label}_noise{noise}.csv"))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing(path.to_path_buf()))
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Collects and stores a dataset; returns it with its path.
pub fn gen_data(cfg: &RunConfig, choice: DatasetChoice, art: &mut Artifacts) -> Result<(Dataset, PathBuf)> {
    let data = cfg.collect_dataset(choice)?;
    let path = dataset_path(cfg, choice);
    art.write(&path, &data.to_bytes())?;
    let manifest = serde_json::to_vec_pretty(&data.manifest_json()).expect("manifest serialises");
    art.write(&with_suffix(&path, ".manifest.json"), &manifest)?;
    Ok((data, path))
}

pub fn load_dataset(cfg: &RunConfig, choice: DatasetChoice) -> Result<Dataset> {
    let path = dataset_path(cfg, choice);
    require(&path)?;
    Ok(Dataset::load(&path)?)
}

/// A trained controller of either model family.
pub enum Trained {
    Eat(EatModel),
    Eabc(EabcModel),
}

impl Trained {
    pub fn into_policy(self, label: &str) -> Box<dyn Policy> {
        match self {
            Trained::Eat(m) => Box::new(EatPolicy::new(m, label)),
            Trained::Eabc(m) => Box::new(EabcPolicy(m)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::Eat(m) => m.save(path)?,
            Trained::Eabc(m) => m.save(path)?,
        }
        Ok(())
    }
}

/// Trains `method` on `data` in memory.
pub fn fit(cfg: &RunConfig, method: Method, eat: EatConfig, data: &Dataset) -> Result<(Trained, TrainReport)> {
    let norm = data.normalization.to_normalizer(cfg.env.embodiment_bounds);
    let tc = cfg.train_config(method);
    match method {
        Method::Eat | Method::Vanilla => {
            let mut m = EatModel::new(eat, norm, tc.seed)?;
            let rep = train(&mut m, data, &tc, None)?;
            Ok((Trained::Eat(m), rep))
        }
        Method::Eabc => {
            let mut m = EabcModel::new(cfg.eabc.clone(), norm, tc.seed)?;
            let rep = train(&mut m, data, &tc, None)?;
            Ok((Trained::Eabc(m), rep))
        }
        Method::Expert => Err(PipelineError::NotTrainable("expert")),
    }
}

/// Trains and stores a checkpoint plus its loss curve.
pub fn train_stage(cfg: &RunConfig, method: Method, choice: DatasetChoice, art: &mut Artifacts) -> Result<(Trained, PathBuf)> {
    let data = load_dataset(cfg, choice)?;
    let eat = cfg.eat_config(method);
    let (model, report) = fit(cfg, method, eat, &data)?;
    let path = checkpoint_path(cfg, method, choice, eat.context_len);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
    }
    art.track(&path);
    art.track(&with_suffix(&path, ".json"));
    model.save(&path)?;
    let loss = with_suffix(&path, ".loss.csv");
    art.track(&loss);
    write_loss_csv(&report, &loss)?;
    Ok((model, path))
}

pub fn load_trained(cfg: &RunConfig, method: Method, choice: DatasetChoice, context_len: usize) -> Result<Trained> {
    let path = checkpoint_path(cfg, method, choice, context_len);
    require(&path)?;
    Ok(match method {
        Method::Eabc => Trained::Eabc(EabcModel::load(&path)?),
        Method::Eat | Method::Vanilla => Trained::Eat(EatModel::load(&path)?),
        Method::Expert => return Err(PipelineError::NotTrainable("expert")),
    })
}

/// Evaluation-grid return matrix of `policy` at the given noise multiplier.
pub fn evaluate(cfg: &RunConfig, policy: &dyn Policy, label: &str, noise: f64) -> Result<ReturnMatrix> {
    let spec = cfg.env.with_noise(cfg.env.noise.with_multiplier(noise));
    Ok(return_matrix(policy, &evaluation_grid(), &spec, &cfg.eval, label, &training_grid())?)
}

/// The policies `eval-matrix` scores for `method`, with their labels.
pub fn method_policies(cfg: &RunConfig, method: Method) -> Result<Vec<(String, Box<dyn Policy>)>> {
    Ok(match method {
        Method::Expert => vec![
            ("expert".into(), Box::new(Expert::tuned()) as Box<dyn Policy>),
            ("single-expert".into(), Box::new(Expert::fixed(NOMINAL))),
        ],
        m => {
            let model = load_trained(cfg, m, cfg.dataset.choice, cfg.eat.context_len)?;
            vec![(m.name().to_string(), model.into_policy(m.name()))]
        }
    })
}

pub fn eval_stage(cfg: &RunConfig, method: Method, art: &mut Artifacts) -> Result<Vec<ReturnMatrix>> {
    let mut out = Vec::new();
    for (label, policy) in method_policies(cfg, method)? {
        let m = evaluate(cfg, policy.as_ref(), &label, cfg.noise)?;
        art.write(&matrix_path(cfg, &label, cfg.noise), m.to_csv().as_bytes())?;
        out.push(m);
    }
    Ok(out)
}

/// Ablation variants of EAT: horizon 1 on the full dataset and the default
/// horizon on the three less-diverse datasets, next to the stored default.
pub fn ablate_stage(cfg: &RunConfig, art: &mut Artifacts) -> Result<(MethodTable, Vec<ReturnMatrix>)> {
    let base = load_trained(cfg, Method::Eat, DatasetChoice::Full27, cfg.eat.context_len)?;
    let mut variants: Vec<(String, Box<dyn Policy>)> = vec![("eat".into(), base.into_policy("eat"))];
    let full = load_dataset(cfg, DatasetChoice::Full27)?;
    let h1 = cfg.eat_config_with_context(Method::Eat, 1);
    let (m, _) = fit(cfg, Method::Eat, h1, &full)?;
    variants.push(("eat-h1".into(), m.into_policy("eat-h1")));
    for choice in [DatasetChoice::Ld8, DatasetChoice::Ld8x5, DatasetChoice::Ld8x10] {
        let data = load_dataset(cfg, choice)?;
        let label = format!("eat-{}", choice.name());
        let (m, _) = fit(cfg, Method::Eat, cfg.eat_config(Method::Eat), &data)?;
        variants.push((label.clone(), m.into_policy(&label)));
    }
    let mut matrices = Vec::new();
    for (label, policy) in &variants {
        for noise in [1.0, 2.0] {
            matrices.push(evaluate(cfg, policy.as_ref(), label, noise)?);
        }
    }
    let table = method_table(&matrices)?;
    let dir = cfg.out.join("ablation");
    art.write(&dir.join("ablation_table.csv"), table.to_csv().as_bytes())?;
    art.write(&dir.join("matrices.csv"), matrices_csv(&matrices).as_bytes())?;
    Ok((table, matrices))
}

pub struct EvolveOutcome {
    pub bo: EvolveResult,
    pub random: EvolveResult,
    pub grid: Vec<(EmbodimentVector, f64)>,
}

impl EvolveOutcome {
    pub fn grid_best(&self) -> Option<(EmbodimentVector, f64)> {
        self.grid.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// BO, random search and the exhaustive grid under one frozen policy.
pub fn run_evolution(cfg: &RunConfig, policy: &dyn Policy) -> Result<EvolveOutcome> {
    let spec = cfg.stepper_spec();
    let bo = evolve(policy, &spec, &cfg.evolve)?;
    let random = random_search(policy, &spec, &cfg.evolve)?;
    let grid = if cfg.evolve.grid_per_dim > 0 { grid_search(policy, &spec, &cfg.evolve, cfg.evolve.grid_per_dim) } else { Vec::new() };
    Ok(EvolveOutcome { bo, random, grid })
}

pub fn evolve_stage(cfg: &RunConfig, method: Method, art: &mut Artifacts) -> Result<EvolveOutcome> {
    let model = load_trained(cfg, method, cfg.dataset.choice, cfg.eat.context_len)?;
    let policy = model.into_policy(method.name());
    let outcome = run_evolution(cfg, policy.as_ref())?;
    let dir = cfg.out.join("evolve");
    art.write(&dir.join(format!("bo_{}.csv", method.name())), outcome.bo.to_csv().as_bytes())?;
    art.write(&dir.join(format!("random_{}.csv", method.name())), outcome.random.to_csv().as_bytes())?;
    if !outcome.grid.is_empty() {
        let mut csv = String::from("torso,front,hind,fitness\n");
        for (e, f) in &outcome.grid {
            csv.push_str(&format!("{},{},{},{}\n", e.torso, e.front, e.hind, f));
        }
        art.write(&dir.join(format!("grid_{}.csv", method.name())), csv.as_bytes())?;
    }
    Ok(outcome)
}

/// Heatmaps for every matrix CSV under `eval/`, plus the method table.
pub fn report_stage(cfg: &RunConfig, art: &mut Artifacts) -> Result<usize> {
    let dir = cfg.out.join("eval");
    require(&dir)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|source| PipelineError::Io { path: dir.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PipelineError::Missing(dir.join("matrix_*.csv")));
    }
    let mut matrices = Vec::new();
    for f in &files {
        let text = fs::read_to_string(f).map_err(|source| PipelineError::Io { path: f.clone(), source })?;
        matrices.extend(matrices_from_csv(&text)?);
    }
    let lo = matrices.iter().flat_map(|m| m.cells.iter().map(|c| c.mean)).fold(f64::INFINITY, f64::min);
    let hi = matrices.iter().flat_map(|m| m.cells.iter().map(|c| c.mean)).fold(f64::NEG_INFINITY, f64::max);
    let out = cfg.out.join("report");
    let mut count = 0;
    for m in &matrices {
        for (torso, svg) in torso_heatmaps(m, Some((lo, hi))) {
            let name = format!("heatmap_{}_noise{}_torso{:.3}.svg", m.method, m.noise_multiplier, torso);
            art.write(&out.join(name), svg.as_bytes())?;
            count += 1;
        }
    }
    let table = method_table(&matrices)?.to_csv();
    art.write(&out.join("method_table.csv"), table.as_bytes())?;
    art.write(&out.join("method_table.md"), table_markdown(&table).as_bytes())?;
    Ok(count)
}
