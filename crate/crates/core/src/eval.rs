//! Return matrices over embodiment grids and method comparison tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embodiment::{is_in, EmbodimentVector};
use crate::env::{run_episode, EnvError, EnvSpec};
use crate::policy::Policy;
use crate::seeding;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("matrices cover different grids")]
    GridMismatch,
    #[error("non-finite aggregate for {method} at {cell}")]
    NonFinite { method: String, cell: EmbodimentVector },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trials: usize,
    pub episodes_per_trial: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials: 3, episodes_per_trial: 16, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.trials == 0 || self.episodes_per_trial == 0 {
            return Err(EvalError::Config("trials and episodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rollouts_per_cell(&self) -> usize {
        self.trials * self.episodes_per_trial
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutResult {
    pub total_return: f64,
    /// The policy produced a non-finite action; scored at the floor.
    pub failed: bool,
}

/// One episode of `policy` on body `e`. A policy failure scores the
/// environment's return floor instead of being dropped.
pub fn rollout<P: Policy + ?Sized>(policy: &P, e: &EmbodimentVector, spec: &EnvSpec, seed: u64) -> Result<RolloutResult, EnvError> {
    match run_episode(policy, e, spec, seed) {
        Ok(ep) => Ok(RolloutResult { total_return: ep.total_return, failed: false }),
        Err(EnvError::NonFinite(_)) => Ok(RolloutResult { total_return: spec.return_floor(), failed: true }),
        Err(err) => Err(err),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub embodiment: EmbodimentVector,
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
    pub failures: usize,
    pub zero_shot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnMatrix {
    pub method: String,
    pub noise_multiplier: f64,
    pub cells: Vec<CellResult>,
}

impl ReturnMatrix {
    pub fn mean(&self) -> f64 {
        self.cells.iter().map(|c| c.mean).sum::<f64>() / self.cells.len() as f64
    }

    pub fn std_across_cells(&self) -> f64 {
        mean_std(&self.cells.iter().map(|c| c.mean).collect::<Vec<_>>()).1
    }

    pub fn cell(&self, e: &EmbodimentVector) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.embodiment == e)
    }

    pub fn same_grid(&self, other: &ReturnMatrix) -> bool {
        self.cells.len() == other.cells.len()
            && self.cells.iter().zip(&other.cells).all(|(a, b)| a.embodiment == b.embodiment)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("torso,front,hind,method,noise,mean,std,zero_shot\n");
        self.append_csv_rows(&mut out);
        out
    }

    fn append_csv_rows(&self, out: &mut String) {
        for c in &self.cells {
            let e = c.embodiment;
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{}",
                e.torso, e.front, e.hind, self.method, self.noise_multiplier, c.mean, c.std, c.zero_shot
            )
            .unwrap();
        }
    }
}

/// Long-form CSV of several matrices.
pub fn matrices_csv(matrices: &[ReturnMatrix]) -> String {
    let mut out = String::from("torso,front,hind,method,noise,mean,std,zero_shot\n");
    for m in matrices {
        m.append_csv_rows(&mut out);
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rollout seed for one cell and repetition; independent of grid order and
/// of the method being evaluated.
pub fn rollout_seed(master: u64, e: &EmbodimentVector, trial: usize, episode: usize) -> u64 {
    seeding::derive(master, &[e.seed_key(), trial as u64, episode as u64])
}

/// Evaluates `policy` on every cell of `grid`. Cells absent from `training`
/// are tagged zero-shot.
pub fn return_matrix<P: Policy + ?Sized>(
    policy: &P,
    grid: &[EmbodimentVector],
    spec: &EnvSpec,
    config: &EvalConfig,
    method: &str,
    training: &[EmbodimentVector],
) -> Result<ReturnMatrix, EvalError> {
    config.validate()?;
    if grid.is_empty() {
        return Err(EvalError::Config("empty grid".into()));
    }
    let per_cell = config.rollouts_per_cell();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..per_cell).map(move |k| (c, k))).collect();
    let results: Vec<Result<RolloutResult, EnvError>> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let e = &grid[c];
            let seed = rollout_seed(config.seed, e, k / config.episodes_per_trial, k % config.episodes_per_trial);
            rollout(policy, e, spec, seed)
        })
        .collect();
    let mut cells = Vec::with_capacity(grid.len());
    let mut it = results.into_iter();
    for e in grid {
        let mut returns = Vec::with_capacity(per_cell);
        let mut failures = 0;
        for r in it.by_ref().take(per_cell) {
            let r = r?;
            failures += usize::from(r.failed);
            returns.push(r.total_return);
        }
        let (mean, std) = mean_std(&returns);
        if !mean.is_finite() || !std.is_finite() {
            return Err(EvalError::NonFinite { method: method.into(), cell: *e });
        }
        cells.push(CellResult { embodiment: *e, mean, std, returns, failures, zero_shot: !is_in(training, e) });
    }
    Ok(ReturnMatrix { method: method.into(), noise_multiplier: spec.noise.multiplier, cells })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub clean_mean: f64,
    pub clean_std: f64,
    pub noisy_mean: Option<f64>,
    pub noisy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub rows: Vec<MethodRow>,
}

impl MethodTable {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,average_score,average_score_std,noisy_score,noisy_score_std\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6},{},{}", r.method, r.clean_mean, r.clean_std, opt(r.noisy_mean), opt(r.noisy_std))
                .unwrap();
        }
        out
    }
}

/// Per method: mean ± std across cells, for the clean matrix and, when
/// present, the noisy one. Rows follow first appearance.
pub fn method_table(matrices: &[ReturnMatrix]) -> Result<MethodTable, EvalError> {
    if let Some(first) = matrices.first() {
        if matrices.iter().any(|m| !m.same_grid(first)) {
            return Err(EvalError::GridMismatch);
        }
    }
    let mut rows: Vec<MethodRow> = Vec::new();
    for m in matrices {
        let (mean, std) = (m.mean(), m.std_across_cells());
        let idx = match rows.iter().position(|r| r.method == m.method) {
            Some(i) => i,
            None => {
                rows.push(MethodRow { method: m.method.clone(), clean_mean: f64::NAN, clean_std: f64::NAN, noisy_mean: None, noisy_std: None });
                rows.len() - 1
            }
        };
        let row = &mut rows[idx];
        if m.noise_multiplier == 1.0 {
            row.clean_mean = mean;
            row.clean_std = std;
        } else {
            row.noisy_mean = Some(mean);
            row.noisy_std = Some(std);
        }
    }
    Ok(MethodTable { rows })
}

/// For every cell, the method with the highest mean return.
pub fn best_per_cell(matrices: &[ReturnMatrix]) -> Result<Vec<(EmbodimentVector, String)>, EvalError> {
    let first = matrices.first().ok_or_else(|| EvalError::Config("no matrices".into()))?;
    if matrices.iter().any(|m| !m.same_grid(first)) {
        return Err(EvalError::GridMismatch);
    }
    Ok((0..first.cells.len())
        .map(|i| {
            let best = matrices
                .iter()
                .max_by(|a, b| a.cells[i].mean.total_cmp(&b.cells[i].mean))
                .expect("non-empty");
            (first.cells[i].embodiment, best.method.clone())
        })
        .collect())
}

/// Clean and noisy matrices for each named variant, summarised as a table.
pub fn ablation_suite(
    variants: &[(String, &dyn Policy)],
    grid: &[EmbodimentVector],
    spec: &EnvSpec,
    config: &EvalConfig,
    training: &[EmbodimentVector],
) -> Result<(MethodTable, Vec<ReturnMatrix>), EvalError> {
    let mut matrices = Vec::new();
    for (name, policy) in variants {
        for mult in [1.0, 2.0] {
            let s = spec.with_noise(spec.noise.with_multiplier(mult));
            matrices.push(return_matrix(*policy, grid, &s, config, name, training)?);
        }
    }
    Ok((method_table(&matrices)?, matrices))
}
