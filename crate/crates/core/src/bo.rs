//! Morphology search: a Gaussian-process surrogate with expected improvement,
//! a random-search baseline and an exhaustive grid reference.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::embodiment::{EmbodimentBounds, EmbodimentVector, EMBODIMENT_DIM};
use crate::env::{stepper_fitness, EnvSpec};
use crate::policy::Policy;
use crate::seeding;

/// Relative observation noise: `noise_var = NOISE_RATIO · signal_var`.
pub const NOISE_RATIO: f64 = 1e-4;
pub const MAX_JITTER: f64 = 1e-6;
/// Fitness recorded when a rollout fails.
pub const FITNESS_FLOOR: f64 = 0.0;

const LENGTH_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6];
const SIGNAL_GRID: [f64; 4] = [0.25, 1.0, 4.0, 16.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoError {
    #[error("no observations to fit")]
    Empty,
    #[error("observation {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
    #[error("non-finite observation at {0}")]
    NonFinite(usize),
    #[error("kernel matrix indefinite after jitter {jitter:e} (min diagonal {min_diag:e}, max diagonal {max_diag:e})")]
    Indefinite { jitter: f64, min_diag: f64, max_diag: f64 },
    #[error("invalid evolution config: {0}")]
    Config(String),
}

/// Anisotropic squared-exponential kernel.
pub fn se_kernel(a: &[f64], b: &[f64], length_scales: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(length_scales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    signal_var * (-0.5 * r2).exp()
}

/// A fitted GP posterior over points in the unit box.
#[derive(Debug, Clone)]
pub struct GpState {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Constant prior mean (the sample mean of the targets).
    pub mean: f64,
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    /// Extra diagonal added beyond `noise_var` to make the factorisation succeed.
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn factor(x: &[Vec<f64>], resid: &DVector<f64>, ls: &[f64], signal: f64, noise: f64) -> Result<Factor, BoError> {
    let n = x.len();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&x[i], &x[j], ls, signal));
    let mut diag_range = (f64::INFINITY, f64::NEG_INFINITY);
    for jitter in [0.0, MAX_JITTER] {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
            diag_range = (diag_range.0.min(m[(i, i)]), diag_range.1.max(m[(i, i)]));
        }
        if let Some(chol) = Cholesky::new(m) {
            let alpha = chol.solve(resid);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(Factor { chol, alpha, jitter, lml });
        }
    }
    Err(BoError::Indefinite { jitter: MAX_JITTER, min_diag: diag_range.0, max_diag: diag_range.1 })
}

/// Fits a zero-mean-residual GP with hyperparameters chosen by grid search on
/// the log marginal likelihood. Inputs must already live in the unit box.
pub fn gp_fit(points: &[(Vec<f64>, f64)]) -> Result<GpState, BoError> {
    let first = points.first().ok_or(BoError::Empty)?;
    let dim = first.0.len();
    for (i, (x, y)) in points.iter().enumerate() {
        if x.len() != dim {
            return Err(BoError::Dimension { index: i, got: x.len(), expected: dim });
        }
        if !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(BoError::NonFinite(i));
        }
    }
    let inputs: Vec<Vec<f64>> = points.iter().map(|p| p.0.clone()).collect();
    let targets: Vec<f64> = points.iter().map(|p| p.1).collect();
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { var } else { 1.0f64.max(mean * mean * 1e-2) };
    let resid = DVector::from_iterator(targets.len(), targets.iter().map(|y| y - mean));

    let mut best: Option<(Factor, Vec<f64>, f64)> = None;
    let mut last_err = None;
    let mut ls = vec![LENGTH_GRID[0]; dim];
    let combos = LENGTH_GRID.len().pow(dim as u32);
    for code in 0..combos {
        let mut c = code;
        for l in ls.iter_mut() {
            *l = LENGTH_GRID[c % LENGTH_GRID.len()];
            c /= LENGTH_GRID.len();
        }
        for s in SIGNAL_GRID {
            let signal = s * scale;
            match factor(&inputs, &resid, &ls, signal, NOISE_RATIO * signal) {
                Ok(f) => {
                    if best.as_ref().map_or(true, |b| f.lml > b.0.lml) {
                        best = Some((f, ls.clone(), signal));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
    }
    let (f, length_scales, signal_var) = match best {
        Some(b) => b,
        None => return Err(last_err.unwrap_or(BoError::Empty)),
    };
    Ok(GpState {
        inputs,
        targets,
        mean,
        length_scales,
        signal_var,
        noise_var: NOISE_RATIO * signal_var,
        jitter: f.jitter,
        log_marginal_likelihood: f.lml,
        chol: f.chol,
        alpha: f.alpha,
    })
}

impl GpState {
    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.inputs.len(),
            self.inputs.iter().map(|xi| se_kernel(x, xi, &self.length_scales, self.signal_var)),
        );
        let mu = self.mean + k.dot(&self.alpha);
        let v = self.chol.solve(&k);
        let var = (self.signal_var - k.dot(&v)).max(0.0);
        (mu, var)
    }

    pub fn expected_improvement(&self, x: &[f64], best_so_far: f64) -> f64 {
        let (mu, var) = self.predict(x);
        expected_improvement(mu, var.sqrt(), best_so_far)
    }

    pub fn best_observed(&self) -> f64 {
        self.targets.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Expected improvement of `Y ~ N(mu, sigma²)` over `best` (maximisation).
pub fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    if sigma < 1e-12 {
        return (mu - best).max(0.0);
    }
    let z = (mu - best) / sigma;
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    ((mu - best) * n.cdf(z) + sigma * n.pdf(z)).max(0.0)
}

/// Latin hypercube sample of `n` points in `[0, 1]^dim`.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (p, s) in pts.iter_mut().zip(strata) {
            p[d] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    pts
}

/// Maximises EI over `candidates` uniform points, then refines the best
/// candidate and the incumbent by coordinate moves.
pub fn propose_next(gp: &GpState, candidates: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = gp.dim();
    let best = gp.best_observed();
    let ei = |x: &[f64]| gp.expected_improvement(x, best);
    let mut top = (Vec::new(), f64::NEG_INFINITY);
    for _ in 0..candidates.max(1) {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
        let v = ei(&x);
        if v > top.1 {
            top = (x, v);
        }
    }
    let incumbent = gp
        .inputs
        .iter()
        .zip(&gp.targets)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|p| p.0.clone())
        .expect("fitted GP has points");
    for start in [top.0.clone(), incumbent] {
        let (x, v) = refine(start, &ei);
        if v > top.1 {
            top = (x, v);
        }
    }
    top.0
}

fn refine(mut x: Vec<f64>, ei: &dyn Fn(&[f64]) -> f64) -> (Vec<f64>, f64) {
    let mut best = ei(&x);
    for step in [0.1, 0.05, 0.02, 0.01, 0.005] {
        let mut improved = true;
        while improved {
            improved = false;
            for d in 0..x.len() {
                for dir in [-1.0, 1.0] {
                    let mut y = x.clone();
                    y[d] = (y[d] + dir * step).clamp(0.0, 1.0);
                    let v = ei(&y);
                    if v > best {
                        best = v;
                        x = y;
                        improved = true;
                    }
                }
            }
        }
    }
    (x, best)
}

/// One evaluated point of a search run, in unit-box coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub value: f64,
    pub incumbent: f64,
}

/// Maximises `f` over `[0, 1]^dim` with `initial` space-filling points
/// followed by EI proposals, `budget` evaluations in total.
pub fn bo_maximize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    dim: usize,
    initial: usize,
    budget: usize,
    candidates: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Evaluation>, BoError> {
    let mut history: Vec<Evaluation> = Vec::with_capacity(budget);
    let record = |x: Vec<f64>, v: f64, history: &mut Vec<Evaluation>| {
        let inc = history.last().map_or(v, |h| h.incumbent.max(v));
        history.push(Evaluation { x, value: v, incumbent: inc });
    };
    for x in latin_hypercube(initial.min(budget), dim, rng) {
        let v = f(&x);
        record(x, v, &mut history);
    }
    while history.len() < budget {
        let points: Vec<(Vec<f64>, f64)> = history.iter().map(|h| (h.x.clone(), h.value)).collect();
        let gp = gp_fit(&points)?;
        let x = propose_next(&gp, candidates, rng);
        let v = f(&x);
        record(x, v, &mut history);
    }
    Ok(history)
}

/// Uniform random search with the same evaluation budget.
pub fn random_maximize(f: &mut dyn FnMut(&[f64]) -> f64, dim: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<Evaluation> {
    let mut history: Vec<Evaluation> = Vec::with_capacity(budget);
    for _ in 0..budget {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
        let v = f(&x);
        let inc = history.last().map_or(v, |h| h.incumbent.max(v));
        history.push(Evaluation { x, value: v, incumbent: inc });
    }
    history
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub generations: usize,
    pub bounds: EmbodimentBounds,
    pub initial_design: usize,
    pub trials: usize,
    pub candidates: usize,
    pub seed: u64,
    /// Points per axis of the exhaustive reference grid; 0 skips it.
    pub grid_per_dim: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            generations: 20,
            bounds: EmbodimentBounds::evolution(),
            initial_design: 5,
            trials: 3,
            candidates: 4096,
            seed: 0,
            grid_per_dim: 6,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self, spec: &EnvSpec) -> Result<(), BoError> {
        if self.generations == 0 || self.trials == 0 || self.candidates == 0 {
            return Err(BoError::Config("generations, trials and candidates must be positive".into()));
        }
        if self.initial_design == 0 || self.initial_design > self.generations {
            return Err(BoError::Config("initial design must be between 1 and the generation count".into()));
        }
        self.bounds.validate().map_err(|e| BoError::Config(e.to_string()))?;
        if !self.bounds.is_within(&spec.embodiment_bounds) {
            return Err(BoError::Config("search bounds exceed the environment's embodiment bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub generation: usize,
    pub embodiment: EmbodimentVector,
    pub fitness: f64,
    pub incumbent_fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveResult {
    pub method: String,
    pub best: EmbodimentVector,
    pub best_fitness: f64,
    pub history: Vec<Generation>,
}

impl EvolveResult {
    fn from_history(method: &str, bounds: &EmbodimentBounds, evals: Vec<Evaluation>) -> Self {
        let history: Vec<Generation> = evals
            .iter()
            .enumerate()
            .map(|(g, ev)| Generation {
                generation: g,
                embodiment: bounds.from_unit(&ev.x),
                fitness: ev.value,
                incumbent_fitness: ev.incumbent,
            })
            .collect();
        let top = history.iter().max_by(|a, b| a.fitness.total_cmp(&b.fitness)).expect("non-empty history");
        Self { method: method.into(), best: top.embodiment, best_fitness: top.fitness, history }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("generation,torso,front,hind,fitness,incumbent_fitness\n");
        for g in &self.history {
            let e = g.embodiment;
            writeln!(out, "{},{},{},{},{},{}", g.generation, e.torso, e.front, e.hind, g.fitness, g.incumbent_fitness).unwrap();
        }
        out
    }
}

/// Stepper fitness with common random numbers: the same body always sees the
/// same trial seeds, so every search method optimises one fixed function.
pub fn fitness<P: Policy + ?Sized>(policy: &P, e: &EmbodimentVector, spec: &EnvSpec, trials: usize, seed: u64) -> f64 {
    match stepper_fitness(e, policy, spec, trials, seeding::derive(seed, &[e.seed_key()])) {
        Ok(f) if f.is_finite() => f,
        _ => FITNESS_FLOOR,
    }
}

/// BO over the configured box under a frozen policy.
pub fn evolve<P: Policy + ?Sized>(policy: &P, spec: &EnvSpec, config: &EvolveConfig) -> Result<EvolveResult, BoError> {
    config.validate(spec)?;
    let bounds = config.bounds;
    let mut rng = seeding::rng(config.seed, &[0xB0]);
    let mut f = |u: &[f64]| fitness(policy, &bounds.from_unit(u), spec, config.trials, config.seed);
    let evals = bo_maximize(&mut f, EMBODIMENT_DIM, config.initial_design, config.generations, config.candidates, &mut rng)?;
    Ok(EvolveResult::from_history("bo", &bounds, evals))
}

pub fn random_search<P: Policy + ?Sized>(policy: &P, spec: &EnvSpec, config: &EvolveConfig) -> Result<EvolveResult, BoError> {
    config.validate(spec)?;
    let bounds = config.bounds;
    let mut rng = seeding::rng(config.seed, &[0x5EA]);
    let mut f = |u: &[f64]| fitness(policy, &bounds.from_unit(u), spec, config.trials, config.seed);
    let evals = random_maximize(&mut f, EMBODIMENT_DIM, config.generations, &mut rng);
    Ok(EvolveResult::from_history("random", &bounds, evals))
}

/// Exhaustive `per_dim³` grid over the box (inclusive of the corners).
/// Returns every `(body, fitness)` pair in grid order.
pub fn grid_search<P: Policy + ?Sized>(
    policy: &P,
    spec: &EnvSpec,
    config: &EvolveConfig,
    per_dim: usize,
) -> Vec<(EmbodimentVector, f64)> {
    let steps: Vec<f64> = (0..per_dim).map(|i| if per_dim == 1 { 0.5 } else { i as f64 / (per_dim - 1) as f64 }).collect();
    let mut cells = Vec::with_capacity(per_dim.pow(3));
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                cells.push(config.bounds.from_unit(&[a, b, c]));
            }
        }
    }
    cells.par_iter().map(|e| (*e, fitness(policy, e, spec, config.trials, config.seed))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ei_limits() {
        assert_eq!(expected_improvement(0.5, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(2.0, 0.0, 1.0), 1.0);
        assert!(expected_improvement(0.0, 1.0, 0.0) > 0.39);
    }

    #[test]
    fn single_point_interpolates() {
        let gp = gp_fit(&[(vec![0.3, 0.4], 2.5)]).unwrap();
        let (mu, var) = gp.predict(&[0.3, 0.4]);
        assert!((mu - 2.5).abs() < 1e-3);
        assert!(var <= gp.noise_var + 1e-9);
    }

    #[test]
    fn latin_hypercube_hits_every_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = latin_hypercube(7, 3, &mut rng);
        for d in 0..3 {
            let mut s: Vec<usize> = pts.iter().map(|p| (p[d] * 7.0) as usize).collect();
            s.sort();
            assert_eq!(s, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let err = gp_fit(&[(vec![0.1], 1.0), (vec![0.1, 0.2], 1.0)]).unwrap_err();
        assert!(matches!(err, BoError::Dimension { index: 1, .. }));
        assert_eq!(gp_fit(&[]).unwrap_err(), BoError::Empty);
    }
}
