//! Central finite-difference gradient checks.
//!
//! The numeric side only evaluates forward passes on an inference graph, so it
//! shares no code with the backward rules it audits.

use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Compares backward-mode gradients of `loss_fn` with central differences for
/// every element of every input. `floor` keeps near-zero gradients from
/// inflating the relative error.
pub fn check<F>(inputs: &[Tensor], floor: f64, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grads[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces an arbitrary-shaped output to a scalar with fixed pseudo-random
/// weights so that every output element contributes a distinct cotangent.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
