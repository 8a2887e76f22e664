#![allow(dead_code)]

use eatlab::bo::GpState;
use eatlab::checkpoint::ParamStore;
use eatlab::embodiment::EmbodimentVector;
use eatlab::env::{derive_dynamics, run_episode, DynamicsParams, EnvSpec, NoiseProfile, LQR_ACTION_COST, LQR_STATE_COST};
use eatlab::gpt::{bind, CausalMask, Gpt, GptConfig};
use eatlab::policy::{EpisodeView, Expert, Policy};
use eatlab::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const K_STEP: f64 = 1e-3;

/// Quadratic cost of `v' = A·v + B·u`, `u = −k·v`, from unit error over
/// `steps` steps.
fn quadratic_cost(p: &DynamicsParams, dt: f64, k: f64, steps: usize) -> f64 {
    let a = 1.0 - dt * p.drag / p.mass;
    let b = dt * p.actuator_gain / p.mass;
    let mut v = 1.0;
    let mut cost = 0.0;
    for _ in 0..steps {
        let u = -k * v;
        cost += LQR_STATE_COST * v * v + LQR_ACTION_COST * u * u;
        v = a * v + b * u;
    }
    cost
}

/// Best constant gain on a `K_STEP` grid over `[0, k_max]`.
pub fn grid_gain(p: &DynamicsParams, dt: f64, k_max: f64, steps: usize) -> f64 {
    let n = (k_max / K_STEP).round() as usize;
    (0..=n)
        .map(|i| i as f64 * K_STEP)
        .min_by(|&x, &y| quadratic_cost(p, dt, x, steps).total_cmp(&quadratic_cost(p, dt, y, steps)))
        .unwrap()
}

/// The expert's control law with an arbitrary feedback gain.
pub struct GainController(pub f64);

impl Policy for GainController {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        let p = derive_dynamics(&view.embodiment, &view.spec.embodiment_bounds).unwrap();
        let vt = view.spec.target_velocity;
        (self.0 * (vt - view.velocity()) + p.drag * vt / p.actuator_gain - view.disturbance / p.actuator_gain).clamp(-1.0, 1.0)
    }

    fn label(&self) -> String {
        format!("gain-{}", self.0)
    }
}

pub fn mean_return(policy: &dyn Policy, e: &EmbodimentVector, spec: &EnvSpec, episodes: u64) -> f64 {
    (0..episodes).map(|s| run_episode(policy, e, spec, 1000 + s).unwrap().total_return).sum::<f64>() / episodes as f64
}

/// Noiseless return ceiling of body `e`: the best quiet return over the
/// controller family on a coarse gain grid.
pub fn noiseless_ceiling(e: &EmbodimentVector, spec: &EnvSpec, episodes: u64) -> f64 {
    let quiet = spec.with_noise(NoiseProfile::none());
    (0..=60).map(|i| mean_return(&GainController(0.25 * i as f64), e, &quiet, episodes)).fold(f64::NEG_INFINITY, f64::max)
}

/// Expert return under `spec` divided by the noiseless ceiling.
pub fn expert_ceiling_ratio(e: &EmbodimentVector, spec: &EnvSpec, episodes: u64) -> f64 {
    mean_return(&Expert::tuned(), e, spec, episodes) / noiseless_ceiling(e, spec, episodes)
}

pub fn cfg(d_model: usize, heads: usize, layers: usize, max_tokens: usize) -> GptConfig {
    GptConfig { n_layers: layers, n_heads: heads, d_model, max_tokens, dropout_rate: 0.0 }
}

pub fn model(config: GptConfig, seed: u64) -> (Gpt, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gpt = Gpt::init(config, &mut store, "gpt", &mut rng).unwrap();
    // Larger weights than the 0.02 initialiser so the checks exercise
    // non-trivial attention patterns.
    for t in store.tensors_mut() {
        if t.rank() == 2 {
            for v in t.data_mut() {
                *v *= 20.0;
            }
        }
    }
    (gpt, store)
}

/// Direct per-head loop evaluation of scaled dot-product attention with a
/// causal window, followed by the output projection.
pub fn naive_attention(x: &Tensor, gpt: &Gpt, store: &ParamStore) -> Vec<f64> {
    let (w_qkv, b_qkv, w_out, b_out) = gpt.qkv_params(store, 0);
    let d = gpt.config.d_model;
    let dk = gpt.config.d_k();
    let n = x.rows();
    let proj = |row: &[f64], col: usize| -> f64 {
        (0..d).map(|i| row[i] * w_qkv.data()[i * 3 * d + col]).sum::<f64>() + b_qkv.data()[col]
    };
    let mut z = vec![0.0; n * d];
    for h in 0..gpt.config.n_heads {
        for i in 0..n {
            let q: Vec<f64> = (0..dk).map(|c| proj(x.row(i), h * dk + c)).collect();
            let mut logits = Vec::new();
            for j in 0..=i {
                let k: Vec<f64> = (0..dk).map(|c| proj(x.row(j), d + h * dk + c)).collect();
                let dot: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                logits.push(dot / (dk as f64).sqrt());
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..=i {
                let w = exps[j] / total;
                for c in 0..dk {
                    z[i * d + h * dk + c] += w * proj(x.row(j), 2 * d + h * dk + c);
                }
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for o in 0..d {
            out[i * d + o] = (0..d).map(|c| z[i * d + c] * w_out.data()[c * d + o]).sum::<f64>() + b_out.data()[o];
        }
    }
    out
}

pub fn fused_attention(x: &Tensor, gpt: &Gpt, store: &ParamStore) -> Vec<f64> {
    let mut g = Graph::inference();
    let vars = bind(&mut g, store);
    let xv = g.constant(x.clone());
    let z = gpt.self_attention(&mut g, &vars, 0, xv, 1, CausalMask::new(x.rows()), None).unwrap();
    g.data(z).to_vec()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, piv);
        inv.swap(col, piv);
        let p = a[col][col];
        for j in 0..n {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                for j in 0..n {
                    a[r][j] -= f * a[col][j];
                    inv[r][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

pub fn dense_posterior(gp: &GpState, x: &[f64]) -> (f64, f64) {
    let n = gp.inputs.len();
    let k = |a: &[f64], b: &[f64]| {
        let r2: f64 = a.iter().zip(b).zip(&gp.length_scales).map(|((p, q), l)| (p - q) * (p - q) / (l * l)).sum();
        gp.signal_var * (-r2 / 2.0).exp()
    };
    let mut km = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            km[i][j] = k(&gp.inputs[i], &gp.inputs[j]);
        }
        km[i][i] += gp.noise_var + gp.jitter;
    }
    let inv = invert(km);
    let ks: Vec<f64> = gp.inputs.iter().map(|xi| k(x, xi)).collect();
    let mut mu = gp.mean;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            mu += ks[i] * inv[i][j] * (gp.targets[j] - gp.mean);
            quad += ks[i] * inv[i][j] * ks[j];
        }
    }
    (mu, gp.signal_var - quad)
}

pub fn random_points(n: usize, dim: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
            let y = (3.0 * x[0]).sin() + x.iter().sum::<f64>() + 0.1 * rng.gen::<f64>();
            (x, y)
        })
        .collect()
}
