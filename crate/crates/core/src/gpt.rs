//! Causal decoder-only transformer.
//!
//! Token sequences are processed in batches laid out as `[batch·n × d_model]`
//! row blocks, one block of `n` rows per sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ParamStore;
use crate::graph::{Dropout, Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// Standard deviation of the normal initialiser for projections and tables.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum GptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of {n} tokens exceeds the context of {max} tokens")]
    TooManyTokens { n: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_tokens: usize,
    pub dropout_rate: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self { n_layers: 3, n_heads: 4, d_model: 64, max_tokens: 60, dropout_rate: 0.1 }
    }
}

impl GptConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), GptError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model < 2 {
            return Err(GptError::Config("layers, heads and width must be positive (width ≥ 2)".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(GptError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_tokens < 3 {
            return Err(GptError::Config("max_tokens must cover at least one timestep (3 tokens)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(GptError::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Lower-triangular attention pattern over `token_count` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub token_count: usize,
}

impl CausalMask {
    pub fn new(token_count: usize) -> Self {
        Self { token_count }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        key <= query && query < self.token_count
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_out: usize,
    b_out: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Parameter layout of a GPT stack inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gpt {
    pub config: GptConfig,
    blocks: Vec<BlockParams>,
    lnf_g: usize,
    lnf_b: usize,
}

impl Gpt {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn init<R: Rng>(config: GptConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self, GptError> {
        config.validate()?;
        let d = config.d_model;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("{prefix}.h{l}.{s}");
            blocks.push(BlockParams {
                ln1_g: store.push(p("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: store.push(p("ln1.b"), Tensor::zeros(&[d])),
                w_qkv: store.push(p("attn.w_qkv"), Tensor::randn(&[d, 3 * d], INIT_STD, rng)),
                b_qkv: store.push(p("attn.b_qkv"), Tensor::zeros(&[3 * d])),
                w_out: store.push(p("attn.w_out"), Tensor::randn(&[d, d], INIT_STD, rng)),
                b_out: store.push(p("attn.b_out"), Tensor::zeros(&[d])),
                ln2_g: store.push(p("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: store.push(p("ln2.b"), Tensor::zeros(&[d])),
                w_fc: store.push(p("mlp.w_fc"), Tensor::randn(&[d, 4 * d], INIT_STD, rng)),
                b_fc: store.push(p("mlp.b_fc"), Tensor::zeros(&[4 * d])),
                w_proj: store.push(p("mlp.w_proj"), Tensor::randn(&[4 * d, d], INIT_STD, rng)),
                b_proj: store.push(p("mlp.b_proj"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = store.push(format!("{prefix}.ln_f.g"), Tensor::full(&[d], 1.0));
        let lnf_b = store.push(format!("{prefix}.ln_f.b"), Tensor::zeros(&[d]));
        Ok(Self { config, blocks, lnf_g, lnf_b })
    }

    /// Names of the output projections that feed each residual stream.
    pub fn residual_output_params(&self, store: &ParamStore) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [b.w_out, b.b_out, b.w_proj, b.b_proj])
            .map(|i| store.names()[i].clone())
            .collect()
    }

    fn check_tokens(&self, g: &Graph, x: Var, batch: usize, n: usize) -> Result<(), GptError> {
        if n > self.config.max_tokens {
            return Err(GptError::TooManyTokens { n, max: self.config.max_tokens });
        }
        let shape = g.shape(x);
        if shape != [batch * n, self.config.d_model] {
            return Err(TensorError::ShapeMismatch {
                op: "gpt",
                left: shape.to_vec(),
                right: vec![batch * n, self.config.d_model],
            }
            .into());
        }
        Ok(())
    }

    /// Multi-head masked self-attention of layer `layer` applied to `x`
    /// (already normalised), including the output projection.
    pub fn self_attention(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: usize,
        x: Var,
        batch: usize,
        mask: CausalMask,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var, GptError> {
        let n = mask.token_count;
        self.check_tokens(g, x, batch, n)?;
        let b = &self.blocks[layer];
        let qkv = g.linear(x, vars[b.w_qkv], vars[b.b_qkv])?;
        let z = g.causal_attention(qkv, batch, n, self.config.n_heads, dropout)?;
        Ok(g.linear(z, vars[b.w_out], vars[b.b_out])?)
    }

    /// Pre-norm residual block: `x + Attn(LN(x))`, then `+ MLP(LN(·))`.
    pub fn transformer_block(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: usize,
        x: Var,
        batch: usize,
        mask: CausalMask,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, GptError> {
        let b = self.blocks[layer];
        let h = g.layer_norm(x, vars[b.ln1_g], vars[b.ln1_b])?;
        let a = self.self_attention(g, vars, layer, h, batch, mask, dropout.as_deref_mut())?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, vars[b.ln2_g], vars[b.ln2_b])?;
        let h = g.linear(h, vars[b.w_fc], vars[b.b_fc])?;
        let h = g.gelu(h);
        let m = g.linear(h, vars[b.w_proj], vars[b.b_proj])?;
        let m = g.dropout(m, dropout);
        Ok(g.add(x, m)?)
    }

    /// All blocks followed by the final layer norm.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        tokens: Var,
        batch: usize,
        n: usize,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, GptError> {
        self.check_tokens(g, tokens, batch, n)?;
        let mask = CausalMask::new(n);
        let mut x = tokens;
        for layer in 0..self.blocks.len() {
            x = self.transformer_block(g, vars, layer, x, batch, mask, dropout.as_deref_mut())?;
        }
        Ok(g.layer_norm(x, vars[self.lnf_g], vars[self.lnf_b])?)
    }

    /// Attention of one sequence composed from primitive graph operations
    /// (per-head slices, `QKᵀ`, future masking, softmax). Slower than the
    /// fused kernel; used to cross-check it.
    pub fn self_attention_composed(
        &self,
        g: &mut Graph,
        vars: &[Var],
        layer: usize,
        x: Var,
        mask: CausalMask,
    ) -> Result<Var, GptError> {
        self.check_tokens(g, x, 1, mask.token_count)?;
        let b = &self.blocks[layer];
        let d = self.config.d_model;
        let dk = self.config.d_k();
        let qkv = g.linear(x, vars[b.w_qkv], vars[b.b_qkv])?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let q = g.slice(qkv, 1, h * dk, (h + 1) * dk)?;
            let k = g.slice(qkv, 1, d + h * dk, d + (h + 1) * dk)?;
            let v = g.slice(qkv, 1, 2 * d + h * dk, 2 * d + (h + 1) * dk)?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
            let logits = g.mask_future(logits)?;
            let w = g.softmax(logits, 1)?;
            heads.push(g.matmul(w, v)?);
        }
        let z = g.concat(&heads, 1)?;
        Ok(g.linear(z, vars[b.w_out], vars[b.b_out])?)
    }

    pub fn qkv_params<'a>(&self, store: &'a ParamStore, layer: usize) -> (&'a Tensor, &'a Tensor, &'a Tensor, &'a Tensor) {
        let b = &self.blocks[layer];
        (store.get(b.w_qkv), store.get(b.b_qkv), store.get(b.w_out), store.get(b.b_out))
    }
}

/// Binds every parameter in `store` to a graph leaf, in store order.
pub fn bind(g: &mut Graph, store: &ParamStore) -> Vec<Var> {
    store.tensors().iter().map(|t| g.param(t)).collect()
}

/// Extracts per-parameter gradients after `backward`; untouched parameters
/// get zeros.
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
        .collect()
}
