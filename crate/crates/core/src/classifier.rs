//! Mask classifier: keeps or discards each decoded mask using the prompt tokens and
//! the decoder's mask tokens.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{ensure_shape, Error, Result};
use crate::losses::sigmoid;
use crate::nn::{Activation, Ctx, ParamStore};
use crate::prompt_encoder::AdapterConfig;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

impl AdapterConfig {
    /// Adds freshly initialized classifier parameters (prefix `cls.`).
    pub fn init_classifier(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        store.init_mlp("cls.pool", &[self.n_p * d, self.classifier_pool_hidden, d], rng);
        store.init_attention("cls.cross_attn", d, rng);
        store.init_layer_norm("cls.cross_norm", d);
        store.init_attention("cls.self_attn", d, rng);
        store.init_layer_norm("cls.self_norm", d);
        store.init_mlp("cls.head", &[d, self.classifier_head_hidden, 1], rng);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub keep_flags: Vec<bool>,
}

impl ClassifierOutput {
    pub fn from_logits(logits: Vec<f64>, threshold: f64) -> Self {
        let probabilities: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let keep_flags = probabilities.iter().map(|&p| p >= threshold).collect();
        Self {
            logits,
            probabilities,
            keep_flags,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Concatenates each batch's `N_p` pre-label tokens and maps them to one query per mask.
pub fn pool_prompts(ctx: &mut Ctx<'_>, cfg: &AdapterConfig, tokens: Var) -> Result<Var> {
    let (rows, width) = ctx.graph.shape(tokens);
    ensure_shape("prompt token width", cfg.dim, width)?;
    if rows % cfg.n_p != 0 {
        return Err(Error::shape("prompt token rows (multiple of N_p)", cfg.n_p * (rows / cfg.n_p + 1), rows));
    }
    let n = rows / cfg.n_p;
    if n == 0 {
        return Ok(ctx.constant(Array2::zeros((0, cfg.dim))));
    }
    let concat = ctx.graph.reshape(tokens, n, cfg.n_p * cfg.dim);
    Ok(ctx.mlp("cls.pool", 2, Activation::Relu, concat))
}

/// Cross-attention from queries to mask tokens, self-attention, then the logit head (`N × 1`).
pub fn classify(ctx: &mut Ctx<'_>, cfg: &AdapterConfig, queries: Var, mask_tokens: Var) -> Result<Var> {
    let (n, dq) = ctx.graph.shape(queries);
    let (m, dm) = ctx.graph.shape(mask_tokens);
    ensure_shape("classifier query width", cfg.dim, dq)?;
    ensure_shape("mask token width", cfg.dim, dm)?;
    ensure_shape("mask token count", n, m)?;
    if n == 0 {
        return Ok(ctx.constant(Array2::zeros((0, 1))));
    }
    let cross = ctx.attention("cls.cross_attn", cfg.heads, queries, mask_tokens, mask_tokens);
    let cross = ctx.graph.add(cross, queries);
    let cross = ctx.layer_norm("cls.cross_norm", cross);
    let attended = ctx.attention("cls.self_attn", cfg.heads, cross, cross, cross);
    let attended = ctx.graph.add(attended, cross);
    let attended = ctx.layer_norm("cls.self_norm", attended);
    Ok(ctx.mlp("cls.head", 2, Activation::Relu, attended))
}

/// Indices of masks whose keep probability reaches `threshold`, in original order.
pub fn select(out: &ClassifierOutput, threshold: f64) -> Vec<usize> {
    out.probabilities
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect()
}
