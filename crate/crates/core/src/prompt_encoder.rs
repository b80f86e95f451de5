//! Prompt encoder: semantic patch grid to batches of decoder-ready point tokens.
//!
//! ```text
//! grid (h·w × c) ─ upscale MLP ─ self-attention (+DPE) ─ filter MLP ─┐
//!                      learned queries ─ cross-attention (K = filtered+DPE, V = DPE)
//!                                          └─ label linear ─ soft category mixture
//! ```

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{SemanticGrid, CATEGORY_COUNT};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Activation, Ctx, ParamStore};
use crate::positional::DpeGrid;

/// Architecture hyperparameters shared by both adapter networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub semantic_channels: usize,
    pub dim: usize,
    pub heads: usize,
    /// Prompt batches per image.
    pub n: usize,
    /// Points per batch.
    pub n_p: usize,
    pub classifier_pool_hidden: usize,
    pub classifier_head_hidden: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            grid_height: 22,
            grid_width: 22,
            semantic_channels: 64,
            dim: 256,
            heads: 8,
            n: 11,
            n_p: 3,
            classifier_pool_hidden: 1536,
            classifier_head_hidden: 1024,
        }
    }
}

pub const QUERY_INIT_STD: f64 = 0.02;

impl AdapterConfig {
    /// Grid 4×4×8, width 16, two batches of two points.
    pub fn tiny() -> Self {
        Self {
            grid_height: 4,
            grid_width: 4,
            semantic_channels: 8,
            dim: 16,
            heads: 2,
            n: 2,
            n_p: 2,
            classifier_pool_hidden: 24,
            classifier_head_hidden: 12,
        }
    }

    pub fn queries(&self) -> usize {
        self.n * self.n_p
    }

    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid_height,
            self.grid_width,
            self.semantic_channels,
            self.dim,
            self.heads,
            self.n,
            self.n_p,
            self.classifier_pool_hidden,
            self.classifier_head_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Adds freshly initialized prompt-encoder parameters (prefix `pe.`).
    pub fn init_prompt_encoder(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        store.init_mlp("pe.upscale", &[self.semantic_channels, d, d], rng);
        store.init_attention("pe.patch_attn", d, rng);
        store.init_layer_norm("pe.patch_norm", d);
        store.init_mlp("pe.filter", &[d, d, d], rng);
        store.init_normal("pe.queries", self.queries(), d, QUERY_INIT_STD, rng);
        store.init_attention("pe.sampler_attn", d, rng);
        store.init_layer_norm("pe.sampler_norm", d);
        store.init_linear("pe.label", d, CATEGORY_COUNT, rng);
    }
}

/// Prompt-encoder outputs as graph nodes; every node has `N·N_p` rows, batch `k` is rows `k·N_p..`.
#[derive(Debug, Clone, Copy)]
pub struct PromptNodes {
    /// Sampler outputs before the category embedding (`N·N_p × d`).
    pub tokens: Var,
    pub category_logits: Var,
    pub category_probs: Var,
    pub final_tokens: Var,
}

/// Prompt-encoder outputs as values.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub n: usize,
    pub n_p: usize,
    pub tokens: Array2<f64>,
    pub category_logits: Array2<f64>,
    pub final_tokens: Array2<f64>,
}

impl PromptSet {
    pub fn from_nodes(ctx: &Ctx<'_>, nodes: &PromptNodes, n: usize, n_p: usize) -> Self {
        Self {
            n,
            n_p,
            tokens: ctx.value(nodes.tokens).clone(),
            category_logits: ctx.value(nodes.category_logits).clone(),
            final_tokens: ctx.value(nodes.final_tokens).clone(),
        }
    }

    /// Token of point `p` in batch `b`.
    pub fn token(&self, b: usize, p: usize) -> ndarray::ArrayView1<'_, f64> {
        self.final_tokens.row(b * self.n_p + p)
    }

    pub fn category_probs(&self) -> Array2<f64> {
        crate::autograd::softmax_rows(&self.category_logits)
    }
}

/// Per-patch MLP lifting semantic channels to the model width.
pub fn upscale(ctx: &mut Ctx<'_>, grid: Var) -> Var {
    ctx.mlp("pe.upscale", 2, Activation::Gelu, grid)
}

/// Self-attention with DPE on queries and keys, residual, layer norm, then DPE re-added.
pub fn self_attend_patches(ctx: &mut Ctx<'_>, cfg: &AdapterConfig, tokens: Var, dpe: Var) -> Var {
    let qk = ctx.graph.add(tokens, dpe);
    let attended = ctx.attention("pe.patch_attn", cfg.heads, qk, qk, tokens);
    let residual = ctx.graph.add(attended, tokens);
    let normed = ctx.layer_norm("pe.patch_norm", residual);
    ctx.graph.add(normed, dpe)
}

pub fn filter_patches(ctx: &mut Ctx<'_>, tokens: Var) -> Var {
    ctx.mlp("pe.filter", 2, Activation::Gelu, tokens)
}

/// Learned queries attend over the filtered patches and read out DPE values.
pub fn sample_points(ctx: &mut Ctx<'_>, cfg: &AdapterConfig, filtered: Var, dpe: Var) -> Var {
    let queries = ctx.p("pe.queries");
    let keys = ctx.graph.add(filtered, dpe);
    let sampled = ctx.attention("pe.sampler_attn", cfg.heads, queries, keys, dpe);
    let residual = ctx.graph.add(sampled, queries);
    ctx.layer_norm("pe.sampler_norm", residual)
}

/// Category logits plus the softmax-weighted category embedding added to every point.
pub fn label_points(ctx: &mut Ctx<'_>, sampled: Var, label_embeds: Var) -> PromptNodes {
    let logits = ctx.linear("pe.label", sampled);
    let probs = ctx.graph.softmax(logits);
    let mixture = ctx.graph.matmul(probs, label_embeds);
    let final_tokens = ctx.graph.add(sampled, mixture);
    PromptNodes {
        tokens: sampled,
        category_logits: logits,
        category_probs: probs,
        final_tokens,
    }
}

/// Full prompt encoder on one semantic grid.
pub fn encode(
    ctx: &mut Ctx<'_>,
    cfg: &AdapterConfig,
    grid: &SemanticGrid,
    dpe: &DpeGrid,
    label_embeds: &Array2<f64>,
) -> Result<PromptNodes> {
    ensure_shape("semantic grid height", cfg.grid_height, grid.height)?;
    ensure_shape("semantic grid width", cfg.grid_width, grid.width)?;
    ensure_shape("semantic grid channels", cfg.semantic_channels, grid.channels())?;
    ensure_shape("dpe cells", cfg.cells(), dpe.cells())?;
    ensure_shape("dpe width", cfg.dim, dpe.dim())?;
    ensure_shape("label embedding rows", CATEGORY_COUNT, label_embeds.nrows())?;
    ensure_shape("label embedding width", cfg.dim, label_embeds.ncols())?;
    if grid.grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("semantic grid has non-finite entries".into()));
    }
    let x = ctx.constant(grid.grid.clone());
    let dpe_v = ctx.constant(dpe.vectors().clone());
    let labels = ctx.constant(label_embeds.clone());
    let up = upscale(ctx, x);
    let attended = self_attend_patches(ctx, cfg, up, dpe_v);
    let filtered = filter_patches(ctx, attended);
    let sampled = sample_points(ctx, cfg, filtered, dpe_v);
    Ok(label_points(ctx, sampled, labels))
}
