//! Frozen backbones: text-conditioned semantic grid, image embedding, and the
//! point-promptable mask decoder, behind one interface.
//!
//! The stub implementation is deterministic and differentiable so the adapter can be
//! trained and tested on CPU without foundation-model checkpoints.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use image::imageops::{self, FilterType};
use image::RgbImage;
use lru::LruCache;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, SparseRows, Var};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::positional::{DpeGrid, FrequencyMatrix};
use crate::tensor_io;

/// Category order used everywhere: foreground, background, no-point.
pub const CATEGORY_COUNT: usize = 3;

/// Tensor names in a safetensors export of the decoder checkpoint.
pub const CKPT_FREQUENCY: &str = "prompt_encoder.pe_layer.positional_encoding_gaussian_matrix";
pub const CKPT_FOREGROUND: &str = "prompt_encoder.point_embeddings.1.weight";
pub const CKPT_BACKGROUND: &str = "prompt_encoder.point_embeddings.0.weight";
pub const CKPT_NO_POINT: &str = "prompt_encoder.not_a_point_embed.weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    Stub,
    Real,
}

impl std::str::FromStr for BackboneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(Self::Stub),
            "real" => Ok(Self::Real),
            other => Err(Error::Config(format!("unknown backbone mode {other:?} (expected stub|real)"))),
        }
    }
}

/// Patch-grid embedding from the text-conditioned semantic backbone, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub height: usize,
    pub width: usize,
    /// `(height·width) × channels`
    pub grid: Array2<f64>,
    pub source_text: String,
    pub source_size: (usize, usize),
}

impl SemanticGrid {
    pub fn channels(&self) -> usize {
        self.grid.ncols()
    }

    pub fn cell(&self, i: usize, j: usize) -> ndarray::ArrayView1<'_, f64> {
        self.grid.row(i * self.width + j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingOrigin {
    Stub,
    Real,
}

/// Dense image embedding, row-major over a `size × size` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub size: usize,
    /// `(size·size) × dim`
    pub grid: Array2<f64>,
    pub source_size: (usize, usize),
    pub origin: EmbeddingOrigin,
}

/// Decoder outputs as values: one mask per prompt batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBundle {
    /// Decoder-native probabilities in `[0,1]`, `N × (res·res)`; binarized at 0.5.
    pub masks: Array2<f64>,
    pub resolution: usize,
    /// `N × d`
    pub mask_tokens: Array2<f64>,
    pub quality: Vec<f64>,
}

impl MaskBundle {
    pub fn len(&self) -> usize {
        self.masks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.nrows() == 0
    }

    /// Mask `i` resampled to `(h, w)` and binarized.
    pub fn binary_mask(&self, i: usize, h: usize, w: usize) -> BinaryMask {
        let r = self.resolution;
        let low = Array2::from_shape_fn((r, r), |(y, x)| self.masks[[i, y * r + x]]);
        crate::mask::binarize_probs(&crate::mask::resize_bilinear(&low, h, w))
    }
}

/// Decoder outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct MaskNodes {
    pub masks: Var,
    pub tokens: Var,
    pub quality: Var,
}

/// Prompt inputs for decoding: `final_tokens` is `(N·N_p) × d`, `category_probs` is `(N·N_p) × 3`.
#[derive(Debug, Clone, Copy)]
pub struct PromptNodes {
    pub final_tokens: Var,
    pub category_probs: Var,
    pub batches: usize,
    pub points: usize,
}

/// Uniform access to a pair of frozen backbones.
pub trait Backbone: Send + Sync {
    fn mode(&self) -> BackboneMode;

    fn frequency_matrix(&self) -> &FrequencyMatrix;

    /// `3 × d` category embeddings (foreground, background, no-point).
    fn label_embeddings(&self) -> &Array2<f64>;

    /// Shape of the semantic grid: `(height, width, channels)`.
    fn semantic_shape(&self) -> (usize, usize, usize);

    /// `hint` is the ground-truth semantic mask when available; the stub uses it as its
    /// text-conditioned response.
    fn semantic_grid(&self, image: &RgbImage, text: &str, hint: Option<&BinaryMask>) -> Result<SemanticGrid>;

    fn image_embedding(&self, image: &RgbImage) -> Result<ImageEmbedding>;

    /// Decoder-native output resolution.
    fn mask_resolution(&self) -> usize;

    /// Decodes every prompt batch in one pass, recording differentiable operations on `g`.
    fn decode(&self, g: &mut Graph, emb: &ImageEmbedding, dpe: &DpeGrid, prompts: PromptNodes) -> Result<MaskNodes>;

    /// SHA-256 over every frozen tensor, for freeze checks.
    fn weights_digest(&self) -> String;
}

/// Value-level decode without gradient tracking.
pub fn decode_values(
    backbone: &dyn Backbone,
    emb: &ImageEmbedding,
    dpe: &DpeGrid,
    final_tokens: &Array2<f64>,
    category_probs: &Array2<f64>,
    points: usize,
) -> Result<MaskBundle> {
    if points == 0 {
        return Err(Error::InvalidArgument("points per batch must be positive".into()));
    }
    let mut g = Graph::new();
    let ft = g.constant(final_tokens.clone());
    let cp = g.constant(category_probs.clone());
    let nodes = backbone.decode(
        &mut g,
        emb,
        dpe,
        PromptNodes {
            final_tokens: ft,
            category_probs: cp,
            batches: final_tokens.nrows() / points,
            points,
        },
    )?;
    Ok(MaskBundle {
        masks: g.value(nodes.masks).clone(),
        resolution: backbone.mask_resolution(),
        mask_tokens: g.value(nodes.tokens).clone(),
        quality: g.value(nodes.quality).column(0).to_vec(),
    })
}

fn digest_arrays<'a>(parts: impl IntoIterator<Item = &'a Array2<f64>>) -> String {
    let mut h = Sha256::new();
    for a in parts {
        h.update((a.nrows() as u64).to_le_bytes());
        h.update((a.ncols() as u64).to_le_bytes());
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

fn check_rgb_input(image: &RgbImage) -> Result<()> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    Ok(())
}

fn check_text(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument("text prompt must be non-empty".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubConfig {
    pub seed: u64,
    pub semantic_grid: usize,
    pub semantic_channels: usize,
    pub embed_grid: usize,
    pub embed_dim: usize,
    /// Fourier features; token width is twice this.
    pub frequency_features: usize,
    /// Disk radius in semantic-grid cells.
    pub disk_radius: f64,
    pub gain: f64,
    /// Colour-distance ramp (fraction of the RGB diagonal) for the evidence gate.
    pub evidence_low: f64,
    pub evidence_high: f64,
    pub label_embed_std: f64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            semantic_grid: 22,
            semantic_channels: 64,
            embed_grid: 64,
            embed_dim: 256,
            frequency_features: 128,
            disk_radius: 2.0,
            gain: 4.0,
            evidence_low: 0.1,
            evidence_high: 0.25,
            label_embed_std: 0.1,
        }
    }
}

impl StubConfig {
    /// Tiny dimensions for finite-difference probes.
    pub fn tiny() -> Self {
        Self {
            semantic_grid: 4,
            semantic_channels: 8,
            embed_grid: 8,
            embed_dim: 16,
            frequency_features: 8,
            disk_radius: 1.0,
            ..Self::default()
        }
    }

    pub fn token_dim(&self) -> usize {
        2 * self.frequency_features
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.semantic_grid,
            self.semantic_channels,
            self.embed_grid,
            self.embed_dim,
            self.frequency_features,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("stub backbone dimensions must be positive".into()));
        }
        if self.embed_dim < 4 {
            return Err(Error::Config("stub embed_dim must be at least 4".into()));
        }
        if !(self.evidence_low < self.evidence_high) || self.gain <= 0.0 || self.disk_radius <= 0.0 {
            return Err(Error::Config("invalid stub evidence ramp, gain or disk radius".into()));
        }
        Ok(())
    }
}

/// Deterministic, differentiable stand-in for both backbones.
#[derive(Debug, Clone)]
pub struct StubBackbone {
    cfg: StubConfig,
    freq: FrequencyMatrix,
    labels: Array2<f64>,
    /// Direction of the semantic channels 1.. (`1 × (channels−1)`).
    semantic_dirs: Array2<f64>,
    /// Colour projection for embedding channels 4..: `12 × (embed_dim−4)`.
    colour_proj: Array2<f64>,
    /// Mask-token map `d × d`.
    token_map: Array2<f64>,
    kernels: Arc<SparseRows>,
}

impl StubBackbone {
    pub fn new(cfg: StubConfig) -> Result<Self> {
        cfg.validate()?;
        let freq = FrequencyMatrix::from_seed(cfg.seed, cfg.frequency_features);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed0f_57ab);
        let mut normal = |r: usize, c: usize, s: f64| {
            Array2::from_shape_fn((r, c), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
        };
        let d = cfg.token_dim();
        let labels = normal(CATEGORY_COUNT, d, cfg.label_embed_std);
        let semantic_dirs = normal(1, cfg.semantic_channels - 1, 1.0);
        let colour_proj = normal(12, cfg.embed_dim - 4, 1.0 / 12f64.sqrt());
        let token_map = normal(d, d, 1.0 / (d as f64).sqrt());
        let kernels = Arc::new(disk_kernels(cfg.semantic_grid, 2 * cfg.embed_grid, cfg.disk_radius));
        Ok(Self {
            cfg,
            freq,
            labels,
            semantic_dirs,
            colour_proj,
            token_map,
            kernels,
        })
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    /// Stub decoder resolution: twice the image-embedding grid.
    fn resolution(&self) -> usize {
        2 * self.cfg.embed_grid
    }

    fn resized(&self, image: &RgbImage) -> RgbImage {
        let r = self.resolution() as u32;
        if image.dimensions() == (r, r) {
            image.clone()
        } else {
            imageops::resize(image, r, r, FilterType::Triangle)
        }
    }

    /// Per-pixel evidence in `[0,1]` at decoder resolution, plus the pixel offsets from the median colour.
    fn evidence(&self, image: &RgbImage) -> (Vec<f64>, Vec<[f64; 3]>) {
        let img = self.resized(image);
        let mut median = [0.0; 3];
        for (c, m) in median.iter_mut().enumerate() {
            let mut vals: Vec<u8> = img.pixels().map(|p| p.0[c]).collect();
            vals.sort_unstable();
            *m = vals[vals.len() / 2] as f64;
        }
        let diag = 255.0 * 3f64.sqrt();
        let (lo, hi) = (self.cfg.evidence_low, self.cfg.evidence_high);
        let mut ev = Vec::with_capacity(img.len() / 3);
        let mut offsets = Vec::with_capacity(img.len() / 3);
        for p in img.pixels() {
            let off = [0, 1, 2].map(|c| (p.0[c] as f64 - median[c]) / 255.0);
            let dist = (off.iter().map(|v| v * v).sum::<f64>()).sqrt() * 255.0 / diag;
            ev.push(((dist - lo) / (hi - lo)).clamp(0.0, 1.0));
            offsets.push(off);
        }
        (ev, offsets)
    }

    /// Decoder gate (`1 × res²`) read back from embedding channels 0..4.
    fn gate(&self, emb: &ImageEmbedding) -> Array2<f64> {
        let res = self.resolution();
        Array2::from_shape_fn((1, res * res), |(_, p)| {
            let (y, x) = (p / res, p % res);
            emb.grid[[(y / 2) * emb.size + x / 2, (y % 2) * 2 + x % 2]]
        })
    }

    fn semantic_from_mask(&self, mask: &BinaryMask, text: &str, source_size: (usize, usize)) -> SemanticGrid {
        let g = self.cfg.semantic_grid;
        let (h, w) = mask.dims();
        let ch = self.cfg.semantic_channels;
        let mut grid = Array2::zeros((g * g, ch));
        for i in 0..g {
            let (y0, y1) = (i * h / g, ((i + 1) * h / g).max(i * h / g + 1).min(h));
            for j in 0..g {
                let (x0, x1) = (j * w / g, ((j + 1) * w / g).max(j * w / g + 1).min(w));
                let mut on = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        on += mask.get(y, x) as usize;
                    }
                }
                let frac = on as f64 / ((y1 - y0) * (x1 - x0)) as f64;
                let mut row = grid.row_mut(i * g + j);
                row[0] = frac;
                for c in 1..ch {
                    row[c] = frac * self.semantic_dirs[[0, c - 1]];
                }
            }
        }
        SemanticGrid {
            height: g,
            width: g,
            grid,
            source_text: text.to_string(),
            source_size,
        }
    }
}

/// Soft disks: row `c` holds the weights of semantic cell `c` over a `res × res` raster.
/// Weight is 1 within `radius − 0.5` cells, falls linearly to 0 at `radius + 0.5`.
pub fn disk_kernels(grid: usize, res: usize, radius: f64) -> SparseRows {
    let cell_px = res as f64 / grid as f64;
    let reach = radius + 0.5;
    let mut rows = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let (cy, cx) = ((i as f64 + 0.5) * cell_px, (j as f64 + 0.5) * cell_px);
            let y0 = ((cy - reach * cell_px).floor().max(0.0)) as usize;
            let y1 = ((cy + reach * cell_px).ceil() as usize).min(res);
            let x0 = ((cx - reach * cell_px).floor().max(0.0)) as usize;
            let x1 = ((cx + reach * cell_px).ceil() as usize).min(res);
            let mut row = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = ((y as f64 + 0.5 - cy).hypot(x as f64 + 0.5 - cx)) / cell_px;
                    let wgt = (reach - d).clamp(0.0, 1.0);
                    if wgt > 0.0 {
                        row.push(((y * res + x) as u32, wgt));
                    }
                }
            }
            rows.push(row);
        }
    }
    SparseRows::new(res * res, rows)
}

/// `N × (N·points)` matrix with `scale` where column `k` belongs to batch `k / points`.
fn grouping(batches: usize, points: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((batches, batches * points), |(b, k)| if k / points == b { scale } else { 0.0 })
}

impl Backbone for StubBackbone {
    fn mode(&self) -> BackboneMode {
        BackboneMode::Stub
    }

    fn frequency_matrix(&self) -> &FrequencyMatrix {
        &self.freq
    }

    fn label_embeddings(&self) -> &Array2<f64> {
        &self.labels
    }

    fn semantic_shape(&self) -> (usize, usize, usize) {
        (self.cfg.semantic_grid, self.cfg.semantic_grid, self.cfg.semantic_channels)
    }

    fn semantic_grid(&self, image: &RgbImage, text: &str, hint: Option<&BinaryMask>) -> Result<SemanticGrid> {
        check_rgb_input(image)?;
        check_text(text)?;
        let size = (image.height() as usize, image.width() as usize);
        let mask = match hint {
            Some(m) if m.dims() == size => m.clone(),
            Some(m) => {
                return Err(Error::shape("semantic hint height", size.0, m.dims().0));
            }
            // without ground truth, threshold the colour evidence
            None => {
                let (ev, _) = self.evidence(image);
                let r = self.resolution();
                BinaryMask::from_vec(r, r, ev.iter().map(|&e| e >= 0.5).collect())
                    .expect("evidence length")
                    .resize_nearest(size.0, size.1)
            }
        };
        Ok(self.semantic_from_mask(&mask, text, size))
    }

    fn image_embedding(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        check_rgb_input(image)?;
        let (ev, offsets) = self.evidence(image);
        let (g, dim, res) = (self.cfg.embed_grid, self.cfg.embed_dim, self.resolution());
        let mut grid = Array2::zeros((g * g, dim));
        let mut colours = Array2::zeros((g * g, 12));
        for y in 0..res {
            for x in 0..res {
                let cell = (y / 2) * g + x / 2;
                let sub = (y % 2) * 2 + x % 2;
                grid[[cell, sub]] = ev[y * res + x];
                for c in 0..3 {
                    colours[[cell, sub * 3 + c]] = offsets[y * res + x][c];
                }
            }
        }
        let projected = colours.dot(&self.colour_proj);
        grid.slice_mut(ndarray::s![.., 4..]).assign(&projected);
        Ok(ImageEmbedding {
            size: g,
            grid,
            source_size: (image.height() as usize, image.width() as usize),
            origin: EmbeddingOrigin::Stub,
        })
    }

    fn mask_resolution(&self) -> usize {
        self.resolution()
    }

    fn decode(&self, g: &mut Graph, emb: &ImageEmbedding, dpe: &DpeGrid, prompts: PromptNodes) -> Result<MaskNodes> {
        if emb.origin != EmbeddingOrigin::Stub {
            return Err(Error::Backbone("stub decoder requires a stub image embedding".into()));
        }
        crate::error::ensure_shape("image embedding grid", self.cfg.embed_grid, emb.size)?;
        crate::error::ensure_shape("image embedding width", self.cfg.embed_dim, emb.grid.ncols())?;
        crate::error::ensure_shape("dpe cells", self.kernels.nrows(), dpe.cells())?;
        let d = self.cfg.token_dim();
        let PromptNodes {
            final_tokens,
            category_probs,
            batches,
            points,
        } = prompts;
        let (rows, width) = g.shape(final_tokens);
        crate::error::ensure_shape("prompt token width", d, width)?;
        crate::error::ensure_shape("prompt token count", batches * points, rows)?;
        crate::error::ensure_shape("category count", CATEGORY_COUNT, g.shape(category_probs).1)?;
        crate::error::ensure_shape("category rows", rows, g.shape(category_probs).0)?;
        let res = self.resolution();
        if batches == 0 {
            return Ok(MaskNodes {
                masks: g.constant(Array2::zeros((0, res * res))),
                tokens: g.constant(Array2::zeros((0, d))),
                quality: g.constant(Array2::zeros((0, 1))),
            });
        }

        let dpe_v = g.constant(dpe.vectors().clone());
        let scores = g.matmul_t(final_tokens, dpe_v);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores);

        // foreground adds, background subtracts, no-point is neutral
        let sign_map = g.constant(Array2::from_shape_vec((3, 1), vec![1.0, -1.0, 0.0]).expect("3x1"));
        let sign = g.matmul(category_probs, sign_map);
        let signed = g.mul_col(attn, sign);
        let group = g.constant(grouping(batches, points, 1.0));
        let cell_weights = g.matmul(group, signed);
        let blended = g.sparse_matmul(cell_weights, self.kernels.clone());
        let blended = g.scale(blended, self.cfg.gain);
        let clamped = g.clamp01(blended);
        let masks = g.mul_const(clamped, Rc::new(self.gate(emb)));

        let sampled = g.matmul(attn, dpe_v);
        let mean = g.constant(grouping(batches, points, 1.0 / points as f64));
        let pooled = g.matmul(mean, sampled);
        let map = g.constant(self.token_map.clone());
        let tokens = g.matmul(pooled, map);

        let avg = g.constant(Array2::from_elem((res * res, 1), 1.0 / (res * res) as f64));
        let quality = g.matmul(masks, avg);
        Ok(MaskNodes { masks, tokens, quality })
    }

    fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(digest_arrays([
            self.freq.matrix(),
            &self.labels,
            &self.semantic_dirs,
            &self.colour_proj,
            &self.token_map,
        ]));
        for i in 0..self.kernels.nrows() {
            for (c, w) in self.kernels.row(i) {
                h.update(c.to_le_bytes());
                h.update(w.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealConfig {
    /// safetensors export of the decoder checkpoint.
    pub decoder_checkpoint: Option<PathBuf>,
    /// Directory of precomputed embeddings: `<sha256>.image.safetensors` (tensor `embedding`,
    /// 4096×256) and `<sha256>.semantic.safetensors` (tensor `grid`, 484×64).
    pub embeddings_dir: Option<PathBuf>,
}

/// Frozen tensors taken from released checkpoints; embeddings must be precomputed.
#[derive(Debug, Clone)]
pub struct RealBackbone {
    freq: FrequencyMatrix,
    labels: Array2<f64>,
    embeddings_dir: Option<PathBuf>,
}

const ACQUIRE_HINT: &str = "export the released decoder checkpoint to safetensors and set backbone.real.decoder_checkpoint";

impl RealBackbone {
    pub fn load(cfg: &RealConfig) -> Result<Self> {
        let path = cfg
            .decoder_checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("real backbone needs a decoder checkpoint ({ACQUIRE_HINT})")))?;
        if !path.is_file() {
            return Err(Error::Config(format!("decoder checkpoint {} not found ({ACQUIRE_HINT})", path.display())));
        }
        let file = tensor_io::read(path, None)?;
        let get = |name: &str| {
            file.tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Backbone(format!("{} lacks tensor {name}", path.display())))
        };
        let freq = FrequencyMatrix::new(get(CKPT_FREQUENCY)?)?;
        let d = freq.encoding_dim();
        let mut labels = Array2::zeros((CATEGORY_COUNT, d));
        for (row, name) in [CKPT_FOREGROUND, CKPT_BACKGROUND, CKPT_NO_POINT].iter().enumerate() {
            let t = get(name)?;
            crate::error::ensure_shape(name, d, t.len())?;
            labels.row_mut(row).assign(&Array1::from_iter(t.iter().copied()));
        }
        Ok(Self {
            freq,
            labels,
            embeddings_dir: cfg.embeddings_dir.clone(),
        })
    }

    fn precomputed(&self, image: &RgbImage, kind: &str, tensor: &str) -> Result<Array2<f64>> {
        let dir = self.embeddings_dir.as_deref().ok_or_else(|| {
            Error::Backbone("real backbone inference is not built in; set backbone.real.embeddings_dir to precomputed embeddings".into())
        })?;
        let path = dir.join(format!("{}.{kind}.safetensors", content_hash(image)));
        let file = tensor_io::read(&path, Some(&[tensor]))?;
        Ok(file.tensors.into_values().next().expect("requested tensor"))
    }
}

impl Backbone for RealBackbone {
    fn mode(&self) -> BackboneMode {
        BackboneMode::Real
    }

    fn frequency_matrix(&self) -> &FrequencyMatrix {
        &self.freq
    }

    fn label_embeddings(&self) -> &Array2<f64> {
        &self.labels
    }

    fn semantic_shape(&self) -> (usize, usize, usize) {
        (22, 22, 64)
    }

    fn semantic_grid(&self, image: &RgbImage, text: &str, _hint: Option<&BinaryMask>) -> Result<SemanticGrid> {
        check_rgb_input(image)?;
        check_text(text)?;
        let grid = self.precomputed(image, "semantic", "grid")?;
        crate::error::ensure_shape("semantic grid cells", 484, grid.nrows())?;
        crate::error::ensure_shape("semantic grid channels", 64, grid.ncols())?;
        Ok(SemanticGrid {
            height: 22,
            width: 22,
            grid,
            source_text: text.to_string(),
            source_size: (image.height() as usize, image.width() as usize),
        })
    }

    fn image_embedding(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        check_rgb_input(image)?;
        let grid = self.precomputed(image, "image", "embedding")?;
        crate::error::ensure_shape("image embedding cells", 4096, grid.nrows())?;
        Ok(ImageEmbedding {
            size: 64,
            grid,
            source_size: (image.height() as usize, image.width() as usize),
            origin: EmbeddingOrigin::Real,
        })
    }

    fn mask_resolution(&self) -> usize {
        256
    }

    fn decode(&self, _g: &mut Graph, _emb: &ImageEmbedding, _dpe: &DpeGrid, _prompts: PromptNodes) -> Result<MaskNodes> {
        Err(Error::Backbone(
            "the foundation mask decoder is not built in; use the stub backbone for training and evaluation".into(),
        ))
    }

    fn weights_digest(&self) -> String {
        digest_arrays([self.freq.matrix(), &self.labels])
    }
}

/// SHA-256 over image dimensions and pixels.
pub fn content_hash(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    pub stub: StubConfig,
    pub real: RealConfig,
    /// Image-embedding cache capacity; 0 disables caching.
    pub cache_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: BackboneMode::Stub,
            stub: StubConfig::default(),
            real: RealConfig::default(),
            cache_size: 16,
        }
    }
}

/// A backbone plus an optional content-hash keyed image-embedding cache.
pub struct Gateway {
    inner: Box<dyn Backbone>,
    cache: Option<Mutex<LruCache<String, Arc<ImageEmbedding>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Gateway {
    pub fn new(inner: Box<dyn Backbone>, cache_size: usize) -> Self {
        Self {
            inner,
            cache: NonZeroUsize::new(cache_size).map(|n| Mutex::new(LruCache::new(n))),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn from_config(cfg: &BackboneConfig) -> Result<Self> {
        let inner: Box<dyn Backbone> = match cfg.mode {
            BackboneMode::Stub => Box::new(StubBackbone::new(cfg.stub.clone())?),
            BackboneMode::Real => Box::new(RealBackbone::load(&cfg.real)?),
        };
        Ok(Self::new(inner, cfg.cache_size))
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.inner.as_ref()
    }

    pub fn image_embedding(&self, image: &RgbImage) -> Result<Arc<ImageEmbedding>> {
        let Some(cache) = &self.cache else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::new(self.inner.image_embedding(image)?));
        };
        let key = content_hash(image);
        if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let emb = Arc::new(self.inner.image_embedding(image)?);
        cache.lock().expect("cache lock").put(key, emb.clone());
        Ok(emb)
    }

    /// `(hits, misses)` of the embedding cache.
    pub fn cache_stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }
}

impl std::ops::Deref for Gateway {
    type Target = dyn Backbone;

    fn deref(&self) -> &Self::Target {
        self.inner.as_ref()
    }
}

/// Writes a decoder-checkpoint export that [`RealBackbone::load`] accepts (test helper and
/// documentation of the expected tensor names).
pub fn write_decoder_export(path: &Path, freq: &FrequencyMatrix, labels: &Array2<f64>) -> Result<()> {
    let mut file = tensor_io::TensorFile::default();
    file.tensors.insert(CKPT_FREQUENCY.into(), freq.matrix().clone());
    let names = [CKPT_FOREGROUND, CKPT_BACKGROUND, CKPT_NO_POINT];
    for (row, name) in names.iter().enumerate() {
        file.tensors.insert((*name).into(), labels.row(row).to_owned().insert_axis(ndarray::Axis(0)));
    }
    tensor_io::write(path, &file)
}
