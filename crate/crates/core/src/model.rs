//! The trainable adapter (prompt encoder + classifier), its full forward pipeline,
//! and the checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Var;
use crate::backbone::{Backbone, ImageEmbedding, MaskBundle, MaskNodes, PromptNodes as DecoderPrompts, SemanticGrid};
use crate::classifier::{classify, pool_prompts, ClassifierOutput};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::positional::{build_grid, DpeGrid};
use crate::prompt_encoder::{encode, AdapterConfig, PromptNodes, PromptSet};
use crate::tensor_io::{self, TensorFile};

pub const FORMAT_VERSION: &str = "1";
const META_VERSION: &str = "format_version";
const META_CONFIG: &str = "adapter_config";

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub cfg: AdapterConfig,
    pub params: ParamStore,
}

impl Adapter {
    pub fn new(cfg: AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        cfg.init_prompt_encoder(&mut params, &mut rng);
        cfg.init_classifier(&mut params, &mut rng);
        Ok(Self { cfg, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Hex SHA-256 over parameter names, shapes and values (first 16 digits).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }

    /// Checks that the backbone emits grids and tokens of the sizes this adapter expects.
    pub fn check_backbone(&self, backbone: &dyn Backbone) -> Result<()> {
        let (h, w, c) = backbone.semantic_shape();
        ensure_shape("semantic grid height", self.cfg.grid_height, h)?;
        ensure_shape("semantic grid width", self.cfg.grid_width, w)?;
        ensure_shape("semantic grid channels", self.cfg.semantic_channels, c)?;
        ensure_shape("decoder token width", self.cfg.dim, backbone.frequency_matrix().encoding_dim())
    }

    /// DPE over the semantic grid using the backbone's frequency matrix.
    pub fn dpe(&self, backbone: &dyn Backbone) -> Result<DpeGrid> {
        self.check_backbone(backbone)?;
        build_grid(self.cfg.grid_height, self.cfg.grid_width, backbone.frequency_matrix())
    }

    /// Writes parameters with the format version, the architecture, and `extra` as metadata.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut file = TensorFile {
            tensors: self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            metadata: extra.clone(),
        };
        file.metadata.insert(META_VERSION.into(), FORMAT_VERSION.into());
        file.metadata.insert(META_CONFIG.into(), serde_json::to_string(&self.cfg)?);
        tensor_io::write(path, &file)
    }

    /// Loads a checkpoint; the architecture comes from its metadata.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let file = tensor_io::read(path, None)?;
        let mismatch = |msg: String| Error::CheckpointMismatch(format!("{}: {msg}", path.display()));
        match file.metadata.get(META_VERSION) {
            Some(v) if v == FORMAT_VERSION => {}
            Some(v) => return Err(mismatch(format!("format version {v}, expected {FORMAT_VERSION}"))),
            None => return Err(mismatch("missing format version".into())),
        }
        let cfg: AdapterConfig = serde_json::from_str(
            file.metadata
                .get(META_CONFIG)
                .ok_or_else(|| mismatch("missing adapter config".into()))?,
        )
        .map_err(|e| mismatch(format!("bad adapter config: {e}")))?;
        let reference = Self::new(cfg.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, expected) in reference.params.iter() {
            let t = file
                .tensors
                .get(name)
                .ok_or_else(|| mismatch(format!("missing tensor {name}")))?;
            if t.dim() != expected.dim() {
                return Err(mismatch(format!("tensor {name} is {:?}, expected {:?}", t.dim(), expected.dim())));
            }
            params.insert(name.clone(), t.clone());
        }
        if let Some(extra) = file.tensors.keys().find(|k| reference.params.get(k).is_none()) {
            return Err(mismatch(format!("unexpected tensor {extra}")));
        }
        let mut meta = file.metadata;
        meta.remove(META_VERSION);
        meta.remove(META_CONFIG);
        Ok((Self { cfg, params }, meta))
    }

    /// Loads a checkpoint and refuses it unless its architecture equals `expected`.
    pub fn load_expecting(path: &Path, expected: &AdapterConfig) -> Result<(Self, BTreeMap<String, String>)> {
        let (adapter, meta) = Self::load(path)?;
        if &adapter.cfg != expected {
            return Err(Error::CheckpointMismatch(format!(
                "{} was trained with {}, configuration expects {}",
                path.display(),
                serde_json::to_string(&adapter.cfg)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok((adapter, meta))
    }
}

/// Graph nodes of one full forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub prompts: PromptNodes,
    pub masks: MaskNodes,
    /// `N × 1` classifier logits.
    pub logits: Var,
}

/// Prompt encoder, decoder, and classifier on one image.
pub fn forward(
    ctx: &mut Ctx<'_>,
    cfg: &AdapterConfig,
    backbone: &dyn Backbone,
    dpe: &DpeGrid,
    grid: &SemanticGrid,
    emb: &ImageEmbedding,
) -> Result<ForwardNodes> {
    let prompts = encode(ctx, cfg, grid, dpe, backbone.label_embeddings())?;
    let masks = backbone.decode(
        &mut ctx.graph,
        emb,
        dpe,
        DecoderPrompts {
            final_tokens: prompts.final_tokens,
            category_probs: prompts.category_probs,
            batches: cfg.n,
            points: cfg.n_p,
        },
    )?;
    let queries = pool_prompts(ctx, cfg, prompts.tokens)?;
    let logits = classify(ctx, cfg, queries, masks.tokens)?;
    Ok(ForwardNodes { prompts, masks, logits })
}

/// Evaluation-mode outputs of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prompts: PromptSet,
    pub bundle: MaskBundle,
    pub classifier: ClassifierOutput,
}

impl Prediction {
    pub fn from_nodes(ctx: &Ctx<'_>, cfg: &AdapterConfig, resolution: usize, nodes: &ForwardNodes, threshold: f64) -> Self {
        let value = |v: Var| -> Array2<f64> { ctx.value(v).clone() };
        Self {
            prompts: PromptSet::from_nodes(ctx, &nodes.prompts, cfg.n, cfg.n_p),
            bundle: MaskBundle {
                masks: value(nodes.masks.masks),
                resolution,
                mask_tokens: value(nodes.masks.tokens),
                quality: value(nodes.masks.quality).column(0).to_vec(),
            },
            classifier: ClassifierOutput::from_logits(value(nodes.logits).column(0).to_vec(), threshold),
        }
    }
}

/// Deterministic inference (dropout off).
pub fn predict(
    adapter: &Adapter,
    backbone: &dyn Backbone,
    dpe: &DpeGrid,
    grid: &SemanticGrid,
    emb: &ImageEmbedding,
    threshold: f64,
) -> Result<Prediction> {
    let mut ctx = Ctx::eval(&adapter.params);
    let nodes = forward(&mut ctx, &adapter.cfg, backbone, dpe, grid, emb)?;
    Ok(Prediction::from_nodes(&ctx, &adapter.cfg, backbone.mask_resolution(), &nodes, threshold))
}
