//! Training loop with frozen backbones: schedule, AdamW, matching-derived targets,
//! checkpoints, validation tracking and bit-exact resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::autograd::Var;
use crate::backbone::{BackboneConfig, Gateway, ImageEmbedding, SemanticGrid};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, load_split, EvalRequest, Prepared, SplitEval};
use crate::losses::{bce_node, pair_loss_node, LossConfig};
use crate::matching::{cost_matrix, labels_from_matching, solve_assignment};
use crate::model::{forward, Adapter};
use crate::nn::{Ctx, ParamStore};
use crate::optim::{AdamW, AdamWConfig, StepStats};
use crate::positional::DpeGrid;
use crate::prompt_encoder::AdapterConfig;
use crate::schedule::lr_at;
use crate::tensor_io::{self, TensorFile};

/// Which adapter networks receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Joint,
    PromptOnly,
    ClassifierOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_split: Split,
    /// Validation split; falls back to the training split when its directory is absent.
    pub val_split: Split,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            train_split: Split::Train,
            val_split: Split::Val,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    /// Passes over the training set per epoch.
    pub repeats_per_epoch: usize,
    pub seed: u64,
    pub attention_dropout: f64,
    pub stage: TrainStage,
    pub text: String,
    pub threshold: f64,
    /// Stop (and save resumable state) after this many total steps.
    pub max_steps: Option<u64>,
    /// Steps before which the deterministic training-set loss is recorded.
    pub loss_probe_steps: Vec<u64>,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub adapter: AdapterConfig,
    pub backbone: BackboneConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            peak_lr: 8e-4,
            warmup_epochs: 5.0,
            batch_size: 1,
            repeats_per_epoch: 1,
            seed: 0,
            attention_dropout: 0.5,
            stage: TrainStage::Joint,
            text: "cables".into(),
            threshold: 0.5,
            max_steps: None,
            loss_probe_steps: Vec::new(),
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            adapter: AdapterConfig::default(),
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::Config(format!("batch_size must be 1, got {}", self.batch_size)));
        }
        if self.epochs == 0 || self.repeats_per_epoch == 0 {
            return Err(Error::Config("epochs and repeats_per_epoch must be positive".into()));
        }
        if !(0.0..=self.epochs as f64).contains(&self.warmup_epochs) {
            return Err(Error::Config(format!("warmup_epochs {} outside [0, epochs]", self.warmup_epochs)));
        }
        if !(self.peak_lr > 0.0) || !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("peak_lr must be positive and attention_dropout in [0,1)".into()));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0,1)", self.threshold)));
        }
        if self.text.trim().is_empty() {
            return Err(Error::Config("text prompt must be non-empty".into()));
        }
        self.loss.validate()?;
        self.adapter.validate()
    }

    /// Whether a parameter is updated in this configuration. With a zero classifier weight
    /// the classifier is frozen as well.
    pub fn is_trainable(&self, name: &str) -> bool {
        let cls = name.starts_with("cls.");
        match self.stage {
            TrainStage::PromptOnly => !cls,
            TrainStage::ClassifierOnly => cls,
            TrainStage::Joint => !cls || self.loss.classifier_weight > 0.0,
        }
    }
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub cls: f64,
    pub total: f64,
    pub pairs: usize,
}

/// Graph of the full training objective on one image.
pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub labels: Vec<bool>,
}

/// Builds the objective: matching on decoded masks, segmentation loss over matched pairs,
/// weighted BCE on classifier logits against the matching labels.
pub fn loss_graph(
    ctx: &mut Ctx<'_>,
    cfg: &AdapterConfig,
    loss: &LossConfig,
    gateway: &Gateway,
    dpe: &DpeGrid,
    grid: &SemanticGrid,
    emb: &ImageEmbedding,
    rec: &Prepared,
) -> Result<LossGraph> {
    let nodes = forward(ctx, cfg, gateway.backbone(), dpe, grid, emb)?;
    let preds = ctx.value(nodes.masks.masks).clone();
    let gts = rec.native_refs();
    let result = solve_assignment(&cost_matrix(&preds, &gts, loss)?)?;

    let mut terms = Vec::with_capacity(result.pairs.len());
    for &(i, j) in &result.pairs {
        let row = ctx.graph.row(nodes.masks.masks, i);
        terms.push(pair_loss_node(&mut ctx.graph, row, gts[j], loss)?);
    }
    let seg = if terms.is_empty() {
        log::warn!("record {}: no matched pairs", rec.id);
        ctx.constant(Array2::zeros((1, 1)))
    } else {
        let sum = ctx.graph.sum(&terms);
        ctx.graph.scale(sum, 1.0 / terms.len() as f64)
    };
    let labels = labels_from_matching(&result, cfg.n);
    let cls = bce_node(&mut ctx.graph, nodes.logits, &labels, loss.bce_pos_weight)?;
    let weighted = ctx.graph.scale(cls, loss.classifier_weight);
    let total = ctx.graph.add(seg, weighted);
    Ok(LossGraph {
        breakdown: LossBreakdown {
            seg: ctx.graph.scalar(seg),
            cls: ctx.graph.scalar(cls),
            total: ctx.graph.scalar(total),
            pairs: result.pairs.len(),
        },
        total,
        labels,
    })
}

/// RNG for one purpose at one step, independent of anything that ran before.
fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(4).wrapping_add(purpose));
    rng
}

const RNG_AUGMENT: u64 = 0;
const RNG_DROPOUT: u64 = 1;
const RNG_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: f64,
    pub lr: f64,
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub total_loss: f64,
    pub pairs: usize,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub seg_loss: f64,
    pub cls_loss: f64,
    pub val_miou_oracle: f64,
    pub val_miou: f64,
    pub val_cls_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub mean_total_loss: f64,
}

/// Serializable training progress. Step randomness derives from `(seed, step)`, so the
/// seed and counters are the whole RNG state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub adapter: Adapter,
    pub optimizer: AdamW,
    pub best_val_miou: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub probes: Vec<ProbeRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    seed: u64,
    optimizer_t: u64,
    optimizer: AdamWConfig,
    adapter: AdapterConfig,
    best_val_miou: Option<f64>,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    probes: Vec<ProbeRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let adapter = Adapter::new(cfg.adapter.clone(), cfg.seed)?;
        let optimizer = AdamW::new(cfg.optimizer.clone(), &adapter.params);
        Ok(Self {
            step: 0,
            seed: cfg.seed,
            adapter,
            optimizer,
            best_val_miou: None,
            steps: Vec::new(),
            epochs: Vec::new(),
            probes: Vec::new(),
        })
    }

    /// Writes `state.safetensors` (parameters and moments) and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut file = TensorFile::default();
        for (prefix, store) in [("param.", &self.adapter.params), ("m.", &self.optimizer.m), ("v.", &self.optimizer.v)] {
            for (k, v) in store.iter() {
                file.tensors.insert(format!("{prefix}{k}"), v.clone());
            }
        }
        tensor_io::write(&dir.join("state.safetensors"), &file)?;
        let meta = StateMeta {
            step: self.step,
            seed: self.seed,
            optimizer_t: self.optimizer.t,
            optimizer: self.optimizer.cfg.clone(),
            adapter: self.adapter.cfg.clone(),
            best_val_miou: self.best_val_miou,
            steps: self.steps.clone(),
            epochs: self.epochs.clone(),
            probes: self.probes.clone(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("state.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: StateMeta = serde_json::from_slice(&bytes)?;
        let file = tensor_io::read(&dir.join("state.safetensors"), None)?;
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for (name, t) in file.tensors {
            let (idx, rest) = if let Some(r) = name.strip_prefix("param.") {
                (0, r)
            } else if let Some(r) = name.strip_prefix("m.") {
                (1, r)
            } else if let Some(r) = name.strip_prefix("v.") {
                (2, r)
            } else {
                return Err(Error::CheckpointMismatch(format!("unexpected state tensor {name}")));
            };
            stores[idx].insert(rest, t);
        }
        let [params, m, v] = stores;
        let reference = Adapter::new(meta.adapter.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            for store in [&params, &m, &v] {
                match store.get(name) {
                    Some(x) if x.dim() == t.dim() => {}
                    _ => return Err(Error::CheckpointMismatch(format!("state tensor {name} missing or misshapen"))),
                }
            }
        }
        Ok(Self {
            step: meta.step,
            seed: meta.seed,
            adapter: Adapter {
                cfg: meta.adapter,
                params,
            },
            optimizer: AdamW {
                cfg: meta.optimizer,
                m,
                v,
                t: meta.optimizer_t,
            },
            best_val_miou: meta.best_val_miou,
            steps: meta.steps,
            epochs: meta.epochs,
            probes: meta.probes,
        })
    }
}

/// Steps per epoch for `n_train` images.
pub fn steps_per_epoch(cfg: &TrainConfig, n_train: usize) -> u64 {
    (n_train * cfg.repeats_per_epoch) as u64
}

/// Training-set index visited at `step` (a fresh shuffle every epoch).
pub fn record_index(cfg: &TrainConfig, n_train: usize, step: u64) -> usize {
    let per_epoch = steps_per_epoch(cfg, n_train);
    let epoch = step / per_epoch;
    let mut order: Vec<usize> = (0..per_epoch as usize).map(|k| k % n_train).collect();
    order.shuffle(&mut step_rng(cfg.seed, epoch, RNG_SHUFFLE));
    order[(step % per_epoch) as usize]
}

/// One optimization step on `rec`.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    gateway: &Gateway,
    dpe: &DpeGrid,
    rec: &Prepared,
    lr: f64,
) -> Result<(LossBreakdown, StepStats)> {
    let step = state.step;
    let image = augment(&rec.image, &cfg.augment, &mut step_rng(cfg.seed, step, RNG_AUGMENT));
    let grid = gateway.semantic_grid(&image, &cfg.text, Some(&rec.semantic_mask))?;
    let emb = gateway.image_embedding(&image)?;
    let (breakdown, grads) = {
        let mut ctx = Ctx::train(&state.adapter.params, cfg.attention_dropout, step_rng(cfg.seed, step, RNG_DROPOUT));
        let lg = loss_graph(&mut ctx, &cfg.adapter, &cfg.loss, gateway, dpe, &grid, &emb, rec)?;
        if !lg.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("record {}: {:?}", rec.id, lg.breakdown),
            });
        }
        (lg.breakdown, ctx.param_grads(lg.total))
    };
    let stats = state
        .optimizer
        .step(&mut state.adapter.params, &grads, lr, |n| cfg.is_trainable(n));
    state.step += 1;
    Ok((breakdown, stats))
}

/// Mean deterministic (no augmentation, no dropout) objective over `records`.
pub fn mean_eval_loss(adapter: &Adapter, cfg: &TrainConfig, gateway: &Gateway, dpe: &DpeGrid, records: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for rec in records {
        let grid = gateway.semantic_grid(&rec.image, &cfg.text, Some(&rec.semantic_mask))?;
        let emb = gateway.image_embedding(&rec.image)?;
        let mut ctx = Ctx::eval(&adapter.params);
        total += loss_graph(&mut ctx, &adapter.cfg, &cfg.loss, gateway, dpe, &grid, &emb, rec)?.breakdown.total;
    }
    Ok(total / records.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub run_dir: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub state: TrainState,
    /// True when training stopped at `max_steps` before the last epoch.
    pub interrupted: bool,
}

pub const CHECKPOINT_LAST: &str = "last.safetensors";
pub const CHECKPOINT_BEST: &str = "best.safetensors";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const PROBES_CSV: &str = "loss_probes.csv";
pub const STATE_DIR: &str = "state";

/// Metadata stored next to adapter weights so evaluation can rebuild the same backbone.
pub fn checkpoint_metadata(cfg: &TrainConfig, gateway: &Gateway) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert("backbone_config".into(), serde_json::to_string(&cfg.backbone)?);
    m.insert("backbone_digest".into(), gateway.weights_digest());
    m.insert("text".into(), cfg.text.clone());
    m.insert("threshold".into(), cfg.threshold.to_string());
    Ok(m)
}

fn write_csv<T>(path: &Path, header: &str, rows: &[T], line: impl Fn(&T) -> String) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from(header);
    body.push('\n');
    for r in rows {
        body.push_str(&line(r));
        body.push('\n');
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

fn write_logs(dir: &Path, state: &TrainState) -> Result<()> {
    write_csv(
        &dir.join(METRICS_CSV),
        "epoch,lr,seg_loss,cls_loss,val_miou_oracle,val_miou,val_cls_acc",
        &state.epochs,
        |e| {
            format!(
                "{},{:.6e},{:.6},{:.6},{:.4},{:.4},{:.4}",
                e.epoch, e.lr, e.seg_loss, e.cls_loss, e.val_miou_oracle, e.val_miou, e.val_cls_acc
            )
        },
    )?;
    write_csv(
        &dir.join(STEPS_CSV),
        "step,epoch,lr,seg_loss,cls_loss,total_loss,pairs,grad_norm,clipped",
        &state.steps,
        |s| {
            format!(
                "{},{:.4},{:.6e},{:.6},{:.6},{:.6},{},{:.4},{}",
                s.step, s.epoch, s.lr, s.seg_loss, s.cls_loss, s.total_loss, s.pairs, s.grad_norm, s.clipped
            )
        },
    )?;
    write_csv(&dir.join(PROBES_CSV), "step,mean_total_loss", &state.probes, |p| {
        format!("{},{:.6}", p.step, p.mean_total_loss)
    })
}

fn validate_epoch(state: &TrainState, cfg: &TrainConfig, gateway: &Gateway, val: &[Prepared], split: &str) -> Result<SplitEval> {
    evaluate_split(
        &state.adapter,
        gateway,
        val,
        &EvalRequest {
            text: &cfg.text,
            threshold: cfg.threshold,
            split,
            checkpoint: "",
            loss: &cfg.loss,
        },
    )
}

/// Runs (or resumes) training into `run_dir`.
pub fn fit(cfg: &TrainConfig, run_dir: &Path, resume: bool) -> Result<FitOutcome> {
    cfg.validate()?;
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("data.root is not set".into()))?;
    let gateway = Gateway::from_config(&cfg.backbone)?;
    let res = gateway.mask_resolution();
    let (train, defects) = load_split(root, cfg.data.train_split, cfg.adapter.n, res)?;
    for d in &defects {
        log::warn!("{:?} {:?}: {}", d.kind, d.id, d.detail);
    }
    if train.is_empty() {
        return Err(Error::Config(format!("no usable records in {}/{}", root.display(), cfg.data.train_split)));
    }
    let (val, val_name) = if crate::dataset::split_dir(root, cfg.data.val_split).is_dir() {
        (load_split(root, cfg.data.val_split, cfg.adapter.n, res)?.0, cfg.data.val_split.to_string())
    } else {
        log::warn!("no {} split; validating on the training split", cfg.data.val_split);
        (train.clone(), cfg.data.train_split.to_string())
    };
    let val = if val.is_empty() { train.clone() } else { val };

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let state_dir = run_dir.join(STATE_DIR);
    let mut state = if resume {
        let s = TrainState::load(&state_dir)?;
        if s.adapter.cfg != cfg.adapter || s.seed != cfg.seed {
            return Err(Error::CheckpointMismatch("saved state was produced by a different configuration".into()));
        }
        log::info!("resuming at step {}", s.step);
        s
    } else {
        TrainState::new(cfg)?
    };
    let dpe = state.adapter.dpe(gateway.backbone())?;
    log::info!("trainable adapter parameters: {}", state.adapter.num_parameters());

    let per_epoch = steps_per_epoch(cfg, train.len());
    let total_steps = per_epoch * cfg.epochs as u64;
    let stop_at = cfg.max_steps.map_or(total_steps, |m| m.min(total_steps));
    let meta = checkpoint_metadata(cfg, &gateway)?;
    let last = run_dir.join(CHECKPOINT_LAST);
    let best = run_dir.join(CHECKPOINT_BEST);

    while state.step < stop_at {
        let step = state.step;
        if cfg.loss_probe_steps.contains(&step) && !state.probes.iter().any(|p| p.step == step) {
            let mean_total_loss = mean_eval_loss(&state.adapter, cfg, &gateway, &dpe, &train)?;
            state.probes.push(ProbeRecord { step, mean_total_loss });
        }
        let epoch_f = step as f64 / per_epoch as f64;
        let lr = lr_at(epoch_f, cfg.epochs as f64, cfg.warmup_epochs, cfg.peak_lr);
        let rec = &train[record_index(cfg, train.len(), step)];
        let (loss, stats) = match train_step(&mut state, cfg, &gateway, &dpe, rec, lr) {
            Ok(v) => v,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let dump = run_dir.join("failed_state");
                state.save(&dump)?;
                log::error!("{e}; state dumped to {}", dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        state.steps.push(StepRecord {
            step,
            epoch: epoch_f,
            lr,
            seg_loss: loss.seg,
            cls_loss: loss.cls,
            total_loss: loss.total,
            pairs: loss.pairs,
            grad_norm: stats.grad_norm,
            clipped: stats.clipped,
        });

        if state.step % per_epoch == 0 {
            let epoch = (state.step / per_epoch) as usize;
            let window = &state.steps[state.steps.len() - per_epoch as usize..];
            let mean = |f: fn(&StepRecord) -> f64| window.iter().map(f).sum::<f64>() / window.len() as f64;
            let v = validate_epoch(&state, cfg, &gateway, &val, &val_name)?;
            let record = EpochRecord {
                epoch,
                lr,
                seg_loss: mean(|s| s.seg_loss),
                cls_loss: mean(|s| s.cls_loss),
                val_miou_oracle: v.oracle.miou,
                val_miou: v.classifier.miou,
                val_cls_acc: v.accuracy * 100.0,
            };
            log::info!(
                "epoch {epoch}: seg {:.4} cls {:.4} val mIoU oracle {:.2} classifier {:.2} acc {:.2}",
                record.seg_loss,
                record.cls_loss,
                record.val_miou_oracle,
                record.val_miou,
                record.val_cls_acc
            );
            if state.best_val_miou.is_none_or(|b| record.val_miou > b) {
                state.best_val_miou = Some(record.val_miou);
                state.adapter.save(&best, &meta)?;
            }
            state.epochs.push(record);
            state.adapter.save(&last, &meta)?;
            state.save(&state_dir)?;
            write_logs(run_dir, &state)?;
        }
    }
    // probes requested exactly at the end of training
    if cfg.loss_probe_steps.contains(&state.step) && !state.probes.iter().any(|p| p.step == state.step) {
        let mean_total_loss = mean_eval_loss(&state.adapter, cfg, &gateway, &dpe, &train)?;
        state.probes.push(ProbeRecord {
            step: state.step,
            mean_total_loss,
        });
    }
    state.adapter.save(&last, &meta)?;
    state.save(&state_dir)?;
    write_logs(run_dir, &state)?;
    Ok(FitOutcome {
        run_dir: run_dir.to_path_buf(),
        last_checkpoint: last,
        best_checkpoint: best.is_file().then_some(best),
        interrupted: state.step < total_steps,
        state,
    })
}
