use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dloseg::backbone::{BackboneConfig, Gateway};
use dloseg::config;
use dloseg::dataset::{self, Split};
use dloseg::eval::{evaluate_split, load_split, EvalRequest};
use dloseg::fixtures::{generate_fixture_set, FixtureSpec};
use dloseg::metrics::EvalReport;
use dloseg::model::{predict, Adapter};
use dloseg::positional::DpeGrid;
use dloseg::trainer::{fit, TrainConfig};
use dloseg::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{io_err, RunManifest};
use crate::render;
use crate::{ConfigArgs, EvalArgs, FixturesArgs, InferArgs, TrainArgs, ValidateArgs};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| io_err(path, e))
}

fn quoted(v: impl Serialize) -> String {
    serde_json::to_string(&v).expect("plain value serializes")
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty() || self.backbones.is_some()
    }

    /// Shorthand flags followed by `--set` overrides, so explicit keys win.
    fn overrides(&self, mut shorthand: Vec<String>) -> Vec<String> {
        if let Some(b) = self.backbones {
            shorthand.push(format!("backbone.mode={}", quoted(b.as_str())));
        }
        shorthand.extend(self.overrides.iter().cloned());
        shorthand
    }
}

pub fn train(args: TrainArgs, argv: &[String]) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(root) = &args.data {
        extra.push(format!("data.root={}", quoted(root)));
    }
    if let Some(e) = args.epochs {
        let d = TrainConfig::default();
        extra.push(format!("epochs={e}"));
        extra.push(format!("warmup_epochs={}", d.warmup_epochs * e as f64 / d.epochs as f64));
    }
    if let Some(s) = args.seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(m) = args.max_steps {
        extra.push(format!("max_steps={m}"));
    }
    let overrides = args.cfg.overrides(extra);
    let mut manifest = RunManifest::new("train", argv);
    manifest.overrides = config::overrides_json(&overrides)?;
    let cfg: TrainConfig = config::resolve(args.cfg.config.as_deref(), &overrides)?;
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seed = Some(cfg.seed);
    manifest.backbone_mode = Some(quoted(cfg.backbone.mode).trim_matches('"').to_string());
    cfg.validate()?;
    if cfg.data.root.is_none() {
        return Err(Error::Config("no dataset: pass --data or set data.root".into()));
    }
    fs::create_dir_all(&args.run_dir).map_err(|e| io_err(&args.run_dir, e))?;
    write_json(&args.run_dir.join("config.json"), &cfg)?;

    let result = fit(&cfg, &args.run_dir, args.resume);
    if let Ok(out) = &result {
        manifest.outputs = json!({
            "last_checkpoint": out.last_checkpoint,
            "best_checkpoint": out.best_checkpoint,
            "steps": out.state.step,
            "interrupted": out.interrupted,
            "trainable_parameters": out.state.adapter.num_parameters(),
            "best_val_miou": out.state.best_val_miou,
        });
        println!(
            "trained {} steps; last checkpoint {}",
            out.state.step,
            out.last_checkpoint.display()
        );
    }
    manifest.finish(&args.run_dir, &result)?;
    result.map(|_| ())
}

struct Loaded {
    adapter: Adapter,
    meta: BTreeMap<String, String>,
    gateway: Gateway,
    dpe: DpeGrid,
}

/// Loads a checkpoint and the backbone it was trained against (or the one configured).
fn open_checkpoint(path: &Path, cfg: Option<&TrainConfig>) -> Result<Loaded> {
    let (adapter, meta, backbone) = match cfg {
        Some(c) => {
            let (a, m) = Adapter::load_expecting(path, &c.adapter)?;
            (a, m, c.backbone.clone())
        }
        None => {
            let (a, m) = Adapter::load(path)?;
            let b = match m.get("backbone_config") {
                Some(s) => serde_json::from_str(s)
                    .map_err(|e| Error::CheckpointMismatch(format!("unreadable backbone config in checkpoint: {e}")))?,
                None => BackboneConfig::default(),
            };
            (a, m, b)
        }
    };
    let gateway = Gateway::from_config(&backbone)?;
    let dpe = adapter.dpe(gateway.backbone()).map_err(|e| match e {
        Error::Shape { .. } => Error::CheckpointMismatch(format!("checkpoint does not fit the backbone: {e}")),
        other => other,
    })?;
    if let Some(expected) = meta.get("backbone_digest") {
        let actual = gateway.weights_digest();
        if *expected != actual {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint was trained against backbone {expected}, configured backbone is {actual}"
            )));
        }
    }
    Ok(Loaded {
        adapter,
        meta,
        gateway,
        dpe,
    })
}

fn threshold_from(arg: Option<f64>, meta: &BTreeMap<String, String>) -> Result<f64> {
    let t = match arg {
        Some(t) => t,
        None => meta.get("threshold").and_then(|s| s.parse().ok()).unwrap_or(0.5),
    };
    if !(0.0 < t && t < 1.0) {
        return Err(Error::Config(format!("threshold {t} outside (0,1)")));
    }
    Ok(t)
}

pub fn eval(args: EvalArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("eval", argv);
    let result = run_eval(&args, &mut manifest);
    manifest.finish(&args.out, &result)?;
    result
}

fn run_eval(args: &EvalArgs, manifest: &mut RunManifest) -> Result<()> {
    let cfg = if args.cfg.given() {
        let overrides = args.cfg.overrides(Vec::new());
        manifest.overrides = config::overrides_json(&overrides)?;
        Some(config::resolve::<TrainConfig>(args.cfg.config.as_deref(), &overrides)?)
    } else {
        None
    };
    let split: Split = args.split.parse()?;
    let loaded = open_checkpoint(&args.checkpoint, cfg.as_ref())?;
    let threshold = threshold_from(args.threshold, &loaded.meta)?;
    let text = args
        .text
        .clone()
        .or_else(|| loaded.meta.get("text").cloned())
        .unwrap_or_else(|| "cables".into());
    manifest.backbone_mode = Some(quoted(loaded.gateway.mode()).trim_matches('"').to_string());
    manifest.config = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "split": split,
        "oracle": args.oracle,
        "text": text,
        "threshold": threshold,
        "adapter": loaded.adapter.cfg,
    });

    let (records, defects) = load_split(&args.data, split, loaded.adapter.cfg.n, loaded.gateway.mask_resolution())?;
    let mut skipped = Vec::new();
    for d in &defects {
        if let (Some(id), false) = (&d.id, d.kind.is_warning()) {
            log::warn!("skipping {id}: {}", d.detail);
            skipped.push(id.clone());
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no records with ground truth in {}/{split} ({} skipped)",
            args.data.display(),
            skipped.len()
        )));
    }
    let digest = loaded.adapter.digest();
    let split_name = split.to_string();
    let e = evaluate_split(
        &loaded.adapter,
        &loaded.gateway,
        &records,
        &EvalRequest {
            text: &text,
            threshold,
            split: &split_name,
            checkpoint: &digest,
            loss: &Default::default(),
        },
    )?;
    let mut report: EvalReport = if args.oracle { e.oracle } else { e.classifier };
    report.skipped.extend(skipped);
    report.skipped.sort();
    report.skipped.dedup();

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let stem = format!("eval_{}", report.mode);
    let json_path = args.out.join(format!("{stem}.json"));
    let table_path = args.out.join(format!("{stem}.txt"));
    write_json(&json_path, &report)?;
    let table = report.to_table();
    fs::write(&table_path, &table).map_err(|e| io_err(&table_path, e))?;
    print!("{table}");
    manifest.outputs = json!({
        "report": json_path,
        "table": table_path,
        "miou": report.miou,
        "dice": report.dice,
        "classifier_accuracy": e.accuracy,
        "fingerprint": report.fingerprint,
    });
    Ok(())
}

#[derive(Serialize)]
struct Instance {
    slot: usize,
    probability: f64,
    area: usize,
    color: [u8; 3],
    mask: String,
}

#[derive(Serialize)]
struct InferSummary {
    image: String,
    text: String,
    threshold: f64,
    checkpoint: String,
    instances: Vec<Instance>,
}

pub fn infer(args: InferArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("infer", argv);
    let result = run_infer(&args, &mut manifest);
    manifest.finish(&args.out, &result)?;
    result
}

fn run_infer(args: &InferArgs, manifest: &mut RunManifest) -> Result<()> {
    let image = image::open(&args.image)
        .map_err(|source| Error::Image {
            path: args.image.clone(),
            source,
        })?
        .to_rgb8();
    let loaded = open_checkpoint(&args.checkpoint, None)?;
    let threshold = threshold_from(args.threshold, &loaded.meta)?;
    manifest.backbone_mode = Some(quoted(loaded.gateway.mode()).trim_matches('"').to_string());
    manifest.config = json!({
        "image": args.image,
        "checkpoint": args.checkpoint,
        "text": args.text,
        "threshold": threshold,
    });

    let grid = loaded.gateway.semantic_grid(&image, &args.text, None)?;
    let emb = loaded.gateway.image_embedding(&image)?;
    let pred = predict(&loaded.adapter, loaded.gateway.backbone(), &loaded.dpe, &grid, &emb, threshold)?;
    let (h, w) = (image.height() as usize, image.width() as usize);

    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let mut drawn = Vec::new();
    let mut instances = Vec::new();
    for (slot, &keep) in pred.classifier.keep_flags.iter().enumerate() {
        if !keep {
            continue;
        }
        let mask = pred.bundle.binary_mask(slot, h, w);
        let name = format!("mask_{slot:02}.png");
        let path = args.out.join(&name);
        mask.to_gray()
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        instances.push(Instance {
            slot,
            probability: pred.classifier.probabilities[slot],
            area: mask.count(),
            color: render::color(slot),
            mask: name,
        });
        drawn.push((slot, mask));
    }
    if instances.is_empty() {
        log::warn!("no masks passed the classifier threshold {threshold}");
        println!("notice: no instances kept for prompt {:?}", args.text);
    }
    let overlay_path = args.out.join("overlay.png");
    render::overlay(&image, &drawn)
        .save(&overlay_path)
        .map_err(|source| Error::Image {
            path: overlay_path.clone(),
            source,
        })?;
    let summary = InferSummary {
        image: args.image.display().to_string(),
        text: args.text.clone(),
        threshold,
        checkpoint: loaded.adapter.digest(),
        instances,
    };
    let summary_path = args.out.join("summary.json");
    write_json(&summary_path, &summary)?;
    println!("{} instance(s) written to {}", summary.instances.len(), args.out.display());
    manifest.outputs = json!({
        "overlay": overlay_path,
        "summary": summary_path,
        "instances": summary.instances.len(),
    });
    Ok(())
}

pub fn fixtures(args: FixturesArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::new("fixtures", argv);
    manifest.seed = Some(args.seed);
    let result = run_fixtures(&args, &mut manifest);
    manifest.finish(&args.out, &result)?;
    result
}

fn run_fixtures(args: &FixturesArgs, manifest: &mut RunManifest) -> Result<()> {
    let mut written = BTreeMap::new();
    for name in &args.splits {
        let split: Split = name.parse()?;
        let offset = Split::ALL.iter().position(|s| *s == split).unwrap_or(0) as u64;
        let spec = FixtureSpec {
            seed: args.seed.wrapping_add(offset),
            n_images: args.n,
            height: args.size,
            width: args.size,
            ..FixtureSpec::default()
        };
        let records = generate_fixture_set(&args.out, split, &spec)?;
        written.insert(split.to_string(), json!({ "spec": spec, "records": records.len() }));
        println!("{split}: {} image(s) under {}", records.len(), args.out.display());
    }
    manifest.config = json!(written);
    manifest.outputs = json!({ "root": args.out });
    Ok(())
}

pub fn validate(args: ValidateArgs, argv: &[String]) -> Result<()> {
    let out = args.out.clone().unwrap_or_else(|| args.root.clone());
    let mut manifest = RunManifest::new("validate", argv);
    manifest.config = json!({ "root": args.root, "strict": args.strict });
    let result = run_validate(&args, &out, &mut manifest);
    if out.is_dir() || args.out.is_some() {
        manifest.finish(&out, &result)?;
    }
    result
}

fn run_validate(args: &ValidateArgs, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let report = dataset::validate_dataset(&args.root)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join("validation.json");
    write_json(&path, &report)?;
    for d in &report.defects {
        let level = if d.kind.is_warning() { "warning" } else { "error" };
        println!(
            "{level}: {}/{} {:?}: {}",
            d.split,
            d.id.as_deref().unwrap_or("-"),
            d.kind,
            d.detail
        );
    }
    let errors = report.errors().count();
    println!(
        "{} record(s), {} defect(s), {} error(s)",
        report.records,
        report.defects.len(),
        errors
    );
    manifest.outputs = json!({ "report": path, "records": report.records, "defects": report.defects.len(), "errors": errors });
    if args.strict && errors > 0 {
        return Err(Error::InvalidArgument(format!("{errors} error-level defect(s)")));
    }
    Ok(())
}
