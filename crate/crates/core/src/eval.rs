//! Record preparation and split-level evaluation in Oracle and classifier modes.

use std::path::Path;

use image::RgbImage;

use crate::backbone::Gateway;
use crate::dataset::{self, Defect, InstanceRecord, Split};
use crate::error::Result;
use crate::losses::LossConfig;
use crate::mask::BinaryMask;
use crate::matching::{labels_from_matching, oracle_filter, MatchResult};
use crate::metrics::{aggregate, classification_accuracy, evaluate_image, EvalMode, EvalReport, EvalSettings, ImageScore};
use crate::model::{predict, Adapter, Prediction};
use crate::positional::DpeGrid;

/// A record with ground truth at image resolution and at decoder resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub image: RgbImage,
    pub semantic_mask: BinaryMask,
    pub gts: Vec<BinaryMask>,
    /// Row-major `resolution²` flags per instance.
    pub gts_native: Vec<Vec<bool>>,
}

impl Prepared {
    pub fn native_refs(&self) -> Vec<&[bool]> {
        self.gts_native.iter().map(|g| g.as_slice()).collect()
    }
}

/// Caps the instance count at `capacity` and resamples ground truth to `resolution`.
pub fn prepare(record: &InstanceRecord, capacity: usize, resolution: usize) -> Result<Prepared> {
    let record = dataset::truncate_to_capacity(record, capacity);
    let padded = dataset::pad_to_capacity(&record, capacity)?;
    let gts: Vec<BinaryMask> = padded.valid_masks().cloned().collect();
    let gts_native = gts
        .iter()
        .map(|m| m.resize_nearest(resolution, resolution).as_slice().to_vec())
        .collect();
    Ok(Prepared {
        id: record.id.clone(),
        image: record.image.clone(),
        semantic_mask: record.semantic_mask.clone(),
        gts,
        gts_native,
    })
}

/// Loads and prepares every usable record of a split; unusable records become defects.
pub fn load_split(root: &Path, split: Split, capacity: usize, resolution: usize) -> Result<(Vec<Prepared>, Vec<Defect>)> {
    let manifest = dataset::scan_dataset(root, split)?;
    let mut defects = manifest.defects.clone();
    let mut out = Vec::with_capacity(manifest.len());
    for id in manifest.ids() {
        match dataset::load_record(&manifest, id).and_then(|r| prepare(&r, capacity, resolution)) {
            Ok(p) => out.push(p),
            Err(e) => {
                log::warn!("skipping record {id}: {e}");
                defects.push(Defect {
                    split,
                    id: Some(id.to_string()),
                    kind: dataset::DefectKind::Unreadable,
                    detail: e.to_string(),
                });
            }
        }
    }
    Ok((out, defects))
}

/// Everything measured on one image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub prediction: Prediction,
    pub oracle: Option<ImageScore>,
    pub classifier: Option<ImageScore>,
    /// Training-protocol matching between decoded masks and ground truth.
    pub matching: Vec<(usize, usize)>,
    pub labels: Vec<bool>,
    pub accuracy: f64,
}

pub fn evaluate_prepared(
    adapter: &Adapter,
    gateway: &Gateway,
    dpe: &DpeGrid,
    rec: &Prepared,
    text: &str,
    threshold: f64,
    loss: &LossConfig,
) -> Result<ImageEval> {
    let grid = gateway.semantic_grid(&rec.image, text, Some(&rec.semantic_mask))?;
    let emb = gateway.image_embedding(&rec.image)?;
    let prediction = predict(adapter, gateway.backbone(), dpe, &grid, &emb, threshold)?;
    let (h, w) = rec.semantic_mask.dims();
    let preds: Vec<BinaryMask> = (0..prediction.bundle.len())
        .map(|i| prediction.bundle.binary_mask(i, h, w))
        .collect();
    let keep = &prediction.classifier.keep_flags;
    let oracle = evaluate_image(&rec.id, &preds, keep, &rec.gts, EvalMode::Oracle)?;
    let classifier = evaluate_image(&rec.id, &preds, keep, &rec.gts, EvalMode::Classifier)?;
    let matching = oracle_filter(&prediction.bundle.masks, &rec.native_refs(), loss)?;
    let result = MatchResult {
        pairs: matching.clone(),
        ..MatchResult::empty(keep.len(), rec.gts.len())
    };
    let labels = labels_from_matching(&result, keep.len());
    let accuracy = classification_accuracy(keep, &labels)?;
    Ok(ImageEval {
        prediction,
        oracle,
        classifier,
        matching,
        labels,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    pub oracle: EvalReport,
    pub classifier: EvalReport,
    /// Mean per-image keep/discard accuracy against matching labels.
    pub accuracy: f64,
}

pub struct EvalRequest<'a> {
    pub text: &'a str,
    pub threshold: f64,
    pub split: &'a str,
    pub checkpoint: &'a str,
    pub loss: &'a LossConfig,
}

/// Evaluates every record in both modes.
pub fn evaluate_split(adapter: &Adapter, gateway: &Gateway, records: &[Prepared], req: &EvalRequest<'_>) -> Result<SplitEval> {
    let dpe = adapter.dpe(gateway.backbone())?;
    let mut oracle = Vec::new();
    let mut classifier = Vec::new();
    let mut skipped = Vec::new();
    let mut acc = Vec::new();
    for rec in records {
        let e = evaluate_prepared(adapter, gateway, &dpe, rec, req.text, req.threshold, req.loss)?;
        match (e.oracle, e.classifier) {
            (Some(o), Some(c)) => {
                oracle.push(o);
                classifier.push(c);
                acc.push(e.accuracy);
            }
            _ => skipped.push(rec.id.clone()),
        }
    }
    let settings = |mode| EvalSettings {
        mode,
        threshold: req.threshold,
        text: req.text.to_string(),
        split: req.split.to_string(),
        checkpoint: req.checkpoint.to_string(),
    };
    Ok(SplitEval {
        oracle: aggregate(oracle, skipped.clone(), settings(EvalMode::Oracle))?,
        classifier: aggregate(classifier, skipped, settings(EvalMode::Classifier))?,
        accuracy: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
    })
}
