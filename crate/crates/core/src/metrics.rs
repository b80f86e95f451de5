//! Instance mIoU, union DICE, and evaluation reports.
//!
//! Per image, candidate masks are paired with ground-truth instances by the assignment
//! maximizing total IoU. mIoU averages the paired IoU over all ground-truth instances
//! (unpaired instances count 0). DICE compares the union of kept masks with the union of
//! ground truth. Oracle mode uses every predicted mask as a candidate and keeps the paired
//! ones; classifier mode uses only the masks the classifier keeps.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::matching::solve_assignment;

/// Protocol description embedded in every report fingerprint.
pub const PROTOCOL: &str = "miou=max-iou-assignment,unpaired-gt=0;dice=pixel-union;binarize=p>=0.5";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Oracle,
    Classifier,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Oracle => "oracle",
            EvalMode::Classifier => "classifier",
        })
    }
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidArgument(format!(
            "mask resolutions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `|a∩b| / |a∪b|`, with two empty masks scoring 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a, b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// `2|a∩b| / (|a|+|b|)`, with two empty masks scoring 1.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_dims(a, b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub miou: f64,
    pub dice: f64,
    pub n_gt: usize,
    pub n_kept: usize,
}

/// Scores one image. `keep` selects candidates in classifier mode and is ignored in Oracle mode.
/// Returns `None` (with a warning) when there is no ground truth.
pub fn evaluate_image(
    id: &str,
    preds: &[BinaryMask],
    keep: &[bool],
    gts: &[BinaryMask],
    mode: EvalMode,
) -> Result<Option<ImageScore>> {
    if gts.is_empty() {
        log::warn!("record {id}: no ground-truth submasks, skipped");
        return Ok(None);
    }
    if mode == EvalMode::Classifier && keep.len() != preds.len() {
        return Err(Error::shape("keep flags", preds.len(), keep.len()));
    }
    let (h, w) = gts[0].dims();
    let candidates: Vec<usize> = match mode {
        EvalMode::Oracle => (0..preds.len()).collect(),
        EvalMode::Classifier => (0..preds.len()).filter(|&i| keep[i]).collect(),
    };
    let mut ious = Array2::zeros((candidates.len(), gts.len()));
    for (r, &i) in candidates.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            ious[[r, j]] = iou(&preds[i], g)?;
        }
    }
    let result = solve_assignment(&ious.mapv(|v| 1.0 - v))?;
    let matched: f64 = result.pairs.iter().map(|&(r, j)| ious[[r, j]]).sum();
    let miou = matched / gts.len() as f64;

    let kept: Vec<usize> = match mode {
        EvalMode::Oracle => result.pairs.iter().map(|&(r, _)| candidates[r]).collect(),
        EvalMode::Classifier => candidates,
    };
    let pred_union = BinaryMask::union_all(h, w, kept.iter().map(|&i| &preds[i]));
    let gt_union = BinaryMask::union_all(h, w, gts);
    let dice = if pred_union.count() + gt_union.count() == 0 {
        1.0
    } else {
        dice_score(&pred_union, &gt_union)?
    };
    Ok(Some(ImageScore {
        id: id.to_string(),
        miou,
        dice,
        n_gt: gts.len(),
        n_kept: kept.len(),
    }))
}

/// Fraction of keep decisions that agree with the matching labels.
pub fn classification_accuracy(keep: &[bool], labels: &[bool]) -> Result<f64> {
    if keep.len() != labels.len() {
        return Err(Error::shape("classifier labels", keep.len(), labels.len()));
    }
    if keep.is_empty() {
        return Ok(1.0);
    }
    Ok(keep.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / keep.len() as f64)
}

/// Settings that determine a report; hashed into its fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub threshold: f64,
    pub text: String,
    pub split: String,
    /// Digest of the adapter parameters, empty when not applicable.
    pub checkpoint: String,
}

impl EvalSettings {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(PROTOCOL.as_bytes());
        h.update(serde_json::to_vec(self).expect("settings serialize"));
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_image: Vec<ImageScore>,
    /// Percent, two decimals.
    pub miou: f64,
    /// Percent, two decimals.
    pub dice: f64,
    pub skipped: Vec<String>,
    pub protocol: String,
    pub settings: EvalSettings,
    pub fingerprint: String,
}

fn percent(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0 + 0.0
}

/// Unweighted mean over images, as percentages.
pub fn aggregate(per_image: Vec<ImageScore>, skipped: Vec<String>, settings: EvalSettings) -> Result<EvalReport> {
    if per_image.is_empty() {
        return Err(Error::InvalidArgument("no images were evaluated".into()));
    }
    let n = per_image.len() as f64;
    let miou = per_image.iter().map(|s| s.miou).sum::<f64>() / n;
    let dice = per_image.iter().map(|s| s.dice).sum::<f64>() / n;
    Ok(EvalReport {
        mode: settings.mode,
        miou: percent(miou),
        dice: percent(dice),
        per_image,
        skipped,
        protocol: PROTOCOL.to_string(),
        fingerprint: settings.fingerprint(),
        settings,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}  fingerprint: {}", self.mode, self.fingerprint);
        let _ = writeln!(out, "{:<8} {:>8} {:>8} {:>5} {:>6}", "id", "mIoU", "DICE", "gt", "kept");
        for s in &self.per_image {
            let _ = writeln!(
                out,
                "{:<8} {:>8.2} {:>8.2} {:>5} {:>6}",
                s.id,
                s.miou * 100.0,
                s.dice * 100.0,
                s.n_gt,
                s.n_kept
            );
        }
        let _ = writeln!(out, "{:<8} {:>8.2} {:>8.2}", "mean", self.miou, self.dice);
        for id in &self.skipped {
            let _ = writeln!(out, "skipped {id}: no ground truth");
        }
        out
    }
}
