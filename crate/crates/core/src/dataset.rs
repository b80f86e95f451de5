//! Dataset directory contract.
//!
//! ```text
//! <root>/<split>/RGB/<id>_0001.png      RGB image, id is a 5-digit decimal
//! <root>/<split>/Masks/<id>/<k>.png     one binary submask per object
//! <root>/<split>/Masks/<id>_mask.png    semantic mask (union of submasks)
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Largest object count in data following the contract.
pub const MAX_SUBMASKS: usize = 10;
/// Minimum pixel agreement between the semantic mask and the union of submasks.
pub const MIN_SEMANTIC_AGREEMENT: f64 = 0.99;

const RGB_SUFFIX: &str = "_0001.png";
const SEMANTIC_SUFFIX: &str = "_mask.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train|val|test)"))),
        }
    }
}

/// One image with its per-object submasks and their union.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub id: String,
    pub image: RgbImage,
    pub submasks: Vec<BinaryMask>,
    pub semantic_mask: BinaryMask,
}

impl InstanceRecord {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.height() as usize, self.image.width() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rgb_path: PathBuf,
    pub mask_dir: PathBuf,
    pub semantic_path: PathBuf,
    pub submask_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// RGB image without a (non-empty) submask folder.
    OrphanRgb,
    /// Submask folder or semantic mask without an RGB image.
    OrphanMasks,
    MissingSemanticMask,
    BadFilename,
    /// All-background submask.
    EmptySubmask,
    TooManySubmasks,
    SemanticMismatch,
    ResolutionMismatch,
    Unreadable,
}

impl DefectKind {
    /// Warnings are reported but do not make a record unusable.
    pub fn is_warning(self) -> bool {
        matches!(self, DefectKind::TooManySubmasks)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub split: Split,
    pub id: Option<String>,
    pub kind: DefectKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub defects: Vec<Defect>,
}

impl DatasetManifest {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

pub fn rgb_path(root: &Path, split: Split, id: &str) -> PathBuf {
    split_dir(root, split).join("RGB").join(format!("{id}{RGB_SUFFIX}"))
}

pub fn mask_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    split_dir(root, split).join("Masks").join(id)
}

pub fn semantic_path(root: &Path, split: Split, id: &str) -> PathBuf {
    split_dir(root, split).join("Masks").join(format!("{id}{SEMANTIC_SUFFIX}"))
}

pub fn format_id(index: usize) -> String {
    format!("{index:05}")
}

fn is_valid_id(s: &str) -> bool {
    s.len() == 5 && s.bytes().all(|b| b.is_ascii_digit())
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Submask files of a record in lexicographic filename order.
pub fn submask_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.is_file() && is_png(p))
        .collect())
}

/// Lists every record of `split` under `root`, collecting defects instead of failing.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
    }
    let sdir = split_dir(root, split);
    if !sdir.is_dir() {
        return Err(Error::Config(format!("split directory {} does not exist", sdir.display())));
    }
    let mut manifest = DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries: Vec::new(),
        defects: Vec::new(),
    };
    let defect = |id: Option<&str>, kind, detail: String| Defect {
        split,
        id: id.map(str::to_string),
        kind,
        detail,
    };

    let rgb_dir = sdir.join("RGB");
    let mut rgb_ids = BTreeSet::new();
    if rgb_dir.is_dir() {
        for path in read_dir_sorted(&rgb_dir)? {
            if !path.is_file() || !is_png(&path) {
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            match name.strip_suffix(RGB_SUFFIX) {
                Some(id) if is_valid_id(id) => {
                    rgb_ids.insert(id.to_string());
                }
                _ => manifest.defects.push(defect(
                    None,
                    DefectKind::BadFilename,
                    format!("unexpected RGB file name {name}"),
                )),
            }
        }
    }

    let masks_root = sdir.join("Masks");
    if masks_root.is_dir() {
        for path in read_dir_sorted(&masks_root)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let id = if path.is_dir() {
                Some(name.as_str())
            } else {
                name.strip_suffix(SEMANTIC_SUFFIX)
            };
            if let Some(id) = id {
                if is_valid_id(id) && !rgb_ids.contains(id) {
                    manifest.defects.push(defect(
                        Some(id),
                        DefectKind::OrphanMasks,
                        format!("{} has no matching RGB image", path.display()),
                    ));
                }
            }
        }
    }

    for id in rgb_ids {
        let mdir = mask_dir(root, split, &id);
        let files = if mdir.is_dir() { submask_files(&mdir)? } else { Vec::new() };
        if files.is_empty() {
            manifest.defects.push(defect(
                Some(&id),
                DefectKind::OrphanRgb,
                format!("no submasks under {}", mdir.display()),
            ));
            continue;
        }
        let spath = semantic_path(root, split, &id);
        if !spath.is_file() {
            manifest.defects.push(defect(
                Some(&id),
                DefectKind::MissingSemanticMask,
                format!("missing {}", spath.display()),
            ));
            continue;
        }
        if files.len() > MAX_SUBMASKS {
            manifest.defects.push(defect(
                Some(&id),
                DefectKind::TooManySubmasks,
                format!("{} submasks exceed the dataset maximum of {MAX_SUBMASKS}", files.len()),
            ));
        }
        manifest.entries.push(ManifestEntry {
            rgb_path: rgb_path(root, split, &id),
            mask_dir: mdir,
            semantic_path: spath,
            submask_count: files.len(),
            id,
        });
    }
    Ok(manifest)
}

fn record_err(id: &str, reason: impl Into<String>) -> Error {
    Error::Record {
        id: id.to_string(),
        reason: reason.into(),
    }
}

fn read_gray(id: &str, path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(|e| record_err(id, format!("unreadable raster {}: {e}", path.display())))?;
    Ok(BinaryMask::from_gray(&img.to_luma8()))
}

/// Loads one record; submasks are binarized and ordered by filename.
pub fn load_record(manifest: &DatasetManifest, id: &str) -> Result<InstanceRecord> {
    let entry = manifest
        .entry(id)
        .ok_or_else(|| record_err(id, format!("not present in the {} manifest", manifest.split)))?;
    let image = image::open(&entry.rgb_path)
        .map_err(|e| record_err(id, format!("unreadable raster {}: {e}", entry.rgb_path.display())))?
        .to_rgb8();
    let dims = (image.height() as usize, image.width() as usize);

    let files = submask_files(&entry.mask_dir)?;
    if files.len() > MAX_SUBMASKS {
        log::warn!("record {id}: {} submasks exceed {MAX_SUBMASKS}", files.len());
    }
    let mut submasks = Vec::with_capacity(files.len());
    for f in &files {
        let m = read_gray(id, f)?;
        if m.dims() != dims {
            return Err(record_err(id, format!("{} is {:?}, image is {:?}", f.display(), m.dims(), dims)));
        }
        if m.count() == 0 {
            return Err(record_err(id, format!("empty submask {}", f.display())));
        }
        submasks.push(m);
    }
    let semantic_mask = read_gray(id, &entry.semantic_path)?;
    if semantic_mask.dims() != dims {
        return Err(record_err(id, "semantic mask resolution differs from the image"));
    }
    Ok(InstanceRecord {
        id: id.to_string(),
        image,
        submasks,
        semantic_mask,
    })
}

/// Classifies a record-level load failure or content problem as a defect.
fn record_defects(manifest: &DatasetManifest, id: &str) -> Vec<Defect> {
    let d = |kind, detail: String| Defect {
        split: manifest.split,
        id: Some(id.to_string()),
        kind,
        detail,
    };
    match load_record(manifest, id) {
        Ok(rec) => {
            let union = BinaryMask::union_all(rec.semantic_mask.height(), rec.semantic_mask.width(), &rec.submasks);
            let agreement = union.agreement(&rec.semantic_mask);
            if agreement < MIN_SEMANTIC_AGREEMENT {
                vec![d(
                    DefectKind::SemanticMismatch,
                    format!("semantic mask agrees with the submask union on {:.2}% of pixels", agreement * 100.0),
                )]
            } else {
                Vec::new()
            }
        }
        Err(Error::Record { reason, .. }) => {
            let kind = if reason.starts_with("empty submask") {
                DefectKind::EmptySubmask
            } else if reason.contains("unreadable") {
                DefectKind::Unreadable
            } else {
                DefectKind::ResolutionMismatch
            };
            vec![d(kind, reason)]
        }
        Err(other) => vec![d(DefectKind::Unreadable, other.to_string())],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub root: PathBuf,
    pub records: usize,
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Defect> {
        self.defects.iter().filter(|d| !d.kind.is_warning())
    }
}

/// Scans and loads every split present under `root`.
pub fn validate_dataset(root: &Path) -> Result<ValidationReport> {
    let splits: Vec<Split> = Split::ALL
        .into_iter()
        .filter(|s| split_dir(root, *s).is_dir())
        .collect();
    if splits.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no train/val/test split directories",
            root.display()
        )));
    }
    let mut report = ValidationReport {
        root: root.to_path_buf(),
        records: 0,
        defects: Vec::new(),
    };
    for split in splits {
        let manifest = scan_dataset(root, split)?;
        report.records += manifest.len();
        report.defects.extend(manifest.defects.iter().cloned());
        for id in manifest.ids() {
            report.defects.extend(record_defects(&manifest, id));
        }
    }
    Ok(report)
}

/// Ground truth padded to a fixed number of slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedTargets {
    pub masks: Vec<BinaryMask>,
    pub valid: Vec<bool>,
}

impl PaddedTargets {
    pub fn valid_masks(&self) -> impl Iterator<Item = &BinaryMask> {
        self.masks.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(m, _)| m)
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub fn pad_to_capacity(record: &InstanceRecord, capacity: usize) -> Result<PaddedTargets> {
    let k = record.submasks.len();
    if k == 0 {
        return Err(record_err(&record.id, "record has no submasks"));
    }
    if k > capacity {
        return Err(Error::InvalidArgument(format!(
            "record {} has {k} submasks but capacity is {capacity}; truncate first (truncate_to_capacity)",
            record.id
        )));
    }
    let (h, w) = record.semantic_mask.dims();
    let mut masks = record.submasks.clone();
    masks.resize(capacity, BinaryMask::zeros(h, w));
    let mut valid = vec![true; k];
    valid.resize(capacity, false);
    Ok(PaddedTargets { masks, valid })
}

/// Keeps the `capacity` largest submasks (original order preserved among them).
pub fn truncate_to_capacity(record: &InstanceRecord, capacity: usize) -> InstanceRecord {
    if record.submasks.len() <= capacity {
        return record.clone();
    }
    log::warn!(
        "record {}: truncating {} submasks to the {capacity} largest",
        record.id,
        record.submasks.len()
    );
    let mut order: Vec<usize> = (0..record.submasks.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(record.submasks[i].count()), i));
    let mut keep: Vec<usize> = order.into_iter().take(capacity).collect();
    keep.sort_unstable();
    InstanceRecord {
        submasks: keep.iter().map(|&i| record.submasks[i].clone()).collect(),
        ..record.clone()
    }
}
