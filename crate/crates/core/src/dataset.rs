//! Labeled image collection, class filtering and the per-class split.
//!
//! A [`DatasetManifest`] is the unit handed between pipeline stages. On disk
//! it is JSON-lines: one header object followed by one object per record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_SCHEMA: &str = "catreid-manifest/1";
pub const DEFAULT_MIN_IMAGES: usize = 8;
pub const DEFAULT_VAL_PER_CLASS: usize = 3;
pub const DEFAULT_TEST_PER_CLASS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Excluded,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Excluded => "excluded",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "excluded" => Ok(Split::Excluded),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    MultiSubject,
    NoDetection,
    ClassTooSmall,
    /// The file could not be opened or is not a decodable image.
    Unreadable,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::MultiSubject => "multi_subject",
            ExclusionReason::NoDetection => "no_detection",
            ExclusionReason::ClassTooSmall => "class_too_small",
            ExclusionReason::Unreadable => "unreadable",
        })
    }
}

/// Axis-aligned box in source-image pixels, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Intersection with `[0, width) x [0, height)`; `None` when empty.
    pub fn clamped(&self, width: u32, height: u32) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Where a record's subject crop was written and how it was cut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub path: PathBuf,
    pub sha256: String,
    /// Square `[x, y, side]` in source pixels, possibly extending past the
    /// image border.
    pub square: [i64; 3],
    pub source_dims: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub class_id: String,
    pub split: Split,
    /// Detector box as reported, before any clamping to the image.
    pub bbox: Option<BBox>,
    pub exclusion_reason: Option<ExclusionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropInfo>,
}

impl ImageRecord {
    pub fn new(path: impl Into<PathBuf>, class_id: impl Into<String>) -> Self {
        ImageRecord {
            path: path.into(),
            class_id: class_id.into(),
            split: Split::Train,
            bbox: None,
            exclusion_reason: None,
            crop: None,
        }
    }

    pub fn is_excluded(&self) -> bool {
        self.exclusion_reason.is_some()
    }

    pub fn exclude(&mut self, reason: ExclusionReason) {
        self.split = Split::Excluded;
        self.exclusion_reason = Some(reason);
    }

    fn reinstate(&mut self) {
        self.split = Split::Train;
        self.exclusion_reason = None;
    }

    /// The image the model should see: the crop when one exists.
    pub fn model_input_path(&self) -> &Path {
        self.crop.as_ref().map(|c| c.path.as_path()).unwrap_or(&self.path)
    }
}

/// How far a manifest has progressed through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingested,
    Filtered,
    Split,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub excluded: usize,
}

impl ClassStats {
    pub fn retained(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    /// Retained class ids in lexicographic order mapped to `0..C`.
    pub class_index: BTreeMap<String, usize>,
    pub seed: Option<u64>,
    pub stage: Stage,
    pub preprocessed: bool,
    pub stats: BTreeMap<String, ClassStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    seed: Option<u64>,
    classes: usize,
    records: usize,
    stage: Stage,
    #[serde(default)]
    preprocessed: bool,
    stats: BTreeMap<String, ClassStats>,
}

impl DatasetManifest {
    pub fn from_records(mut records: Vec<ImageRecord>) -> Self {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let mut m = DatasetManifest {
            records,
            class_index: BTreeMap::new(),
            seed: None,
            stage: Stage::Ingested,
            preprocessed: false,
            stats: BTreeMap::new(),
        };
        m.refresh();
        m
    }

    /// Recompute `class_index` and `stats` from the records.
    pub fn refresh(&mut self) {
        let mut stats: BTreeMap<String, ClassStats> = BTreeMap::new();
        for r in &self.records {
            let s = stats.entry(r.class_id.clone()).or_default();
            match r.split {
                Split::Train => s.train += 1,
                Split::Val => s.val += 1,
                Split::Test => s.test += 1,
                Split::Excluded => s.excluded += 1,
            }
        }
        self.class_index = stats
            .iter()
            .filter(|(_, s)| s.retained() > 0)
            .enumerate()
            .map(|(i, (k, _))| (k.clone(), i))
            .collect();
        self.stats = stats;
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.class_index.keys().cloned().collect()
    }

    pub fn label_of(&self, record: &ImageRecord) -> Option<usize> {
        if record.is_excluded() {
            return None;
        }
        self.class_index.get(&record.class_id).copied()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    /// Removals broken down by reason, so each filter's effect is visible.
    pub fn removal_summary(&self) -> BTreeMap<ExclusionReason, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            if let Some(reason) = r.exclusion_reason {
                *out.entry(reason).or_insert(0) += 1;
            }
        }
        out
    }

    /// Check the structural invariants; used after load and in tests.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if (r.split == Split::Excluded) != r.exclusion_reason.is_some() {
                return Err(Error::Dataset(format!(
                    "{}: split {} inconsistent with exclusion reason {:?}",
                    r.path.display(),
                    r.split,
                    r.exclusion_reason
                )));
            }
        }
        for w in self.records.windows(2) {
            if w[0].path >= w[1].path {
                return Err(Error::Dataset(format!(
                    "records not in strict path order at {}",
                    w[1].path.display()
                )));
            }
        }
        Ok(())
    }

    /// Stable content hash of the serialized manifest.
    pub fn content_hash(&self) -> String {
        crate::short_hash(self.to_jsonl().as_bytes())
    }

    fn header(&self) -> Header {
        Header {
            schema: MANIFEST_SCHEMA.to_string(),
            seed: self.seed,
            classes: self.num_classes(),
            records: self.records.len(),
            stage: self.stage,
            preprocessed: self.preprocessed,
            stats: self.stats.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn is_hidden(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with('.'))
}

fn readable_image(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .ok()
        .and_then(|r| r.into_dimensions().ok())
        .is_some()
}

/// One record per file under `root/<class_id>/`. Files that are not readable
/// images are kept, excluded with reason `unreadable`.
pub fn ingest(root: &Path) -> Result<DatasetManifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut class_dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && !is_hidden(&path) {
            class_dirs.push(path);
        }
    }
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no classes found in {}",
            root.display()
        )));
    }
    class_dirs.sort();

    let mut records = Vec::new();
    for dir in &class_dirs {
        let class_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("non-UTF-8 class dir {}", dir.display())))?
            .to_string();
        for entry in walkdir::WalkDir::new(dir).min_depth(1).max_depth(1).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(dir).to_path_buf();
                Error::io(path, e.into())
            })?;
            if !entry.file_type().is_file() || is_hidden(entry.path()) {
                continue;
            }
            let mut record = ImageRecord::new(entry.path(), class_id.clone());
            if !readable_image(entry.path()) {
                log::warn!("unreadable image {}", entry.path().display());
                record.exclude(ExclusionReason::Unreadable);
            }
            records.push(record);
        }
    }
    Ok(DatasetManifest::from_records(records))
}

/// Paths ingest flagged as unreadable.
pub fn unreadable_paths(m: &DatasetManifest) -> Vec<&Path> {
    m.records
        .iter()
        .filter(|r| r.exclusion_reason == Some(ExclusionReason::Unreadable))
        .map(|r| r.path.as_path())
        .collect()
}

/// Exclude every class with fewer than `min_images` usable images.
pub fn filter_small_classes(m: &DatasetManifest, min_images: usize) -> Result<DatasetManifest> {
    if min_images < 6 {
        return Err(Error::InvalidArgument(format!(
            "min_images must be at least 6, got {min_images}"
        )));
    }
    if m.stage == Stage::Split {
        return Err(Error::StageOrder(
            "manifest is already split; filter classes before splitting".into(),
        ));
    }
    let mut out = m.clone();
    // Earlier class-size exclusions are recomputed so the filter is idempotent
    // and can be re-run after preprocessing removes images.
    for r in &mut out.records {
        if r.exclusion_reason == Some(ExclusionReason::ClassTooSmall) {
            r.reinstate();
        }
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in out.records.iter().filter(|r| !r.is_excluded()) {
        *sizes.entry(r.class_id.as_str()).or_insert(0) += 1;
    }
    let small: Vec<String> = sizes
        .iter()
        .filter(|(_, &n)| n < min_images)
        .map(|(k, _)| k.to_string())
        .collect();
    for r in &mut out.records {
        if !r.is_excluded() && small.binary_search(&r.class_id).is_ok() {
            r.exclude(ExclusionReason::ClassTooSmall);
        }
    }
    out.refresh();
    if out.num_classes() == 0 {
        return Err(Error::Dataset("empty dataset after filtering".into()));
    }
    out.stage = Stage::Filtered;
    Ok(out)
}

/// Seeded per-class split: `val_per_class` val, `test_per_class` test, the
/// rest train.
pub fn split(
    m: &DatasetManifest,
    val_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if m.stage < Stage::Filtered {
        return Err(Error::StageOrder(
            "manifest has not been filtered; run filter_small_classes first".into(),
        ));
    }
    let need = val_per_class + test_per_class + 1;
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        if !r.is_excluded() {
            by_class.entry(r.class_id.as_str()).or_default().push(i);
        }
    }
    if let Some((class, idx)) = by_class.iter().find(|(_, idx)| idx.len() < need) {
        return Err(Error::Dataset(format!(
            "class {class} has {} images, split needs at least {need}",
            idx.len()
        )));
    }

    let mut out = m.clone();
    let mut rng = rng::stream(seed, "split");
    for (_, mut idx) in by_class {
        idx.shuffle(&mut rng);
        for (rank, i) in idx.into_iter().enumerate() {
            out.records[i].split = if rank < val_per_class {
                Split::Val
            } else if rank < val_per_class + test_per_class {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    out.seed = Some(seed);
    out.stage = Stage::Split;
    out.refresh();
    Ok(out)
}

pub fn save_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(m.to_jsonl().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "empty manifest".into())),
    };
    let raw: serde_json::Value =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, e.to_string()))?;
    let schema = raw.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
    if schema != MANIFEST_SCHEMA {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: MANIFEST_SCHEMA.to_string(),
            found: schema.to_string(),
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;

    let mut records = Vec::with_capacity(header.records);
    let mut last_line = 1;
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        last_line = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(record);
    }
    if records.len() != header.records {
        return Err(parse_err(
            last_line + 1,
            format!(
                "truncated manifest: header declares {} records, found {}",
                header.records,
                records.len()
            ),
        ));
    }

    let mut m = DatasetManifest {
        records,
        class_index: BTreeMap::new(),
        seed: header.seed,
        stage: header.stage,
        preprocessed: header.preprocessed,
        stats: BTreeMap::new(),
    };
    m.refresh();
    m.validate()?;
    if m.num_classes() != header.classes || m.stats != header.stats {
        return Err(parse_err(1, "header class count or stats disagree with records".into()));
    }
    Ok(m)
}
