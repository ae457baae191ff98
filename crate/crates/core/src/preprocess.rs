//! Subject crops: detector box, 1:1 squaring with black padding, resize.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use image::imageops::FilterType;
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, BBox, CropInfo, DatasetManifest, ExclusionReason, Stage};
use crate::error::{Error, Result};
use crate::imageio;

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.5;
pub const DEFAULT_OUT_SIZE: u32 = 224;
pub const DEFAULT_TARGET_LABEL: &str = "cat";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f32,
    pub class_label: String,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f32, class_label: impl Into<String>) -> Result<Self> {
        let d = Detection {
            bbox,
            confidence,
            class_label: class_label.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        if !(b.w > 0.0 && b.h > 0.0 && b.x.is_finite() && b.y.is_finite()) {
            return Err(Error::InvalidArgument(format!("degenerate detection box {b:?}")));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidArgument(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

/// Anything that returns subject boxes for an image.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// Errors mean the detector itself failed; an empty list means nothing
    /// was found.
    fn detect(&self, image_path: &Path, image: &RgbImage) -> Result<Vec<Detection>>;
}

/// Reports the whole frame as one confident subject. Suitable for inputs
/// that are already subject crops.
#[derive(Debug, Default)]
pub struct FullFrameDetector {
    pub label: String,
}

impl Detector for FullFrameDetector {
    fn name(&self) -> &str {
        "full-frame"
    }

    fn detect(&self, _image_path: &Path, image: &RgbImage) -> Result<Vec<Detection>> {
        let label = if self.label.is_empty() {
            DEFAULT_TARGET_LABEL
        } else {
            &self.label
        };
        Ok(vec![Detection::new(
            BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64),
            1.0,
            label,
        )?])
    }
}

/// Returns preconfigured detections keyed by image path or file name.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct StubDetector {
    #[serde(default)]
    pub default: Vec<Detection>,
    #[serde(default)]
    pub images: HashMap<String, Vec<Detection>>,
}

impl StubDetector {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn with(mut self, key: impl Into<String>, detections: Vec<Detection>) -> Self {
        self.images.insert(key.into(), detections);
        self
    }
}

impl Detector for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn detect(&self, image_path: &Path, _image: &RgbImage) -> Result<Vec<Detection>> {
        let by_path = self.images.get(image_path.to_string_lossy().as_ref());
        let by_name = || {
            image_path
                .file_name()
                .and_then(|n| self.images.get(n.to_string_lossy().as_ref()))
        };
        Ok(by_path.or_else(by_name).unwrap_or(&self.default).clone())
    }
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_path: &'a Path,
}

#[derive(Deserialize)]
struct DetectResponse {
    #[serde(default)]
    detections: Vec<Detection>,
    #[serde(default)]
    error: Option<String>,
}

struct DetectorProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Talks JSON-lines to a long-running detector process:
/// `{"image_path": ...}` in, `{"detections": [...]}` out.
pub struct SubprocessDetector {
    command: String,
    process: Mutex<DetectorProcess>,
}

impl SubprocessDetector {
    pub fn spawn(command_line: &str) -> Result<Self> {
        let mut parts = command_line.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty detector command".into()))?;
        let mut child = Command::new(program)
            .args(parts)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::DetectorUnavailable(format!("cannot start {command_line:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessDetector {
            command: command_line.to_string(),
            process: Mutex::new(DetectorProcess { child, stdin, stdout }),
        })
    }
}

impl Detector for SubprocessDetector {
    fn name(&self) -> &str {
        &self.command
    }

    fn detect(&self, image_path: &Path, _image: &RgbImage) -> Result<Vec<Detection>> {
        let unavailable = |msg: String| Error::DetectorUnavailable(format!("{}: {msg}", self.command));
        let mut proc = self.process.lock().map_err(|_| unavailable("poisoned".into()))?;
        let mut request = serde_json::to_string(&DetectRequest { image_path })
            .map_err(|e| unavailable(e.to_string()))?;
        request.push('\n');
        proc.stdin
            .write_all(request.as_bytes())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| unavailable(e.to_string()))?;
        let mut line = String::new();
        let n = proc
            .stdout
            .read_line(&mut line)
            .map_err(|e| unavailable(e.to_string()))?;
        if n == 0 {
            return Err(unavailable("process closed its output".into()));
        }
        let response: DetectResponse =
            serde_json::from_str(&line).map_err(|e| unavailable(format!("bad response: {e}")))?;
        if let Some(err) = response.error {
            return Err(unavailable(err));
        }
        for d in &response.detections {
            d.validate()?;
        }
        Ok(response.detections)
    }
}

impl Drop for SubprocessDetector {
    fn drop(&mut self) {
        if let Ok(proc) = self.process.get_mut() {
            let _ = proc.child.kill();
            let _ = proc.child.wait();
        }
    }
}

type DetectorCtor = fn(Option<&str>) -> Result<Box<dyn Detector>>;

/// Detectors selectable by name from config or CLI as `name` or `name:arg`.
pub struct DetectorRegistry {
    ctors: BTreeMap<&'static str, DetectorCtor>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = DetectorRegistry {
            ctors: BTreeMap::new(),
        };
        r.register("full-frame", |_| Ok(Box::new(FullFrameDetector::default())));
        r.register("stub", |arg| {
            let path = arg.ok_or_else(|| Error::InvalidArgument("stub detector needs stub:<file.json>".into()))?;
            Ok(Box::new(StubDetector::from_file(Path::new(path))?))
        });
        r.register("cmd", |arg| {
            let cmd = arg.ok_or_else(|| Error::InvalidArgument("cmd detector needs cmd:<command line>".into()))?;
            Ok(Box::new(SubprocessDetector::spawn(cmd)?))
        });
        r
    }
}

impl DetectorRegistry {
    pub fn register(&mut self, name: &'static str, ctor: DetectorCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ctors.keys().copied()
    }

    pub fn build(&self, spec: &str) -> Result<Box<dyn Detector>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let ctor = self.ctors.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown detector {name:?}; available: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        ctor(arg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubjectOutcome {
    Subject(Detection),
    Excluded(ExclusionReason),
}

/// Exactly one `target_label` detection at or above `conf_threshold` is a
/// subject; none is `no_detection`, more than one is `multi_subject`.
pub fn detect_subject(
    image_path: &Path,
    image: &RgbImage,
    detector: &dyn Detector,
    conf_threshold: f32,
    target_label: &str,
) -> Result<SubjectOutcome> {
    let mut hits: Vec<Detection> = detector
        .detect(image_path, image)?
        .into_iter()
        .filter(|d| d.class_label == target_label && d.confidence >= conf_threshold)
        .collect();
    Ok(match hits.len() {
        0 => SubjectOutcome::Excluded(ExclusionReason::NoDetection),
        1 => SubjectOutcome::Subject(hits.pop().expect("one hit")),
        _ => SubjectOutcome::Excluded(ExclusionReason::MultiSubject),
    })
}

/// Square crop window in source pixels. The window may extend past the
/// image; that part is rendered as black padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub source_dims: (u32, u32),
    pub x: i64,
    pub y: i64,
    pub side: u32,
    pub pad_color: [u8; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Padding {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl Padding {
    pub fn is_none(&self) -> bool {
        *self == Padding::default()
    }
}

impl CropSpec {
    /// `[x0, x1) x [y0, y1)` of the window that lies inside the image.
    pub fn visible(&self) -> Option<(i64, i64, i64, i64)> {
        let (w, h) = (self.source_dims.0 as i64, self.source_dims.1 as i64);
        let s = self.side as i64;
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + s).min(w);
        let y1 = (self.y + s).min(h);
        (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
    }

    pub fn padding(&self) -> Padding {
        let (w, h) = (self.source_dims.0 as i64, self.source_dims.1 as i64);
        let s = self.side as i64;
        let clip = |v: i64| v.clamp(0, s) as u32;
        Padding {
            left: clip(-self.x),
            top: clip(-self.y),
            right: clip(self.x + s - w),
            bottom: clip(self.y + s - h),
        }
    }

    /// Fraction of the window that falls outside the source image.
    pub fn out_of_bounds_fraction(&self) -> f64 {
        let area = (self.side as f64).powi(2);
        let inside = self
            .visible()
            .map(|(x0, y0, x1, y1)| ((x1 - x0) * (y1 - y0)) as f64)
            .unwrap_or(0.0);
        1.0 - inside / area
    }

    pub fn center(&self) -> (f64, f64) {
        let half = self.side as f64 / 2.0;
        (self.x as f64 + half, self.y as f64 + half)
    }
}

/// Smallest integer square around the box center that covers both sides.
pub fn square_bbox(bbox: &BBox, source_dims: (u32, u32)) -> CropSpec {
    let side = (bbox.w.ceil().max(bbox.h.ceil()) as u32).max(1);
    let (cx, cy) = bbox.center();
    let half = side as f64 / 2.0;
    CropSpec {
        source_dims,
        x: (cx - half).round() as i64,
        y: (cy - half).round() as i64,
        side,
        pad_color: [0, 0, 0],
    }
}

/// Cut the square window out of `image`, padding with black wherever the
/// window leaves the image, and resample to `out_size x out_size`.
pub fn crop_and_resize(image: &RgbImage, spec: &CropSpec, out_size: u32) -> Result<RgbImage> {
    if image.dimensions() != spec.source_dims {
        return Err(Error::InvalidArgument(format!(
            "crop spec made for {:?} applied to {:?} image",
            spec.source_dims,
            image.dimensions()
        )));
    }
    let mut out = RgbImage::from_pixel(out_size, out_size, image::Rgb(spec.pad_color));
    let Some((x0, y0, x1, y1)) = spec.visible() else {
        return Ok(out);
    };
    let scale = out_size as f64 / spec.side as f64;
    let to_out = |v: i64, origin: i64| (((v - origin) as f64) * scale).round() as u32;
    let (ox0, ox1) = (to_out(x0, spec.x), to_out(x1, spec.x));
    let (oy0, oy1) = (to_out(y0, spec.y), to_out(y1, spec.y));
    if ox1 <= ox0 || oy1 <= oy0 {
        return Ok(out);
    }
    let region = image::imageops::crop_imm(
        image,
        x0 as u32,
        y0 as u32,
        (x1 - x0) as u32,
        (y1 - y0) as u32,
    )
    .to_image();
    let resized = image::imageops::resize(&region, ox1 - ox0, oy1 - oy0, FilterType::Triangle);
    image::imageops::replace(&mut out, &resized, ox0 as i64, oy0 as i64);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    pub conf_threshold: f32,
    pub out_size: u32,
    pub target_label: String,
    /// Re-apply the class-size filter after detector exclusions.
    pub min_images: Option<usize>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            out_size: DEFAULT_OUT_SIZE,
            target_label: DEFAULT_TARGET_LABEL.into(),
            min_images: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreprocessSummary {
    pub written: usize,
    pub unchanged: usize,
    pub excluded: BTreeMap<ExclusionReason, usize>,
}

enum RecordOutcome {
    Unchanged,
    Cropped { crop: CropInfo, bbox: BBox, written: bool },
    Excluded(ExclusionReason, Option<BBox>),
}

pub fn crop_path(out_dir: &Path, class_id: &str, source: &Path) -> PathBuf {
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    out_dir.join(class_id).join(format!("{stem}.png"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

fn process_record(
    record: &dataset::ImageRecord,
    detector: &dyn Detector,
    out_dir: &Path,
    opts: &PreprocessOptions,
) -> Result<RecordOutcome> {
    let target = crop_path(out_dir, &record.class_id, &record.path);
    if let Some(crop) = &record.crop {
        if crop.path == target && file_sha256(&crop.path).as_deref() == Some(crop.sha256.as_str()) {
            return Ok(RecordOutcome::Unchanged);
        }
    }
    let image = match imageio::load_rgb(&record.path) {
        Ok(img) => img,
        Err(Error::Image { path, source }) => {
            log::warn!("{}: {source}", path.display());
            return Ok(RecordOutcome::Excluded(ExclusionReason::Unreadable, None));
        }
        Err(e) => return Err(e),
    };
    let detection = match detect_subject(
        &record.path,
        &image,
        detector,
        opts.conf_threshold,
        &opts.target_label,
    )? {
        SubjectOutcome::Subject(d) => d,
        SubjectOutcome::Excluded(reason) => return Ok(RecordOutcome::Excluded(reason, None)),
    };
    let spec = square_bbox(&detection.bbox, image.dimensions());
    let crop_img = crop_and_resize(&image, &spec, opts.out_size)?;
    let bytes = imageio::encode_png(&crop_img)?;
    let sha = sha256_hex(&bytes);
    let written = if file_sha256(&target).as_deref() == Some(sha.as_str()) {
        false
    } else {
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&target, &bytes).map_err(|e| Error::io(&target, e))?;
        true
    };
    Ok(RecordOutcome::Cropped {
        crop: CropInfo {
            path: target,
            sha256: sha,
            square: [spec.x, spec.y, spec.side as i64],
            source_dims: [spec.source_dims.0, spec.source_dims.1],
        },
        bbox: detection.bbox,
        written,
    })
}

/// Crop every usable record into `out_dir/<class_id>/<stem>.png`.
///
/// Re-running over a finished directory writes nothing: records whose crop
/// file still matches its recorded hash are skipped, and freshly computed
/// crops identical to the file on disk are not rewritten.
pub fn preprocess_manifest(
    m: &DatasetManifest,
    detector: &dyn Detector,
    out_dir: &Path,
    opts: &PreprocessOptions,
) -> Result<(DatasetManifest, PreprocessSummary)> {
    if m.stage == Stage::Split {
        return Err(Error::StageOrder(
            "manifest is already split; preprocess before splitting so detector exclusions are \
             applied before the per-class split"
                .into(),
        ));
    }
    let mut seen = HashMap::new();
    for r in m.records.iter().filter(|r| !r.is_excluded()) {
        let target = crop_path(out_dir, &r.class_id, &r.path);
        if let Some(prev) = seen.insert(target.clone(), &r.path) {
            return Err(Error::Dataset(format!(
                "{} and {} would both crop to {}",
                prev.display(),
                r.path.display(),
                target.display()
            )));
        }
    }

    let outcomes: Vec<(usize, RecordOutcome)> = m
        .records
        .par_iter()
        .enumerate()
        .filter(|(_, r)| !r.is_excluded())
        .map(|(i, r)| process_record(r, detector, out_dir, opts).map(|o| (i, o)))
        .collect::<Result<_>>()?;

    let mut out = m.clone();
    let mut summary = PreprocessSummary::default();
    for (i, outcome) in outcomes {
        let record = &mut out.records[i];
        match outcome {
            RecordOutcome::Unchanged => summary.unchanged += 1,
            RecordOutcome::Cropped { crop, bbox, written } => {
                if written {
                    summary.written += 1;
                } else {
                    summary.unchanged += 1;
                }
                record.bbox = Some(bbox);
                record.crop = Some(crop);
            }
            RecordOutcome::Excluded(reason, bbox) => {
                *summary.excluded.entry(reason).or_insert(0) += 1;
                record.bbox = bbox;
                record.crop = None;
                record.exclude(reason);
            }
        }
    }
    out.preprocessed = true;
    out.refresh();
    if let Some(min_images) = opts.min_images {
        out = dataset::filter_small_classes(&out, min_images)?;
    }
    Ok((out, summary))
}
