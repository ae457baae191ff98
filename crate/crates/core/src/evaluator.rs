//! Split accuracy of trained runs, per-image prediction dumps, and the
//! cross-model comparison grid.
//!
//! Grid layout: one row per model, columns
//! `{validation, testing} x {siamese, fine-tune, transfer}`. Siamese runs get
//! their own rows, labelled by initial learning rate. Cells without a run are
//! rendered as `X`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, D};
use serde::{Deserialize, Serialize};

use crate::augment::build_eval_pipeline;
use crate::dataset::{DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::metriclearn::{EmbeddingGallery, EmbeddingSource};
use crate::modelzoo::BACKBONES;
use crate::trainer::{self, FeatureSource, RunMode, RunSummary, CKPT_BEST, GALLERY_FILE};

pub fn predictions_file(split: Split) -> String {
    format!("predictions_{split}.csv")
}

pub fn eval_file(split: Split) -> String {
    format!("eval_{split}.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub path: PathBuf,
    pub true_class: String,
    pub predicted_class: String,
    /// Softmax probability of the predicted class (classifiers) or squared
    /// distance to the matched gallery row (siamese).
    pub score: f64,
}

/// `eval_<split>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub run: String,
    pub split: Split,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub config_hash: String,
    /// Manifest the run was trained on.
    pub train_manifest_hash: String,
    /// Manifest the predictions were made on.
    pub manifest_hash: String,
}

fn class_check(summary: &RunSummary, manifest: &DatasetManifest) -> Result<()> {
    let ids = manifest.class_ids();
    if summary.class_ids.len() != ids.len() {
        return Err(Error::Dataset(format!(
            "class-count mismatch: run {} has {} classes, manifest has {}",
            summary.name,
            summary.class_ids.len(),
            ids.len()
        )));
    }
    if summary.class_ids != ids {
        return Err(Error::Dataset(format!(
            "run {} was trained on different class ids than the manifest holds",
            summary.name
        )));
    }
    Ok(())
}

/// Predict every record of `split` with the run's best checkpoint, write
/// `predictions_<split>.csv` and `eval_<split>.json` into the run directory,
/// and return the accuracy.
pub fn evaluate_run(run_dir: &Path, manifest: &DatasetManifest, split: Split, device: &Device) -> Result<EvalResult> {
    if split == Split::Excluded {
        return Err(Error::InvalidArgument("cannot evaluate the excluded records".into()));
    }
    let (cfg, summary, model) = trainer::load_run_model(run_dir, CKPT_BEST, device)?;
    class_check(&summary, manifest)?;
    let records: Vec<&ImageRecord> = manifest.records_in(split).collect();
    if records.is_empty() {
        return Err(Error::Dataset(format!("the {split} split is empty")));
    }
    let labels: Vec<usize> = records
        .iter()
        .map(|r| manifest.label_of(r).expect("split records are labelled"))
        .collect();
    let features = FeatureSource::new(
        &model,
        cfg.input_size,
        cfg.batch_size(),
        build_eval_pipeline(&cfg.augment)?,
        false,
    );

    let scored: Vec<(usize, f64)> = if cfg.mode == RunMode::Siamese {
        let path = run_dir.join(GALLERY_FILE);
        if !path.is_file() {
            return Err(Error::MissingCheckpoint {
                path: run_dir.to_path_buf(),
            });
        }
        let gallery = EmbeddingGallery::load(&path)?;
        if gallery.class_ids != summary.class_ids {
            return Err(Error::Dataset(format!("{}: gallery classes differ from the run's", path.display())));
        }
        features
            .embed(&records)?
            .iter()
            .map(|e| gallery.classify_scored(e, cfg.siamese.k))
            .collect::<Result<_>>()?
    } else {
        let probs = candle_nn::ops::softmax_last_dim(&features.eval_outputs(&records)?)?;
        let pred: Vec<u32> = probs.argmax(D::Minus1)?.to_vec1()?;
        let probs = probs.to_vec2::<f32>()?;
        pred.iter()
            .zip(&probs)
            .map(|(&p, row)| (p as usize, row[p as usize] as f64))
            .collect()
    };

    let ids = &summary.class_ids;
    let predictions: Vec<Prediction> = records
        .iter()
        .zip(&labels)
        .zip(&scored)
        .map(|((r, &t), &(p, score))| Prediction {
            path: r.path.clone(),
            true_class: ids[t].clone(),
            predicted_class: ids[p].clone(),
            score,
        })
        .collect();
    write_predictions(&run_dir.join(predictions_file(split)), &predictions)?;
    let correct = labels.iter().zip(&scored).filter(|(t, (p, _))| *t == p).count();
    let result = EvalResult {
        run: summary.name.clone(),
        split,
        accuracy: correct as f64 / records.len() as f64,
        correct,
        total: records.len(),
        config_hash: summary.config_hash.clone(),
        train_manifest_hash: summary.manifest_hash.clone(),
        manifest_hash: manifest.content_hash(),
    };
    let path = run_dir.join(eval_file(split));
    let text = serde_json::to_string_pretty(&result).expect("serializable") + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(result)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for p in predictions {
        w.serialize(p).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_eval(run_dir: &Path, split: Split) -> Result<Option<EvalResult>> {
    let path = run_dir.join(eval_file(split));
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Grid column group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Column {
    Siamese,
    Finetune,
    Transfer,
}

impl Column {
    pub const ALL: [Column; 3] = [Column::Siamese, Column::Finetune, Column::Transfer];

    pub fn of(mode: RunMode) -> Column {
        match mode {
            RunMode::Siamese => Column::Siamese,
            RunMode::Finetune => Column::Finetune,
            RunMode::Transfer => Column::Transfer,
        }
    }

    fn heading(self) -> &'static str {
        match self {
            Column::Siamese => "siamese",
            Column::Finetune => "fine-tune",
            Column::Transfer => "transfer",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Column::Siamese => "siamese",
            Column::Finetune => "finetune",
            Column::Transfer => "transfer",
        }
    }
}

/// Display names of the registered backbones, in grid order.
pub const MODEL_LABELS: [(&str, &str); 4] = [
    ("resnet50", "ResNet50"),
    ("densenet121", "DenseNet"),
    ("efficientnet_b4", "EfficientNetB4"),
    ("convnext_tiny", "ConvNeXt"),
];

pub fn model_label(backbone: &str) -> String {
    MODEL_LABELS
        .iter()
        .find(|(b, _)| *b == backbone)
        .map(|(_, l)| l.to_string())
        .unwrap_or_else(|| backbone.to_string())
}

pub fn siamese_label(lr0: f64) -> String {
    format!("Siamese ({lr0})")
}

/// One run's contribution to the grid. Accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub model: String,
    pub column: Column,
    pub val_acc: Option<f64>,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    /// Validation then testing, each in `Column::ALL` order.
    pub cells: [Option<f64>; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Grid row order: backbones in registry order, then siamese rows by
/// decreasing learning rate, then anything else by name.
fn row_rank(model: &str) -> (usize, f64, String) {
    if let Some(i) = MODEL_LABELS.iter().position(|(_, l)| *l == model) {
        return (i, 0.0, String::new());
    }
    let lr = model
        .strip_prefix("Siamese (")
        .and_then(|s| s.strip_suffix(')'))
        .and_then(|s| s.parse::<f64>().ok());
    match lr {
        Some(lr) => (BACKBONES.len(), -lr, String::new()),
        None => (BACKBONES.len() + 1, 0.0, model.to_string()),
    }
}

fn check_percent(model: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(a) if !(0.0..=100.0).contains(&a) => Err(Error::InvalidArgument(format!(
            "{model}: accuracy {a} outside [0, 100]"
        ))),
        _ => Ok(()),
    }
}

/// Arrange entries into the grid. Each (model, column) may appear once.
pub fn render_report(entries: &[ReportEntry]) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    let mut rows: Vec<ReportRow> = Vec::new();
    for e in entries {
        check_percent(&e.model, e.val_acc)?;
        check_percent(&e.model, e.test_acc)?;
        let i = match rows.iter().position(|r| r.model == e.model) {
            Some(i) => i,
            None => {
                rows.push(ReportRow {
                    model: e.model.clone(),
                    cells: [None; 6],
                });
                rows.len() - 1
            }
        };
        let row = &mut rows[i];
        let c = Column::ALL.iter().position(|c| *c == e.column).expect("known column");
        if row.cells[c].is_some() || row.cells[c + 3].is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate entry for {} / {}",
                e.model,
                e.column.heading()
            )));
        }
        row.cells[c] = e.val_acc;
        row.cells[c + 3] = e.test_acc;
    }
    rows.sort_by(|a, b| {
        let (ra, rb) = (row_rank(&a.model), row_rank(&b.model));
        ra.0.cmp(&rb.0).then(ra.1.total_cmp(&rb.1)).then(ra.2.cmp(&rb.2))
    });
    Ok(EvalReport { rows })
}

pub fn format_cell(v: Option<f64>) -> String {
    match v {
        Some(a) => format!("{a:.1}"),
        None => "X".to_string(),
    }
}

const CSV_HEADER: &str = "model,val_siamese,val_finetune,val_transfer,test_siamese,test_finetune,test_transfer";

impl EvalReport {
    /// Cell text per row, model name first.
    pub fn grid(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut line = vec![r.model.clone()];
                line.extend(r.cells.iter().map(|c| format_cell(*c)));
                line
            })
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Neural networks |");
        for split in ["Validation", "Testing"] {
            for c in Column::ALL {
                let _ = write!(out, " {split} {} |", c.heading());
            }
        }
        out.push_str("\n|---|---|---|---|---|---|---|\n");
        for line in self.grid() {
            let _ = writeln!(out, "| {} |", line.join(" | "));
        }
        out.push_str("\nX: no run for this combination.\n");
        out
    }

    pub fn to_csv(&self) -> String {
        debug_assert_eq!(CSV_HEADER.split(',').skip(1).count(), 6);
        debug_assert!(Column::ALL.iter().all(|c| CSV_HEADER.contains(c.key())));
        let mut out = format!("{CSV_HEADER}\n");
        for line in self.grid() {
            let quoted: Vec<String> = line
                .iter()
                .map(|c| if c.contains([',', '"']) { format!("\"{}\"", c.replace('"', "\"\"")) } else { c.clone() })
                .collect();
            out.push_str(&quoted.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<EvalReport> {
        let bad = |line: usize, message: String| Error::Parse {
            path: PathBuf::from("<report csv>"),
            line,
            message,
        };
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(bad(1, format!("expected header '{CSV_HEADER}'")));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(i + 2, e.to_string()))?;
            let mut cells = [None; 6];
            for (k, cell) in cells.iter_mut().enumerate() {
                let s = rec.get(k + 1).unwrap_or_default();
                *cell = match s {
                    "X" => None,
                    _ => Some(s.parse::<f64>().map_err(|e| bad(i + 2, format!("'{s}': {e}")))?),
                };
            }
            rows.push(ReportRow {
                model: rec.get(0).unwrap_or_default().to_string(),
                cells,
            });
        }
        Ok(EvalReport { rows })
    }

    /// One entry per filled (model, column) pair.
    pub fn entries(&self) -> Vec<ReportEntry> {
        let mut out = Vec::new();
        for r in &self.rows {
            for (i, c) in Column::ALL.iter().enumerate() {
                if r.cells[i].is_some() || r.cells[i + 3].is_some() {
                    out.push(ReportEntry {
                        model: r.model.clone(),
                        column: *c,
                        val_acc: r.cells[i],
                        test_acc: r.cells[i + 3],
                    });
                }
            }
        }
        out
    }
}

/// Gather grid entries from evaluated run directories. All evaluations must
/// come from one manifest and match their run's config, unless `force`.
pub fn collect_runs(run_dirs: &[PathBuf], force: bool) -> Result<Vec<ReportEntry>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    let mut entries = Vec::new();
    let mut manifests: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut problems = Vec::new();
    for dir in run_dirs {
        let summary = trainer::read_summary(dir)?;
        let cfg = trainer::read_run_config(dir)?;
        let mut acc = [None, None];
        for (slot, split) in acc.iter_mut().zip([Split::Val, Split::Test]) {
            let Some(ev) = read_eval(dir, split)? else {
                log::warn!("{}: no {split} evaluation; its cell stays empty", dir.display());
                continue;
            };
            if ev.config_hash != summary.config_hash {
                problems.push(format!(
                    "{}: {split} evaluation was made with config {}, run has {}",
                    dir.display(),
                    ev.config_hash,
                    summary.config_hash
                ));
            }
            manifests.entry(ev.manifest_hash.clone()).or_default().push(dir.display().to_string());
            *slot = Some(ev.accuracy * 100.0);
        }
        let model = match summary.mode {
            RunMode::Siamese => siamese_label(cfg.lr0()),
            _ => model_label(&summary.backbone),
        };
        entries.push(ReportEntry {
            model,
            column: Column::of(summary.mode),
            val_acc: acc[0],
            test_acc: acc[1],
        });
    }
    if manifests.len() > 1 {
        let listing: Vec<String> = manifests.iter().map(|(h, runs)| format!("{h}: {}", runs.join(" "))).collect();
        problems.push(format!("evaluations span several manifests ({})", listing.join("; ")));
    }
    if !problems.is_empty() {
        if !force {
            return Err(Error::RunConflict {
                path: run_dirs[0].clone(),
                message: format!("{}; use force to combine anyway", problems.join("; ")),
            });
        }
        for p in problems {
            log::warn!("{p}");
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(model: &str, column: Column, val: Option<f64>, test: Option<f64>) -> ReportEntry {
        ReportEntry {
            model: model.into(),
            column,
            val_acc: val,
            test_acc: test,
        }
    }

    #[test]
    fn single_run_fills_one_row() {
        let r = render_report(&[entry("DenseNet", Column::Transfer, Some(86.64), Some(79.6))]).unwrap();
        assert_eq!(r.grid(), vec![vec!["DenseNet", "X", "X", "86.6", "X", "X", "79.6"]]);
    }

    #[test]
    fn empty_and_duplicates_rejected() {
        assert!(render_report(&[]).is_err());
        let e = entry("ResNet50", Column::Finetune, Some(1.0), None);
        assert!(render_report(&[e.clone(), e]).is_err());
        assert!(render_report(&[entry("ResNet50", Column::Finetune, Some(101.0), None)]).is_err());
    }

    #[test]
    fn rows_follow_grid_order() {
        let r = render_report(&[
            entry(&siamese_label(0.0005), Column::Siamese, Some(76.4), None),
            entry("ConvNeXt", Column::Transfer, Some(80.6), None),
            entry(&siamese_label(0.005), Column::Siamese, Some(73.3), None),
            entry("ResNet50", Column::Finetune, Some(71.2), None),
            entry("ResNet50", Column::Transfer, Some(78.8), None),
        ])
        .unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["ResNet50", "ConvNeXt", "Siamese (0.005)", "Siamese (0.0005)"]);
    }

    #[test]
    fn csv_roundtrip_is_idempotent() {
        let r = render_report(&[
            entry("ConvNeXt", Column::Finetune, Some(0.2), Some(20.833)),
            entry("Odd, \"name\"", Column::Transfer, None, Some(50.0)),
        ])
        .unwrap();
        let once = r.to_csv();
        let parsed = EvalReport::parse_csv(&once).unwrap();
        assert_eq!(parsed.to_csv(), once);
        assert_eq!(render_report(&parsed.entries()).unwrap().to_csv(), once);
        assert!(once.contains("20.8"));
        assert!(EvalReport::parse_csv("a,b\n").is_err());
    }

    #[test]
    fn markdown_has_x_cells() {
        let md = render_report(&[entry("DenseNet", Column::Transfer, Some(86.6), Some(79.6))])
            .unwrap()
            .to_markdown();
        assert!(md.contains("| DenseNet | X | X | 86.6 | X | X | 79.6 |"), "{md}");
    }
}
