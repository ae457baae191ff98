//! Epoch loop for classifier (transfer / fine-tune) and siamese runs, with
//! plateau or step learning-rate decay, early stopping on validation
//! accuracy, checkpointing and a per-epoch metrics log.
//!
//! A run directory holds:
//! `config.toml` (resolved config), `metrics.csv`, `ckpt_best.safetensors`,
//! `ckpt_last.safetensors`, `best.json`, `run.json`, and `gallery.bin` for
//! siamese runs.

mod data;
mod schedule;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use data::{load_batch, FeatureSource};
pub use schedule::{
    build_scheduler, early_stop_check, schedulers, LrScheduler, Monitor, PlateauConfig, PlateauDecay,
    SchedulerSpec, StepConfig, StepDecay,
};

use crate::augment::{build_eval_pipeline, build_train_pipeline, AugmentConfig};
use crate::dataset::{DatasetManifest, ImageRecord, Split, Stage};
use crate::error::{Error, Result};
use crate::metriclearn::{
    self, build_gallery, evaluate_siamese, miners, objectives, sample_triplets, EmbeddingGallery,
    GalleryMode, Triplet,
};
use crate::modelzoo::{
    build_classifier, build_embedder, is_buffer, BackboneSpec, BuildOptions, Model, TrainMode,
    TrainableReport, WeightsConfig,
};
use crate::rng;

pub const CLASSIFIER_LR0: f64 = 0.01;
/// The two siamese presets.
pub const SIAMESE_LR0: [f64; 2] = [0.005, 0.0005];
pub const CLASSIFIER_BATCH: usize = 32;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CKPT_BEST: &str = "ckpt_best.safetensors";
pub const CKPT_LAST: &str = "ckpt_last.safetensors";
pub const BEST_FILE: &str = "best.json";
pub const RUN_FILE: &str = "run.json";
pub const GALLERY_FILE: &str = "gallery.bin";
pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Transfer,
    Finetune,
    Siamese,
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Transfer => "transfer",
            RunMode::Finetune => "finetune",
            RunMode::Siamese => "siamese",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Triplet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    ValAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub metric: EarlyStopMetric,
    pub patience_epochs: usize,
    /// Accuracy fraction; 0.001 is 0.1 percentage points.
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        EarlyStopConfig {
            enabled: true,
            metric: EarlyStopMetric::ValAccuracy,
            patience_epochs: 10,
            min_delta: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiameseConfig {
    pub embed_dim: usize,
    pub l2_normalize: bool,
    pub margin: f64,
    /// Registered triplet objective.
    pub objective: String,
    /// Registered triplet miner.
    pub miner: String,
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub support_size: usize,
    pub gallery_mode: GalleryMode,
    pub k: usize,
    /// Train the backbone too instead of only the embedding head.
    pub finetune: bool,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            embed_dim: metriclearn::DEFAULT_EMBED_DIM,
            l2_normalize: false,
            margin: metriclearn::DEFAULT_MARGIN as f64,
            objective: "hinged".into(),
            miner: "random".into(),
            classes_per_batch: 8,
            samples_per_class: 4,
            support_size: metriclearn::DEFAULT_SUPPORT,
            gallery_mode: GalleryMode::Mean,
            k: 1,
            finetune: false,
        }
    }
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    50
}
fn default_input_size() -> u32 {
    224
}
fn default_true() -> bool {
    true
}

/// One experiment. Unset optional fields take the defaults of `mode`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub backbone: BackboneSpec,
    pub mode: RunMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs_max: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_input_size")]
    pub input_size: u32,
    /// Let BatchNorm layers of a frozen backbone track batch statistics.
    #[serde(default)]
    pub update_bn_stats: bool,
    /// Memoize frozen-backbone features of un-augmented images.
    #[serde(default = "default_true")]
    pub feature_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsConfig>,
    #[serde(default)]
    pub early_stop: EarlyStopConfig,
    #[serde(default)]
    pub siamese: SiameseConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<SchedulerSpec>,
}

impl RunConfig {
    pub fn new(name: &str, backbone: BackboneSpec, mode: RunMode) -> Self {
        RunConfig {
            name: name.to_string(),
            backbone,
            mode,
            loss: None,
            lr0: None,
            batch_size: None,
            weight_decay: default_weight_decay(),
            epochs_max: default_epochs(),
            seed: 0,
            input_size: default_input_size(),
            update_bn_stats: false,
            feature_cache: true,
            weights: None,
            early_stop: EarlyStopConfig::default(),
            siamese: SiameseConfig::default(),
            augment: AugmentConfig::default(),
            scheduler: None,
        }
    }

    pub fn is_siamese(&self) -> bool {
        self.mode == RunMode::Siamese
    }

    pub fn loss(&self) -> LossKind {
        self.loss.unwrap_or(if self.is_siamese() {
            LossKind::Triplet
        } else {
            LossKind::CrossEntropy
        })
    }

    pub fn lr0(&self) -> f64 {
        self.lr0
            .unwrap_or(if self.is_siamese() { SIAMESE_LR0[0] } else { CLASSIFIER_LR0 })
    }

    pub fn scheduler(&self) -> SchedulerSpec {
        self.scheduler.clone().unwrap_or_else(|| {
            if self.is_siamese() {
                SchedulerSpec::step()
            } else {
                SchedulerSpec::plateau()
            }
        })
    }

    /// Images per optimizer step; for siamese runs the P x K batch.
    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.is_siamese() {
            self.siamese.classes_per_batch * self.siamese.samples_per_class
        } else {
            CLASSIFIER_BATCH
        })
    }

    pub fn train_mode(&self) -> TrainMode {
        match self.mode {
            RunMode::Transfer => TrainMode::Transfer,
            RunMode::Finetune => TrainMode::Finetune,
            RunMode::Siamese if self.siamese.finetune => TrainMode::Finetune,
            RunMode::Siamese => TrainMode::Transfer,
        }
    }

    /// Copy with every mode-dependent default written out.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.loss = Some(self.loss());
        c.lr0 = Some(self.lr0());
        c.batch_size = Some(self.batch_size());
        c.scheduler = Some(self.scheduler());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("run '{}': {m}", self.name)));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            || self.name.starts_with('.')
        {
            return bad("name must be non-empty and use only [A-Za-z0-9._-]".into());
        }
        self.backbone.feature_dim()?;
        match (self.mode, self.loss()) {
            (RunMode::Siamese, LossKind::Triplet)
            | (RunMode::Transfer | RunMode::Finetune, LossKind::CrossEntropy) => {}
            (mode, loss) => {
                return bad(format!("mode {mode} requires loss {}, got {loss:?}", match mode {
                    RunMode::Siamese => "triplet",
                    _ => "cross_entropy",
                }))
            }
        }
        let lr0 = self.lr0();
        if !(lr0 > 0.0 && lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {lr0}"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.epochs_max == 0 || self.batch_size() == 0 {
            return bad("epochs_max and batch_size must be >= 1".into());
        }
        if self.input_size < 32 {
            return bad(format!("input_size {} is below the minimum of 32", self.input_size));
        }
        let es = &self.early_stop;
        if es.patience_epochs == 0 || !(es.min_delta >= 0.0) {
            return bad("early_stop needs patience_epochs >= 1 and min_delta >= 0".into());
        }
        self.scheduler().validate()?;
        self.augment.validate()?;
        if self.is_siamese() {
            let s = &self.siamese;
            if s.embed_dim < 2 || s.classes_per_batch < 2 || s.samples_per_class < 2 {
                return bad("siamese needs embed_dim, classes_per_batch and samples_per_class >= 2".into());
            }
            if s.support_size == 0 || s.k == 0 {
                return bad("siamese support_size and k must be >= 1".into());
            }
            if !(s.margin >= 0.0 && s.margin.is_finite()) {
                return bad("triplet margin must be >= 0".into());
            }
            if !objectives().contains(&s.objective) {
                return bad(format!(
                    "unknown triplet objective '{}' (known: {})",
                    s.objective,
                    objectives().names().join(", ")
                ));
            }
            if !miners().contains(&s.miner) {
                return bad(format!(
                    "unknown miner '{}' (known: {})",
                    s.miner,
                    miners().names().join(", ")
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the resolved config; two configs that train identically hash
    /// identically.
    pub fn config_hash(&self) -> Result<String> {
        let text = self.resolved().to_toml()?;
        Ok(crate::short_hash(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok_acc = |a: f64| (0.0..=1.0).contains(&a);
        if !ok_acc(self.train_acc) || !ok_acc(self.val_acc) {
            return Err(Error::NonFinite(format!("epoch {}: accuracy outside [0, 1]", self.epoch)));
        }
        if !self.train_loss.is_finite() || !self.val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {}: non-finite loss", self.epoch)));
        }
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header '{METRICS_HEADER}'"),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("'{s}': {e}")));
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|e| err(format!("'{}': {e}", f[0])))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                train_acc: num(f[3])?,
                val_loss: num(f[4])?,
                val_acc: num(f[5])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub val_acc: f64,
    pub val_loss: f64,
}

/// `run.json`: identity and outcome of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub backbone: String,
    pub mode: RunMode,
    pub config_hash: String,
    pub manifest_hash: String,
    pub seed: u64,
    pub class_ids: Vec<String>,
    pub params: TrainableReport,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best: BestRecord,
}

pub fn read_summary(run_dir: &Path) -> Result<RunSummary> {
    let path = run_dir.join(RUN_FILE);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint {
            path: run_dir.to_path_buf(),
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_run_config(run_dir: &Path) -> Result<RunConfig> {
    let path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunConfig::from_toml(&text)
}

/// Rebuild the network of a finished run and load one of its checkpoints.
/// Backbone weights come from the checkpoint, so no weights cache is needed.
pub fn load_run_model(run_dir: &Path, checkpoint: &str, device: &Device) -> Result<(RunConfig, RunSummary, Model)> {
    let summary = read_summary(run_dir)?;
    let cfg = read_run_config(run_dir)?;
    let model = build_model(&cfg, summary.class_ids.len(), &BuildOptions {
        seed: cfg.seed,
        update_bn_stats: cfg.update_bn_stats,
        weights: None,
        device: device.clone(),
    }, false)?;
    let ckpt = run_dir.join(checkpoint);
    if !ckpt.is_file() {
        return Err(Error::MissingCheckpoint {
            path: run_dir.to_path_buf(),
        });
    }
    model.load(&ckpt)?;
    Ok((cfg, summary, model))
}

fn build_model(cfg: &RunConfig, num_classes: usize, opts: &BuildOptions, pretrained: bool) -> Result<Model> {
    let spec = BackboneSpec {
        pretrained: pretrained && cfg.backbone.pretrained,
        ..cfg.backbone.clone()
    };
    if cfg.is_siamese() {
        let s = &cfg.siamese;
        build_embedder(&spec, s.embed_dim, s.l2_normalize, cfg.train_mode(), opts)
    } else {
        build_classifier(&spec, num_classes, cfg.train_mode(), opts)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Replace a finished run whose config or manifest differ.
    pub overwrite: bool,
    pub device: Device,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            overwrite: false,
            device: Device::Cpu,
        }
    }
}

/// Outcome of `train`: the summary plus whether any work was done.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summary: RunSummary,
    pub metrics: Vec<EpochMetrics>,
    /// The run directory already held this exact run.
    pub reused: bool,
}

/// Train `cfg` on `manifest` into `run_dir`, dispatching on the run mode.
pub fn train(cfg: &RunConfig, manifest: &DatasetManifest, run_dir: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    if cfg.is_siamese() {
        train_siamese(cfg, manifest, run_dir, opts)
    } else {
        train_classifier(cfg, manifest, run_dir, opts)
    }
}

pub fn train_classifier(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if cfg.is_siamese() {
        return Err(Error::Config(format!("run '{}' is a siamese run", cfg.name)));
    }
    let mut ctx = match RunContext::open(cfg, manifest, run_dir, opts)? {
        Opened::Reused(o) => return Ok(o),
        Opened::Fresh(c) => c,
    };
    ctx.run(&mut ClassifierLoop::default())
}

pub fn train_siamese(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    run_dir: &Path,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if !cfg.is_siamese() {
        return Err(Error::Config(format!("run '{}' is not a siamese run", cfg.name)));
    }
    let mut ctx = match RunContext::open(cfg, manifest, run_dir, opts)? {
        Opened::Reused(o) => return Ok(o),
        Opened::Fresh(c) => c,
    };
    let s = &cfg.siamese;
    let mut lp = SiameseLoop {
        objective: objectives().build(&s.objective, &())?,
        miner: miners().build(&s.miner, &(s.margin as f32))?,
        val_triplets: None,
        gallery: None,
    };
    ctx.run(&mut lp)
}

enum Opened<'a> {
    Reused(TrainOutcome),
    Fresh(RunContext<'a>),
}

/// Everything one run needs: resolved config, data views, model, optimizer.
struct RunContext<'a> {
    cfg: RunConfig,
    manifest: &'a DatasetManifest,
    run_dir: PathBuf,
    config_hash: String,
    manifest_hash: String,
    model: Model,
    train: Vec<&'a ImageRecord>,
    train_labels: Vec<usize>,
    val: Vec<&'a ImageRecord>,
    val_labels: Vec<usize>,
}

fn check_manifest(manifest: &DatasetManifest) -> Result<()> {
    if manifest.stage < Stage::Split {
        return Err(Error::StageOrder("manifest has not been split; run split first".into()));
    }
    if manifest.num_classes() < 2 {
        return Err(Error::Dataset(format!("need >= 2 classes, manifest has {}", manifest.num_classes())));
    }
    for s in [Split::Train, Split::Val] {
        if manifest.count(s) == 0 {
            return Err(Error::Dataset(format!("the {s} split is empty")));
        }
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_atomic(path, text.as_bytes())
}

impl<'a> RunContext<'a> {
    fn open(cfg: &RunConfig, manifest: &'a DatasetManifest, run_dir: &Path, opts: &TrainOptions) -> Result<Opened<'a>> {
        cfg.validate()?;
        check_manifest(manifest)?;
        let cfg = cfg.resolved();
        let config_hash = cfg.config_hash()?;
        let manifest_hash = manifest.content_hash();

        if run_dir.join(RUN_FILE).is_file() {
            let prev = read_summary(run_dir)?;
            if prev.config_hash == config_hash && prev.manifest_hash == manifest_hash {
                log::info!("run {} already complete; nothing to do", run_dir.display());
                return Ok(Opened::Reused(TrainOutcome {
                    metrics: read_metrics(&run_dir.join(METRICS_FILE))?,
                    summary: prev,
                    reused: true,
                }));
            }
            if !opts.overwrite {
                return Err(Error::RunConflict {
                    path: run_dir.to_path_buf(),
                    message: format!(
                        "holds a finished run with config {} / manifest {} (now {config_hash} / {manifest_hash}); pass overwrite to replace it",
                        prev.config_hash, prev.manifest_hash
                    ),
                });
            }
        }
        // Anything left here is stale: a replaced or interrupted run.
        for f in [RUN_FILE, METRICS_FILE, CKPT_BEST, CKPT_LAST, BEST_FILE, GALLERY_FILE, CONFIG_FILE] {
            let p = run_dir.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        write_atomic(&run_dir.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;

        let model = build_model(&cfg, manifest.num_classes(), &BuildOptions {
            seed: cfg.seed,
            update_bn_stats: cfg.update_bn_stats,
            weights: cfg.weights.clone(),
            device: opts.device.clone(),
        }, true)?;
        let labelled = |s: Split| -> (Vec<&'a ImageRecord>, Vec<usize>) {
            manifest
                .records_in(s)
                .filter_map(|r| manifest.label_of(r).map(|l| (r, l)))
                .unzip()
        };
        let (train, train_labels) = labelled(Split::Train);
        let (val, val_labels) = labelled(Split::Val);
        log::info!(
            "run {}: {} {} seed {} config {config_hash} manifest {manifest_hash}; {}",
            cfg.name,
            cfg.backbone.name,
            cfg.mode,
            cfg.seed,
            model.trainable_report()
        );
        Ok(Opened::Fresh(RunContext {
            cfg,
            manifest,
            run_dir: run_dir.to_path_buf(),
            config_hash,
            manifest_hash,
            model,
            train,
            train_labels,
            val,
            val_labels,
        }))
    }

    /// Digest of every variable the optimizer must leave untouched.
    fn frozen_digest(&self) -> Result<String> {
        let snap = self.model.snapshot()?;
        let mut h = Sha256::new();
        for name in self.model.frozen_names() {
            // Tracked statistics move when explicitly allowed to.
            if !self.model.features_are_static() && is_buffer(&name) {
                continue;
            }
            h.update(name.as_bytes());
            for v in &snap[&name] {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn run(&mut self, lp: &mut dyn EpochLoop) -> Result<TrainOutcome> {
        let cfg = self.cfg.clone();
        let train_pipeline = build_train_pipeline(&cfg.augment, cfg.seed)?;
        let features = FeatureSource::new(
            &self.model,
            cfg.input_size,
            cfg.batch_size(),
            build_eval_pipeline(&cfg.augment)?,
            cfg.feature_cache,
        );
        if features.caching() {
            log::info!("backbone is frozen and inputs are un-augmented: caching features");
        }
        let mut opt = AdamW::new(self.model.trainable_vars(), ParamsAdamW {
            lr: cfg.lr0(),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        })?;
        let mut scheduler = build_scheduler(&cfg.scheduler(), cfg.lr0())?;
        let frozen_at_start = self.frozen_digest()?;

        let metrics_path = self.run_dir.join(METRICS_FILE);
        let mut metrics_file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        writeln!(metrics_file, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

        let mut history: Vec<EpochMetrics> = Vec::new();
        let mut best: Option<BestRecord> = None;
        let mut stopped_early = false;
        let view = DataView {
            train: &self.train,
            train_labels: &self.train_labels,
            val: &self.val,
            val_labels: &self.val_labels,
            manifest: self.manifest,
        };
        for epoch in 1..=cfg.epochs_max {
            let lr = scheduler.lr();
            opt.set_learning_rate(lr);
            let (train_loss, train_acc) = lp.train_epoch(&cfg, &features, &train_pipeline, &view, &mut opt, epoch)?;
            let (val_loss, val_acc) = lp.validate(&cfg, &features, &view)?;
            let m = EpochMetrics {
                epoch,
                lr,
                train_loss,
                train_acc,
                val_loss,
                val_acc,
            };
            m.validate()?;
            writeln!(metrics_file, "{}", m.csv_row())
                .and_then(|_| metrics_file.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            log::info!(
                "epoch {epoch}: lr {lr} train loss {train_loss:.4} acc {train_acc:.4} val loss {val_loss:.4} acc {val_acc:.4}"
            );
            if best.as_ref().is_none_or(|b| val_acc > b.val_acc) {
                let b = BestRecord {
                    epoch,
                    val_acc,
                    val_loss,
                };
                self.model.save(&self.run_dir.join(CKPT_BEST))?;
                lp.save_best(&self.run_dir)?;
                write_json(&self.run_dir.join(BEST_FILE), &b)?;
                best = Some(b);
            }
            scheduler.step(&m);
            history.push(m);

            let last = epoch == cfg.epochs_max;
            if cfg.early_stop.enabled
                && early_stop_check(&history, cfg.early_stop.patience_epochs, cfg.early_stop.min_delta)
            {
                log::info!(
                    "early stop after epoch {epoch}: no val accuracy gain > {} in {} epochs",
                    cfg.early_stop.min_delta,
                    cfg.early_stop.patience_epochs
                );
                stopped_early = !last;
            }
            if epoch == 1 || last || stopped_early {
                let now = self.frozen_digest()?;
                if now != frozen_at_start {
                    return Err(Error::FrozenModified(format!("after epoch {epoch}")));
                }
            }
            if stopped_early {
                break;
            }
        }
        self.model.save(&self.run_dir.join(CKPT_LAST))?;
        let summary = RunSummary {
            name: cfg.name.clone(),
            backbone: cfg.backbone.name.clone(),
            mode: cfg.mode,
            config_hash: self.config_hash.clone(),
            manifest_hash: self.manifest_hash.clone(),
            seed: cfg.seed,
            class_ids: self.manifest.class_ids(),
            params: self.model.trainable_report(),
            epochs_run: history.len(),
            stopped_early,
            best: best.expect("at least one epoch ran"),
        };
        // Written last: its presence marks the run complete.
        write_json(&self.run_dir.join(RUN_FILE), &summary)?;
        Ok(TrainOutcome {
            summary,
            metrics: history,
            reused: false,
        })
    }
}

struct DataView<'v, 'a> {
    train: &'v [&'a ImageRecord],
    train_labels: &'v [usize],
    val: &'v [&'a ImageRecord],
    val_labels: &'v [usize],
    manifest: &'a DatasetManifest,
}

trait EpochLoop {
    /// Returns (mean train loss, train accuracy).
    fn train_epoch(
        &mut self,
        cfg: &RunConfig,
        features: &FeatureSource,
        pipeline: &crate::augment::Pipeline,
        data: &DataView,
        opt: &mut AdamW,
        epoch: usize,
    ) -> Result<(f64, f64)>;

    /// Returns (val loss, val accuracy).
    fn validate(&mut self, cfg: &RunConfig, features: &FeatureSource, data: &DataView) -> Result<(f64, f64)>;

    /// Persist state belonging to the best checkpoint.
    fn save_best(&mut self, _run_dir: &Path) -> Result<()> {
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn non_finite(epoch: usize, batch: usize, loss: f64, records: &[&ImageRecord]) -> Error {
    let paths: Vec<String> = records.iter().map(|r| r.path.display().to_string()).collect();
    log::error!("epoch {epoch} batch {batch}: loss {loss}; images: {}", paths.join(" "));
    Error::NonFinite(format!(
        "epoch {epoch} batch {batch}: loss {loss} (batch of {} images starting with {})",
        records.len(),
        paths.first().map(String::as_str).unwrap_or("?")
    ))
}

/// Cross-entropy of `logits` against `labels`, and the number of correct
/// argmax predictions.
pub fn cross_entropy_and_correct(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, usize)> {
    let dev = logits.device();
    let y: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let y = Tensor::new(y.as_slice(), dev)?;
    let loss = candle_nn::loss::cross_entropy(logits, &y)?;
    let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok((loss, correct))
}

#[derive(Default)]
struct ClassifierLoop;

impl EpochLoop for ClassifierLoop {
    fn train_epoch(
        &mut self,
        cfg: &RunConfig,
        features: &FeatureSource,
        pipeline: &crate::augment::Pipeline,
        data: &DataView,
        opt: &mut AdamW,
        epoch: usize,
    ) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "shuffle", &[epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(cfg.batch_size()).enumerate() {
            let recs: Vec<&ImageRecord> = idx.iter().map(|&i| data.train[i]).collect();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train_labels[i]).collect();
            let f = features.train_features(&recs, &ids, pipeline, epoch as u64)?;
            let logits = features.model.head_forward(&f)?;
            let (loss, c) = cross_entropy_and_correct(&logits, &labels)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(non_finite(epoch, b, v, &recs));
            }
            opt.backward_step(&loss)?;
            loss_sum += v * idx.len() as f64;
            correct += c;
        }
        let n = data.train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    fn validate(&mut self, cfg: &RunConfig, features: &FeatureSource, data: &DataView) -> Result<(f64, f64)> {
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (recs, labels) in data.val.chunks(cfg.batch_size()).zip(data.val_labels.chunks(cfg.batch_size())) {
            let logits = features.eval_outputs(recs)?;
            let (loss, c) = cross_entropy_and_correct(&logits, labels)?;
            loss_sum += scalar(&loss)? * recs.len() as f64;
            correct += c;
        }
        let n = data.val.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }
}

struct SiameseLoop {
    objective: Box<dyn metriclearn::TripletObjective>,
    miner: Box<dyn metriclearn::TripletMiner>,
    /// Fixed validation triplets, drawn once.
    val_triplets: Option<Vec<Triplet>>,
    /// Gallery of the latest validation pass.
    gallery: Option<EmbeddingGallery>,
}

/// Row-major `B x B` squared distances of `(B, N)` embeddings.
fn pairwise_sq(emb: &Tensor) -> Result<Vec<f32>> {
    let rows = emb.to_vec2::<f32>()?;
    let b = rows.len();
    let mut d = vec![0f32; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = metriclearn::squared_distance(&rows[i], &rows[j]) as f32;
            d[i * b + j] = v;
            d[j * b + i] = v;
        }
    }
    Ok(d)
}

/// Triplets ordered correctly (`d_ap < d_an`), given squared distances.
fn ordered_count(d: &[f32], b: usize, triplets: &[Triplet]) -> usize {
    triplets
        .iter()
        .filter(|t| d[t.anchor * b + t.positive] < d[t.anchor * b + t.negative])
        .count()
}

impl EpochLoop for SiameseLoop {
    fn train_epoch(
        &mut self,
        cfg: &RunConfig,
        features: &FeatureSource,
        pipeline: &crate::augment::Pipeline,
        data: &DataView,
        opt: &mut AdamW,
        epoch: usize,
    ) -> Result<(f64, f64)> {
        let s = &cfg.siamese;
        let e = epoch as u64;
        let batches = metriclearn::pk_batches(
            data.train_labels,
            s.classes_per_batch,
            s.samples_per_class,
            &mut rng::substream(cfg.seed, "pk", &[e]),
        );
        let (mut loss_sum, mut n_triplets, mut ordered) = (0.0, 0usize, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let recs: Vec<&ImageRecord> = idx.iter().map(|&i| data.train[i]).collect();
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train_labels[i]).collect();
            let emb = features
                .model
                .head_forward(&features.train_features(&recs, &ids, pipeline, e)?)?;
            let dist = pairwise_sq(&emb)?;
            let mut mine_rng = rng::substream(cfg.seed, "mine", &[e, b as u64]);
            let triplets = self.miner.mine(
                &labels,
                self.miner.needs_distances().then_some(dist.as_slice()),
                &mut mine_rng,
            );
            if triplets.is_empty() {
                continue;
            }
            let loss = self.objective.batch_loss(&emb, &triplets, s.margin)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(non_finite(epoch, b, v, &recs));
            }
            opt.backward_step(&loss)?;
            loss_sum += v * triplets.len() as f64;
            n_triplets += triplets.len();
            ordered += ordered_count(&dist, idx.len(), &triplets);
        }
        if n_triplets == 0 {
            return Err(Error::Dataset(format!(
                "epoch {epoch}: no valid triplets in {} batches; every batch needs two images of one class and one of another",
                batches.len()
            )));
        }
        Ok((loss_sum / n_triplets as f64, ordered as f64 / n_triplets as f64))
    }

    fn validate(&mut self, cfg: &RunConfig, features: &FeatureSource, data: &DataView) -> Result<(f64, f64)> {
        let s = &cfg.siamese;
        // The support set is drawn with the run seed, so every epoch's gallery
        // uses the same images.
        let gallery = build_gallery(features, data.manifest, s.support_size, cfg.seed, s.gallery_mode)?;
        let val_acc = evaluate_siamese(features, &gallery, data.manifest, data.val, s.k)?;
        let triplets = self
            .val_triplets
            .get_or_insert_with(|| sample_triplets(data.val_labels, &mut rng::stream(cfg.seed, "val-triplets")));
        let val_loss = if triplets.is_empty() {
            0.0
        } else {
            let emb = features.eval_outputs(data.val)?;
            let hinged: &dyn metriclearn::TripletObjective = &metriclearn::HingedTriplet;
            scalar(&hinged.batch_loss(&emb, triplets, s.margin)?)?
        };
        self.gallery = Some(gallery);
        Ok((val_loss, val_acc))
    }

    fn save_best(&mut self, run_dir: &Path) -> Result<()> {
        match &self.gallery {
            Some(g) => g.save(&run_dir.join(GALLERY_FILE)),
            None => Ok(()),
        }
    }
}

/// The lr each epoch should have used, replayed from logged metrics.
pub fn replay_lr(spec: &SchedulerSpec, lr0: f64, metrics: &[EpochMetrics]) -> Result<Vec<f64>> {
    let mut s = build_scheduler(spec, lr0)?;
    Ok(metrics
        .iter()
        .map(|m| {
            let lr = s.lr();
            s.step(m);
            lr
        })
        .collect())
}

/// Mean cross-entropy of an untrained classifier on one batch.
pub fn initial_loss(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    // Inference outputs do not depend on the batch, so images go through one
    // at a time and each graph is dropped before the next is built.
    let logits = (0..inputs.dim(0)?)
        .map(|i| Ok(model.forward_t(&inputs.narrow(0, i, 1)?, false)?.detach()))
        .collect::<Result<Vec<_>>>()?;
    scalar(&cross_entropy_and_correct(&Tensor::cat(&logits, 0)?, labels)?.0)
}
