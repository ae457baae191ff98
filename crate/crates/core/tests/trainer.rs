use std::fs;
use std::path::Path;

use catreid_core::augment::AugmentConfig;
use catreid_core::dataset::{self, DatasetManifest};
use catreid_core::metriclearn::EmbeddingGallery;
use catreid_core::modelzoo::BackboneSpec;
use catreid_core::synth::{self, SynthConfig};
use catreid_core::trainer::{self, RunConfig, RunMode, SchedulerSpec, TrainOptions};
use catreid_core::Error;

fn manifest(dir: &Path, classes: usize, per_class: usize) -> DatasetManifest {
    let data = dir.join("data");
    let cfg = SynthConfig {
        classes,
        per_class,
        size: 32,
        ..Default::default()
    };
    synth::generate(&cfg, &data).unwrap();
    let m = dataset::filter_small_classes(&dataset::ingest(&data).unwrap(), 8).unwrap();
    dataset::split(&m, 2, 1, 3).unwrap()
}

fn small(name: &str, mode: RunMode) -> RunConfig {
    let mut cfg = RunConfig::new(name, BackboneSpec::new("densenet121", false), mode);
    cfg.input_size = 32;
    cfg.epochs_max = 3;
    cfg.batch_size = Some(8);
    cfg.augment = AugmentConfig::disabled();
    cfg.siamese.embed_dim = 16;
    cfg.siamese.classes_per_batch = 3;
    cfg.siamese.samples_per_class = 2;
    cfg
}

#[test]
fn mode_and_loss_must_agree() {
    let mut cfg = small("x", RunMode::Siamese);
    cfg.loss = Some(trainer::LossKind::CrossEntropy);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small("x", RunMode::Transfer);
    cfg.loss = Some(trainer::LossKind::Triplet);
    assert!(cfg.validate().is_err());
    cfg.loss = None;
    assert!(cfg.validate().is_ok());
}

#[test]
fn config_validation_rejects_bad_values() {
    let base = small("x", RunMode::Siamese);
    let cases: Vec<Box<dyn Fn(&mut RunConfig)>> = vec![
        Box::new(|c| c.lr0 = Some(0.0)),
        Box::new(|c| c.lr0 = Some(-1.0)),
        Box::new(|c| c.name = "../escape".into()),
        Box::new(|c| c.siamese.miner = "hardest".into()),
        Box::new(|c| c.siamese.objective = "contrastive".into()),
        Box::new(|c| c.epochs_max = 0),
        Box::new(|c| c.early_stop.patience_epochs = 0),
        Box::new(|c| c.scheduler = Some(SchedulerSpec { kind: "cosine".into(), ..SchedulerSpec::step() })),
        Box::new(|c| c.backbone.name = "vgg16".into()),
    ];
    for (i, f) in cases.iter().enumerate() {
        let mut c = base.clone();
        f(&mut c);
        assert!(c.validate().is_err(), "case {i}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn mode_defaults_resolve() {
    let c = RunConfig::new("c", BackboneSpec::new("resnet50", true), RunMode::Transfer);
    assert_eq!(c.lr0(), 0.01);
    assert_eq!(c.scheduler().kind, "plateau_decay");
    assert_eq!(c.batch_size(), 32);
    let s = RunConfig::new("s", BackboneSpec::new("resnet50", true), RunMode::Siamese);
    assert_eq!(s.lr0(), 0.005);
    assert_eq!(s.scheduler().kind, "step_decay");
    assert_eq!(s.batch_size(), 32);
    assert_eq!(s.epochs_max, 50);
}

#[test]
fn config_toml_roundtrip_and_hash() {
    let c = small("run-a", RunMode::Siamese);
    let text = c.to_toml().unwrap();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, c);
    // Spelling out a default does not change the hash.
    let explicit = c.resolved();
    assert_eq!(explicit.config_hash().unwrap(), c.config_hash().unwrap());
    let mut other = c.clone();
    other.seed = 1;
    assert_ne!(other.config_hash().unwrap(), c.config_hash().unwrap());
    assert!(RunConfig::from_toml(&format!("{text}\nbogus = 1\n")).is_err());
}

#[test]
fn classifier_run_artifacts_replay_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, 8);
    let run = dir.path().join("runs/a");
    let cfg = small("a", RunMode::Transfer);
    let out = trainer::train(&cfg, &m, &run, &TrainOptions::default()).unwrap();
    assert!(!out.reused);

    for f in ["config.toml", "metrics.csv", "ckpt_best.safetensors", "ckpt_last.safetensors", "best.json", "run.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = trainer::read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.len(), 3);
    assert_eq!(metrics, out.metrics);
    let replay = trainer::replay_lr(&cfg.scheduler(), cfg.lr0(), &metrics).unwrap();
    assert_eq!(replay, metrics.iter().map(|m| m.lr).collect::<Vec<_>>());
    let max_val = metrics.iter().map(|m| m.val_acc).fold(0.0, f64::max);
    assert_eq!(out.summary.best.val_acc, max_val);
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("best.json")).unwrap()).unwrap();
    assert_eq!(best["val_acc"].as_f64().unwrap(), max_val);

    // Frozen backbone survives the run bit for bit.
    let (_, _, last) = trainer::load_run_model(&run, trainer::CKPT_LAST, &candle_core::Device::Cpu).unwrap();
    let fresh = catreid_core::modelzoo::build_classifier(
        &cfg.backbone,
        3,
        catreid_core::modelzoo::TrainMode::Transfer,
        &Default::default(),
    )
    .unwrap();
    let (a, b) = (last.snapshot().unwrap(), fresh.snapshot().unwrap());
    for (k, v) in &a {
        if k.starts_with("backbone.") {
            assert_eq!(v, &b[k], "{k}");
        }
    }
    assert_ne!(a["head.weight"], b["head.weight"]);

    // Identical rerun is a no-op; a changed config refuses to clobber.
    let again = trainer::train(&cfg, &m, &run, &TrainOptions::default()).unwrap();
    assert!(again.reused);
    let mut changed = cfg.clone();
    changed.lr0 = Some(0.001);
    let err = trainer::train(&changed, &m, &run, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::RunConflict { .. }), "{err}");
    let opts = TrainOptions { overwrite: true, ..Default::default() };
    let replaced = trainer::train(&changed, &m, &run, &opts).unwrap();
    assert!(!replaced.reused);
    assert_eq!(replaced.metrics[0].lr, 0.001);
}

#[test]
fn identical_runs_produce_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, 8);
    let mut cfg = small("d", RunMode::Transfer);
    // Augmentation on: exercises the seeded per-sample streams.
    cfg.augment = AugmentConfig::default();
    cfg.epochs_max = 2;
    let a = trainer::train(&cfg, &m, &dir.path().join("a"), &Default::default()).unwrap();
    let b = trainer::train(&cfg, &m, &dir.path().join("b"), &Default::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(
        fs::read(dir.path().join("a/metrics.csv")).unwrap(),
        fs::read(dir.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn early_stopping_ends_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, 8);
    let mut cfg = small("e", RunMode::Transfer);
    cfg.epochs_max = 20;
    cfg.early_stop.patience_epochs = 2;
    // No gain can exceed a full unit of accuracy.
    cfg.early_stop.min_delta = 1.0;
    let out = trainer::train(&cfg, &m, &dir.path().join("e"), &Default::default()).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert!(out.summary.stopped_early);
}

#[test]
fn siamese_run_writes_gallery() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, 8);
    let run = dir.path().join("s");
    let cfg = small("s", RunMode::Siamese);
    let out = trainer::train_siamese(&cfg, &m, &run, &Default::default()).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert_eq!(out.metrics[0].lr, 0.005);
    let g = EmbeddingGallery::load(&run.join("gallery.bin")).unwrap();
    assert_eq!(g.class_ids, m.class_ids());
    assert_eq!(g.embed_dim, 16);
    assert!(out.metrics.iter().all(|e| (0.0..=1.0).contains(&e.train_acc)));
    // The wrong entry point is refused.
    assert!(trainer::train_classifier(&cfg, &m, &dir.path().join("t"), &Default::default()).is_err());
}

#[test]
fn finetune_moves_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2, 8);
    let run = dir.path().join("f");
    let mut cfg = small("f", RunMode::Finetune);
    cfg.epochs_max = 1;
    let out = trainer::train(&cfg, &m, &run, &Default::default()).unwrap();
    assert_eq!(out.summary.params.frozen_params, 0);
    let (_, _, model) = trainer::load_run_model(&run, trainer::CKPT_LAST, &candle_core::Device::Cpu).unwrap();
    let fresh = catreid_core::modelzoo::build_classifier(
        &cfg.backbone,
        2,
        catreid_core::modelzoo::TrainMode::Finetune,
        &Default::default(),
    )
    .unwrap();
    let (a, b) = (model.snapshot().unwrap(), fresh.snapshot().unwrap());
    assert!(a.iter().any(|(k, v)| k.starts_with("backbone.") && v != &b[k]));
}

#[test]
fn unsplit_manifest_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth::generate(&SynthConfig { size: 32, ..Default::default() }, &data).unwrap();
    let m = dataset::ingest(&data).unwrap();
    let err = trainer::train(&small("u", RunMode::Transfer), &m, &dir.path().join("u"), &Default::default()).unwrap_err();
    assert!(matches!(err, Error::StageOrder(_)));
}

#[test]
fn non_finite_loss_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3, 8);
    let mut cfg = small("n", RunMode::Transfer);
    // One AdamW step moves every head weight by about lr0, so the second
    // batch sees overflowing logits.
    cfg.lr0 = Some(1e38);
    let err = trainer::train(&cfg, &m, &dir.path().join("n"), &Default::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("epoch 1 batch 1"), "{err}");
    assert!(!dir.path().join("n/run.json").exists());
}
