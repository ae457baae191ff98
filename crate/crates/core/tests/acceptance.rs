//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! ```text
//! cargo test -p catreid-core --test acceptance
//! cargo test -p catreid-core --test acceptance -- 4 8    # selected criteria
//! CATREID_FULL_SCALE=1 cargo test -p catreid-core --test acceptance --release
//! ```
//!
//! Criterion 10 replays the full-scale recipe in `configs/full_scale.toml`
//! on the real photo collection. It needs the data, the ImageNet weights and
//! accelerator-class compute, so it only runs when `CATREID_FULL_SCALE=1` is
//! set; otherwise it prints SKIP and does not count toward the verdict.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use catreid_core::augment::AugmentConfig;
use catreid_core::dataset::{self, BBox, DatasetManifest, ImageRecord, Split};
use catreid_core::evaluator::{self, EvalReport, ReportEntry};
use catreid_core::metriclearn::{self, EmbeddingGallery, Triplet, TripletObjective};
use catreid_core::modelzoo::{self, BackboneSpec, BuildOptions, TrainMode, BACKBONES};
use catreid_core::preprocess::{self, DetectorRegistry, PreprocessOptions};
use catreid_core::rng;
use catreid_core::synth::{self, SynthConfig};
use catreid_core::trainer::{self, build_scheduler, EpochMetrics, RunConfig, RunMode, SchedulerSpec};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Every threshold the harness applies, in one place.
mod tol {
    use std::time::Duration;

    // 1: reported split of the 466-cat, 11076-image collection.
    pub const CLASSES: usize = 466;
    pub const IMAGES: usize = 11076;
    pub const VAL: usize = 1398;
    pub const TEST: usize = 932;
    pub const TRAIN: usize = 8746;
    pub const SPLIT_BUDGET: Duration = Duration::from_secs(5);

    // 2: f32 results against an f64 oracle, relative to max(1, |oracle|).
    pub const TRIPLES: usize = 1000;
    pub const DIM: usize = 512;
    pub const LOSS_REL: f64 = 1e-6;
    /// Max-norm gradient error relative to the max-norm of the oracle
    /// gradient. The loss is quadratic where the hinge is active, so the
    /// central difference is exact up to rounding.
    pub const GRAD_REL: f64 = 1e-4;
    pub const FD_STEP: f64 = 1e-3;
    pub const GRAD_TRIPLES: usize = 25;
    pub const TRIPLET_BUDGET: Duration = Duration::from_secs(30);

    // 3
    pub const GALLERIES: usize = 100;
    pub const QUERIES: usize = 100;
    pub const MAX_CLASSES: usize = 50;
    pub const MAX_DIM: usize = 64;
    pub const KNN_BUDGET: Duration = Duration::from_secs(30);

    // 4
    pub const FREEZE_STEPS: usize = 3;
    pub const FREEZE_BATCH: usize = 2;
    pub const FREEZE_INPUT: usize = 224;
    pub const FREEZE_BUDGET: Duration = Duration::from_secs(300);

    // 5: black-pixel count may differ from the analytic padded area by one
    // output row or column per padded edge.
    pub const GEOMETRY_CASES: usize = 200;
    pub const OUT: u32 = 224;
    pub const CENTER_PX: f64 = 0.5;
    pub const GEOMETRY_BUDGET: Duration = Duration::from_secs(60);

    // 6
    pub const PLATEAU_EPOCHS: usize = 6;
    pub const STEP_EPOCH: usize = 21;
    pub const SCHEDULER_BUDGET: Duration = Duration::from_secs(1);

    // 7
    pub const OVERFIT_CLASSES: usize = 5;
    pub const OVERFIT_PER_CLASS: usize = 20;
    pub const TRANSFER_EPOCHS: usize = 30;
    pub const TRANSFER_TRAIN_ACC: f64 = 0.95;
    pub const SIAMESE_EPOCHS: usize = 20;
    pub const SIAMESE_VAL_ACC: f64 = 0.90;
    pub const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

    // 8
    pub const LOSS_CLASSES: usize = 466;
    pub const LOSS_BAND: f64 = 0.5;
    pub const LOSS_BATCH: usize = 4;
    pub const LOSS_BUDGET: Duration = Duration::from_secs(60);
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = fn() -> Result<Verdict, String>;

fn main() {
    let criteria: [(u32, &str, Duration, Check); 9] = [
        (1, "split arithmetic", tol::SPLIT_BUDGET, split_arithmetic),
        (2, "triplet loss oracle", tol::TRIPLET_BUDGET, triplet_oracle),
        (3, "knn equivalence", tol::KNN_BUDGET, knn_equivalence),
        (4, "freeze semantics", tol::FREEZE_BUDGET, freeze_semantics),
        (5, "preprocessing geometry", tol::GEOMETRY_BUDGET, preprocessing_geometry),
        (6, "scheduler replay", tol::SCHEDULER_BUDGET, scheduler_replay),
        (7, "overfit smoke training", tol::OVERFIT_BUDGET, overfit_smoke),
        (8, "first-batch loss", tol::LOSS_BUDGET, first_batch_loss),
        (9, "grid reproduction", Duration::from_secs(5), grid_reproduction),
    ];
    // Numeric arguments select criteria: `-- 2 8`.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, budget, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let elapsed = t.elapsed();
        let mut v = match outcome {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => verdict(false, format!("error: {e}")),
            Err(p) => verdict(false, format!("panic: {}", panic_text(&p))),
        };
        if elapsed > budget {
            v.pass = false;
            v.detail += &format!("; over the {budget:?} budget");
        }
        failed += usize::from(!v.pass);
        println!(
            "{} {id:>2} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
    }

    if !only.is_empty() && !only.contains(&10) {
        // Not selected.
    } else if std::env::var("CATREID_FULL_SCALE").is_ok_and(|v| v == "1") {
        let t = Instant::now();
        let v = full_scale().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        failed += usize::from(!v.pass);
        println!(
            "{} 10 full-scale recipe: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    } else {
        println!("SKIP 10 full-scale recipe: set CATREID_FULL_SCALE=1 to run configs/full_scale.toml");
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

// ---------------------------------------------------------------- 1

fn split_arithmetic() -> Result<Verdict, String> {
    let counts = SynthConfig {
        classes: tol::CLASSES,
        total: Some(tol::IMAGES),
        ..Default::default()
    }
    .counts();
    let records = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| (0..n).map(move |i| ImageRecord::new(format!("/cats/{c:03}/{i:03}.png"), format!("{c:03}"))))
        .collect();
    let m = DatasetManifest::from_records(records);
    let m = dataset::filter_small_classes(&m, dataset::DEFAULT_MIN_IMAGES).map_err(e)?;
    let s = dataset::split(&m, dataset::DEFAULT_VAL_PER_CLASS, dataset::DEFAULT_TEST_PER_CLASS, 0).map_err(e)?;
    let got = (s.num_classes(), s.count(Split::Val), s.count(Split::Test), s.count(Split::Train));
    let want = (tol::CLASSES, tol::VAL, tol::TEST, tol::TRAIN);
    Ok(verdict(
        got == want,
        format!("classes/val/test/train {got:?}, expected {want:?}"),
    ))
}

// ---------------------------------------------------------------- 2

/// Brute-force hinged triplet loss in f64.
fn oracle_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let mut ap = 0.0;
    let mut an = 0.0;
    for i in 0..a.len() {
        ap += (a[i] - p[i]) * (a[i] - p[i]);
        an += (a[i] - n[i]) * (a[i] - n[i]);
    }
    (ap - an + margin).max(0.0)
}

fn normal_vec(r: &mut rng::StreamRng, dim: usize, scale: f64) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            (z * scale) as f32
        })
        .collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn triplet_oracle() -> Result<Verdict, String> {
    let mut r = rng::stream(2, "acceptance-triplet");
    let unit = 1.0 / (tol::DIM as f64).sqrt();
    let margin = 1.0f32;
    let mut worst_loss: f64 = 0.0;
    let mut active = Vec::new();
    let mut inactive = Vec::new();
    for _ in 0..tol::TRIPLES {
        // Positive and negative sit at random spreads around the anchor, so
        // squared distances range over (0, 4) and both hinge states occur.
        let a = normal_vec(&mut r, tol::DIM, unit);
        let (sp, sn) = (r.random_range(0.1..2.0), r.random_range(0.1..2.0));
        let near = |r: &mut rng::StreamRng, s: f64| -> Vec<f32> {
            a.iter().zip(normal_vec(r, tol::DIM, unit * s)).map(|(x, d)| x + d).collect()
        };
        let (p, n) = (near(&mut r, sp), near(&mut r, sn));
        let got = metriclearn::triplet_loss(&a, &p, &n, margin).map_err(e)? as f64;
        let want = oracle_loss(&widen(&a), &widen(&p), &widen(&n), margin as f64);
        worst_loss = worst_loss.max((got - want).abs() / want.abs().max(1.0));
        // Keep clear of the kink so a finite-difference step cannot cross it.
        if want > 0.05 {
            active.push((a, p, n));
        } else if want == 0.0 {
            inactive.push((a, p, n));
        }
    }

    let objective: &dyn TripletObjective = &metriclearn::HingedTriplet;
    let dev = Device::Cpu;
    let grad = |a: &[f32], p: &[f32], n: &[f32]| -> Result<Vec<f64>, String> {
        let rows = [a, p, n].concat();
        let x = Var::from_vec(rows, (3, tol::DIM), &dev).map_err(e)?;
        let t = Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        };
        let loss = objective.batch_loss(x.as_tensor(), &[t], margin as f64).map_err(e)?;
        let g = loss.backward().map_err(e)?;
        let g = g.get(x.as_tensor()).ok_or("no gradient for embeddings")?;
        Ok(g.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(e)?.iter().map(|&v| v as f64).collect())
    };
    let mut worst_grad: f64 = 0.0;
    for (a, p, n) in active.iter().take(tol::GRAD_TRIPLES) {
        let got = grad(a, p, n)?;
        let mut x = [widen(a), widen(p), widen(n)].concat();
        let d = tol::DIM;
        let mut fd = vec![0.0; x.len()];
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + tol::FD_STEP;
            let up = oracle_loss(&x[..d], &x[d..2 * d], &x[2 * d..], margin as f64);
            x[i] = orig - tol::FD_STEP;
            let down = oracle_loss(&x[..d], &x[d..2 * d], &x[2 * d..], margin as f64);
            x[i] = orig;
            fd[i] = (up - down) / (2.0 * tol::FD_STEP);
        }
        let err = got.iter().zip(&fd).map(|(g, f)| (g - f).abs()).fold(0.0, f64::max);
        let norm = fd.iter().map(|f| f.abs()).fold(0.0, f64::max);
        worst_grad = worst_grad.max(err / norm);
    }
    // Inactive hinges pass no gradient at all.
    let mut inactive_nonzero = 0;
    for (a, p, n) in inactive.iter().take(tol::GRAD_TRIPLES) {
        inactive_nonzero += grad(a, p, n)?.iter().filter(|g| **g != 0.0).count();
    }

    let checked = active.len().min(tol::GRAD_TRIPLES);
    let pass = worst_loss <= tol::LOSS_REL
        && worst_grad <= tol::GRAD_REL
        && checked == tol::GRAD_TRIPLES
        && !inactive.is_empty()
        && inactive_nonzero == 0;
    Ok(verdict(
        pass,
        format!(
            "{} triples, max loss rel err {worst_loss:.2e} (tol {:.0e}); {checked} active triples, max grad rel err {worst_grad:.2e} (tol {:.0e}); {} inactive, {inactive_nonzero} nonzero grads",
            tol::TRIPLES,
            tol::LOSS_REL,
            tol::GRAD_REL,
            inactive.len().min(tol::GRAD_TRIPLES)
        ),
    ))
}

// ---------------------------------------------------------------- 3

/// Exhaustive nearest row in f64; equal distances keep the lower class.
fn oracle_nearest(rows: &[Vec<f32>], q: &[f32]) -> (usize, bool) {
    let d: Vec<f64> = rows
        .iter()
        .map(|row| row.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
        .collect();
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let first = d.iter().position(|&v| v == min).expect("non-empty");
    let tied = d.iter().filter(|&&v| v == min).count() > 1;
    (first, tied)
}

fn knn_equivalence() -> Result<Verdict, String> {
    let mut r = rng::stream(3, "acceptance-knn");
    let (mut mismatches, mut ties, mut total) = (0, 0, 0);
    for g in 0..tol::GALLERIES {
        let c = r.random_range(2..=tol::MAX_CLASSES);
        let n = r.random_range(1..=tol::MAX_DIM);
        // Every third gallery uses small integer coordinates, where exact
        // distance ties are common; every gallery also duplicates a row.
        let integer = g % 3 == 0;
        let draw = |r: &mut rng::StreamRng| -> f32 {
            if integer {
                r.random_range(-1i32..=1) as f32
            } else {
                r.random_range(-1.0f32..1.0)
            }
        };
        let mut rows: Vec<Vec<f32>> = (0..c).map(|_| (0..n).map(|_| draw(&mut r)).collect()).collect();
        let (lo, hi) = (r.random_range(0..c - 1), c - 1);
        rows[hi] = rows[lo].clone();
        let gallery =
            EmbeddingGallery::from_rows((0..c).map(|i| format!("cat{i:02}")).collect(), rows.clone()).map_err(e)?;
        for qi in 0..tol::QUERIES {
            let q: Vec<f32> = match qi % 4 {
                // Exactly on the duplicated row.
                0 => rows[hi].clone(),
                // Equidistant from two rows: their midpoint.
                1 if integer => {
                    let (i, j) = (r.random_range(0..c), r.random_range(0..c));
                    rows[i].iter().zip(&rows[j]).map(|(a, b)| (a + b) / 2.0).collect()
                }
                _ => (0..n).map(|_| draw(&mut r) * 1.5).collect(),
            };
            let (want, tied) = oracle_nearest(&rows, &q);
            let got = gallery.classify(&q, 1).map_err(e)?;
            total += 1;
            ties += usize::from(tied);
            mismatches += usize::from(got != want);
        }
    }
    Ok(verdict(
        mismatches == 0 && ties > 0,
        format!("{total} queries over {} galleries, {ties} with tied minima, {mismatches} disagreements", tol::GALLERIES),
    ))
}

// ---------------------------------------------------------------- 4

fn dummy_batch(seed: u64) -> Result<(Tensor, Vec<usize>), String> {
    let s = tol::FREEZE_INPUT;
    let mut r = rng::stream(seed, "acceptance-dummy");
    let data: Vec<f32> = (0..tol::FREEZE_BATCH * 3 * s * s).map(|_| r.random_range(-2.0f32..2.0)).collect();
    let x = Tensor::from_vec(data, (tol::FREEZE_BATCH, 3, s, s), &Device::Cpu).map_err(e)?;
    Ok((x, (0..tol::FREEZE_BATCH).map(|i| i % 2).collect()))
}

/// Names whose values differ between two snapshots.
fn changed(before: &std::collections::BTreeMap<String, Vec<f32>>, after: &std::collections::BTreeMap<String, Vec<f32>>) -> Vec<String> {
    before
        .iter()
        .filter(|(k, v)| after.get(*k).is_none_or(|w| w.iter().zip(v.iter()).any(|(a, b)| a.to_bits() != b.to_bits())))
        .map(|(k, _)| k.clone())
        .collect()
}

fn freeze_semantics() -> Result<Verdict, String> {
    let (x, y) = dummy_batch(4)?;
    let mut notes = Vec::new();
    let mut pass = true;
    for (name, _) in BACKBONES {
        for mode in [TrainMode::Transfer, TrainMode::Finetune] {
            let model = modelzoo::build_classifier(&BackboneSpec::new(name, false), 2, mode, &BuildOptions::default())
                .map_err(e)?;
            let before = model.snapshot().map_err(e)?;
            let frozen = model.frozen_names();
            let mut opt = AdamW::new(model.trainable_vars(), ParamsAdamW { lr: 1e-3, ..Default::default() }).map_err(e)?;
            for _ in 0..tol::FREEZE_STEPS {
                let logits = model.forward_t(&x, true).map_err(e)?;
                let (loss, _) = trainer::cross_entropy_and_correct(&logits, &y).map_err(e)?;
                opt.backward_step(&loss).map_err(e)?;
            }
            let moved = changed(&before, &model.snapshot().map_err(e)?);
            let head_moved = moved.iter().any(|k| k.starts_with("head."));
            let backbone_moved = moved.iter().any(|k| k.starts_with("backbone.") && !modelzoo::is_buffer(k));
            let ok = match mode {
                TrainMode::Transfer => {
                    let touched: Vec<&String> = moved.iter().filter(|k| frozen.contains(k)).collect();
                    if !touched.is_empty() {
                        notes.push(format!("{name} transfer changed {} frozen tensors, e.g. {}", touched.len(), touched[0]));
                    }
                    touched.is_empty() && head_moved && !frozen.is_empty()
                }
                TrainMode::Finetune => head_moved && backbone_moved,
            };
            if !ok {
                notes.push(format!("{name} {mode:?}: head moved {head_moved}, backbone moved {backbone_moved}"));
            }
            pass &= ok;
        }
    }
    let detail = if notes.is_empty() {
        format!(
            "{} backbones x {{transfer, finetune}}, {} AdamW steps: frozen tensors bitwise unchanged, head and finetuned backbones moved",
            BACKBONES.len(),
            tol::FREEZE_STEPS
        )
    } else {
        notes.join("; ")
    };
    Ok(verdict(pass, detail))
}

// ---------------------------------------------------------------- 5

fn preprocessing_geometry() -> Result<Verdict, String> {
    let mut r = rng::stream(5, "acceptance-geometry");
    let out = tol::OUT;
    let (mut bad_dims, mut bad_center, mut bad_pad, mut padded_cases) = (0, 0, 0, 0);
    let mut worst_pad_excess: f64 = 0.0;
    for _ in 0..tol::GEOMETRY_CASES {
        let (w, h) = (r.random_range(16u32..=400), r.random_range(16u32..=400));
        // No source pixel is black, so every black output pixel is padding.
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([r.random_range(30u8..=255), r.random_range(30..=255), r.random_range(30..=255)]));
        let (cx, cy) = (r.random_range(0.0..w as f64), r.random_range(0.0..h as f64));
        let (bw, bh) = (r.random_range(2.0..1.3 * w as f64), r.random_range(2.0..1.3 * h as f64));
        let bbox = BBox::new(cx - bw / 2.0, cy - bh / 2.0, bw, bh);
        let spec = preprocess::square_bbox(&bbox, (w, h));
        let crop = preprocess::crop_and_resize(&img, &spec, out).map_err(e)?;

        bad_dims += usize::from(crop.dimensions() != (out, out) || crop.as_raw().len() != (out * out * 3) as usize);
        let (sx, sy) = spec.center();
        bad_center += usize::from((sx - cx).abs() > tol::CENTER_PX || (sy - cy).abs() > tol::CENTER_PX);

        // Analytic padded area of the window, mapped to output pixels.
        let side = spec.side as f64;
        let vis_x = ((spec.x + spec.side as i64).min(w as i64) - spec.x.max(0)).max(0) as f64;
        let vis_y = ((spec.y + spec.side as i64).min(h as i64) - spec.y.max(0)).max(0) as f64;
        let analytic = (out as f64).powi(2) * (1.0 - vis_x * vis_y / (side * side));
        let black = crop.pixels().filter(|p| p.0 == [0, 0, 0]).count() as f64;
        let pad = spec.padding();
        let edges = [pad.left, pad.top, pad.right, pad.bottom].iter().filter(|&&v| v > 0).count();
        padded_cases += usize::from(edges > 0);
        let allowed = out as f64 * edges as f64;
        let diff = (black - analytic).abs();
        worst_pad_excess = worst_pad_excess.max(diff - allowed);
        bad_pad += usize::from(diff > allowed);
    }
    Ok(verdict(
        bad_dims + bad_center + bad_pad == 0 && padded_cases > 0,
        format!(
            "{} cases ({padded_cases} padded): {bad_dims} wrong shapes, {bad_center} centers off by > {} px, {bad_pad} pad counts off by more than one row/column per padded edge",
            tol::GEOMETRY_CASES,
            tol::CENTER_PX
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn flat_epoch(epoch: usize, lr: f64) -> EpochMetrics {
    EpochMetrics {
        epoch,
        lr,
        train_loss: 1.0,
        train_acc: 0.5,
        val_loss: 1.0,
        val_acc: 0.5,
    }
}

fn scheduler_replay() -> Result<Verdict, String> {
    let lr0 = 0.01;
    let mut plateau = build_scheduler(&SchedulerSpec::plateau(), lr0).map_err(e)?;
    let mut halvings = 0;
    for epoch in 1..=tol::PLATEAU_EPOCHS {
        let before = plateau.lr();
        let after = plateau.step(&flat_epoch(epoch, before));
        if after < before {
            halvings += 1;
            if after != before * 0.5 {
                return Ok(verdict(false, format!("plateau went {before} -> {after}")));
            }
        }
    }

    // Independent closed form for the step schedule.
    let mut step = build_scheduler(&SchedulerSpec::step(), lr0).map_err(e)?;
    let mut step_ok = true;
    let mut at_target = f64::NAN;
    for epoch in 1..=30usize {
        let want = lr0 * 0.5f64.powi(((epoch - 1) / 10) as i32);
        let got = step.lr();
        step_ok &= got == want;
        if epoch == tol::STEP_EPOCH {
            at_target = got;
        }
        step.step(&flat_epoch(epoch, got));
    }
    step_ok &= at_target == lr0 * 0.25;
    Ok(verdict(
        halvings == 1 && step_ok,
        format!(
            "plateau(5, 0.5) over {} flat epochs: {halvings} halving(s); step(10, 0.5) lr at epoch {} = {at_target} (lr0 {lr0})",
            tol::PLATEAU_EPOCHS,
            tol::STEP_EPOCH
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn synthetic_split(dir: &Path) -> Result<DatasetManifest, String> {
    let cfg = SynthConfig {
        classes: tol::OVERFIT_CLASSES,
        per_class: tol::OVERFIT_PER_CLASS,
        ..Default::default()
    };
    let root = dir.join("data");
    synth::generate(&cfg, &root).map_err(e)?;
    let m = dataset::filter_small_classes(&dataset::ingest(&root).map_err(e)?, dataset::DEFAULT_MIN_IMAGES).map_err(e)?;
    dataset::split(&m, dataset::DEFAULT_VAL_PER_CLASS, dataset::DEFAULT_TEST_PER_CLASS, 0).map_err(e)
}

/// Offline: random-init backbone, augmentation off so the frozen features
/// can be cached.
fn smoke_config(name: &str, mode: RunMode, epochs: usize) -> RunConfig {
    let mut c = RunConfig::new(name, BackboneSpec::new("densenet121", false), mode);
    c.epochs_max = epochs;
    c.augment = AugmentConfig::disabled();
    c.early_stop.enabled = false;
    c.siamese.classes_per_batch = tol::OVERFIT_CLASSES;
    c.siamese.samples_per_class = 4;
    c
}

fn overfit_smoke() -> Result<Verdict, String> {
    let dir = tempfile::tempdir().map_err(e)?;
    let m = synthetic_split(dir.path())?;

    let cfg = smoke_config("transfer", RunMode::Transfer, tol::TRANSFER_EPOCHS);
    let t = trainer::train(&cfg, &m, &dir.path().join("transfer"), &Default::default()).map_err(e)?;
    let reached = t.metrics.iter().find(|m| m.train_acc >= tol::TRANSFER_TRAIN_ACC).map(|m| m.epoch);
    let best_train = t.metrics.iter().map(|m| m.train_acc).fold(0.0, f64::max);

    let cfg = smoke_config("siamese", RunMode::Siamese, tol::SIAMESE_EPOCHS);
    let s = trainer::train(&cfg, &m, &dir.path().join("siamese"), &Default::default()).map_err(e)?;
    let s_reached = s.metrics.iter().find(|m| m.val_acc >= tol::SIAMESE_VAL_ACC).map(|m| m.epoch);
    let best_val = s.metrics.iter().map(|m| m.val_acc).fold(0.0, f64::max);

    let at = |e: Option<usize>| e.map_or("never".to_string(), |e| format!("epoch {e}"));
    Ok(verdict(
        reached.is_some() && s_reached.is_some(),
        format!(
            "transfer DenseNet-121 train acc {best_train:.3} (>= {} at {}); siamese val acc {best_val:.3} (>= {} at {})",
            tol::TRANSFER_TRAIN_ACC,
            at(reached),
            tol::SIAMESE_VAL_ACC,
            at(s_reached)
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn first_batch_loss() -> Result<Verdict, String> {
    let expected = (tol::LOSS_CLASSES as f64).ln();
    let mut r = rng::stream(8, "acceptance-first-batch");
    let s = tol::FREEZE_INPUT;
    // Uniform pixels under the usual per-channel normalization.
    let data: Vec<f32> = (0..tol::LOSS_BATCH * 3 * s * s)
        .map(|_| (r.random_range(0.0f32..1.0) - 0.45) / 0.226)
        .collect();
    let x = Tensor::from_vec(data, (tol::LOSS_BATCH, 3, s, s), &Device::Cpu).map_err(e)?;
    let y: Vec<usize> = (0..tol::LOSS_BATCH).map(|_| r.random_range(0..tol::LOSS_CLASSES)).collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, _) in BACKBONES {
        let model = modelzoo::build_classifier(
            &BackboneSpec::new(name, false),
            tol::LOSS_CLASSES,
            TrainMode::Transfer,
            &BuildOptions::default(),
        )
        .map_err(e)?;
        let loss = trainer::initial_loss(&model, &x, &y).map_err(e)?;
        pass &= (loss - expected).abs() <= tol::LOSS_BAND;
        parts.push(format!("{name} {loss:.3}"));
    }
    Ok(verdict(
        pass,
        format!("ln({}) = {expected:.3} +/- {}: {}", tol::LOSS_CLASSES, tol::LOSS_BAND, parts.join(", ")),
    ))
}

// ---------------------------------------------------------------- 9

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn grid_reproduction() -> Result<Verdict, String> {
    let mut rdr = csv::Reader::from_path(fixture("reference_runs.csv")).map_err(e)?;
    let entries: Vec<ReportEntry> = rdr.deserialize().collect::<Result<_, _>>().map_err(e)?;
    let report = evaluator::render_report(&entries).map_err(e)?;
    let want: Vec<Vec<String>> = std::fs::read_to_string(fixture("reference_grid.tsv"))
        .map_err(e)?
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    let got = report.grid();
    let cells = want.iter().map(Vec::len).sum::<usize>();
    let mut diffs = Vec::new();
    for (i, row) in want.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let g = got.get(i).and_then(|r| r.get(j));
            if g != Some(cell) {
                diffs.push(format!("row {i} col {j}: {g:?} != {cell:?}"));
            }
        }
    }
    let shape_ok = got.len() == want.len() && got.iter().zip(&want).all(|(a, b)| a.len() == b.len());
    // The CSV form must carry the same grid.
    let csv_ok = EvalReport::parse_csv(&report.to_csv()).map_err(e)? == report;
    Ok(verdict(
        diffs.is_empty() && shape_ok && csv_ok,
        if diffs.is_empty() {
            format!("{} rows, {cells} cells identical, csv round-trip {csv_ok}", want.len())
        } else {
            diffs.join("; ")
        },
    ))
}

// ---------------------------------------------------------------- 10

#[derive(serde::Deserialize)]
struct Recipe {
    paths: RecipePaths,
    #[serde(default)]
    preprocess: RecipePreprocess,
    runs: Vec<RunConfig>,
}

#[derive(serde::Deserialize)]
struct RecipePaths {
    data_root: PathBuf,
    work_dir: PathBuf,
}

#[derive(serde::Deserialize, Default)]
struct RecipePreprocess {
    detector: Option<String>,
}

/// Ingest, crop, split, train, evaluate and tabulate every run of the
/// recipe. Run dirs are reused, so an interrupted replay resumes.
fn full_scale() -> Result<Verdict, String> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let path = configs.join("full_scale.toml");
    let recipe: Recipe = toml::from_str(&std::fs::read_to_string(&path).map_err(e)?).map_err(e)?;
    let expected: Vec<(String, RunMode, Option<f64>)> = BACKBONES
        .iter()
        .flat_map(|(b, _)| [RunMode::Finetune, RunMode::Transfer].map(|m| (b.to_string(), m, None)))
        .chain(trainer::SIAMESE_LR0.map(|lr| ("densenet121".to_string(), RunMode::Siamese, Some(lr))))
        .collect();
    for (b, mode, lr) in &expected {
        let found = recipe.runs.iter().any(|r| {
            r.backbone.name == *b && r.mode == *mode && lr.is_none_or(|lr| r.lr0() == lr) && r.backbone.pretrained
        });
        if !found {
            return Ok(verdict(false, format!("recipe lacks a pretrained {b} {mode} run")));
        }
    }
    for r in &recipe.runs {
        r.validate().map_err(e)?;
    }

    let root = configs.join(&recipe.paths.data_root);
    let work = configs.join(&recipe.paths.work_dir);
    let m = dataset::filter_small_classes(&dataset::ingest(&root).map_err(e)?, dataset::DEFAULT_MIN_IMAGES).map_err(e)?;
    let spec = std::env::var("CATREID_DETECTOR")
        .ok()
        .or(recipe.preprocess.detector)
        .unwrap_or_else(|| "full-frame".into());
    let detector = DetectorRegistry::default().build(&spec).map_err(e)?;
    let opts = PreprocessOptions {
        min_images: Some(dataset::DEFAULT_MIN_IMAGES),
        ..Default::default()
    };
    let (m, _) = preprocess::preprocess_manifest(&m, detector.as_ref(), &work.join("crops"), &opts).map_err(e)?;
    let m = dataset::split(&m, dataset::DEFAULT_VAL_PER_CLASS, dataset::DEFAULT_TEST_PER_CLASS, 0).map_err(e)?;
    let counts = (m.count(Split::Val), m.count(Split::Test), m.count(Split::Train));

    let mut dirs = Vec::new();
    for r in &recipe.runs {
        let dir = work.join("runs").join(&r.name);
        println!("     training {} ...", r.name);
        trainer::train(&r.resolved(), &m, &dir, &Default::default()).map_err(e)?;
        for s in [Split::Val, Split::Test] {
            evaluator::evaluate_run(&dir, &m, s, &Device::Cpu).map_err(e)?;
        }
        dirs.push(dir);
    }
    let report = evaluator::render_report(&evaluator::collect_runs(&dirs, false).map_err(e)?).map_err(e)?;
    print!("{}", report.to_markdown());
    let reference: HashMap<String, Vec<String>> = std::fs::read_to_string(fixture("reference_grid.tsv"))
        .map_err(e)?
        .lines()
        .map(|l| {
            let mut f = l.split('\t').map(str::to_string);
            (f.next().unwrap_or_default(), f.collect())
        })
        .collect();
    for row in report.grid() {
        if let Some(r) = reference.get(&row[0]) {
            println!("     {:<18} ours {:?} reported {:?}", row[0], &row[1..], r);
        }
    }
    Ok(verdict(
        true,
        format!(
            "{} runs trained and evaluated; split val/test/train {counts:?}; accuracies are informational",
            recipe.runs.len()
        ),
    ))
}
