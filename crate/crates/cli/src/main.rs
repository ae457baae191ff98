//! `catreid`: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 user error, 2 environment error.

mod suite;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::Device;
use catreid_core::dataset::{self, Split, DEFAULT_MIN_IMAGES};
use catreid_core::evaluator;
use catreid_core::preprocess::{self, DetectorRegistry, PreprocessOptions};
use catreid_core::synth::{self, SynthConfig};
use catreid_core::trainer::{self, TrainOptions};
use catreid_core::{short_hash, Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::suite::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "catreid", version, about = "Individual cat re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a folder-per-cat image tree and drop undersized classes.
    Ingest(IngestArgs),
    /// Crop each image to the detected cat and drop unusable images.
    Preprocess(PreprocessArgs),
    /// Assign the seeded train/val/test split.
    Split(SplitArgs),
    /// Train one run of the suite.
    Train(TrainArgs),
    /// Score a trained run on one split.
    Eval(EvalArgs),
    /// Tabulate evaluated runs into the comparison grid.
    Report(ReportArgs),
    /// Draw a synthetic dataset for smoke tests.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct SuiteArg {
    /// Suite config; flags given on the command line take precedence.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
}

impl SuiteArg {
    fn load(&self) -> Result<Option<CliConfig>> {
        self.config.as_deref().map(CliConfig::load).transpose()
    }
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_images: Option<usize>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `full-frame`, `stub:<file>` or `cmd:<command line>`.
    #[arg(long)]
    detector: Option<String>,
    /// Directory for the crops.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the updated manifest; defaults to `--manifest`.
    #[arg(long)]
    manifest_out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    size: Option<u32>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Where to write the split manifest; defaults to `--manifest`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    suite: SuiteArg,
    /// Name of a `[[runs]]` entry.
    #[arg(long)]
    run: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory; defaults to `<work_dir>/runs/<name>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_size: Option<u32>,
    /// Replace a finished run whose config differs.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    suite: SuiteArg,
    /// Run directory, or a run name when `--config` is given.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    suite: SuiteArg,
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Directory for `report.md` and `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Combine runs even when their config or manifest hashes disagree.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    /// Spread this many images over the classes instead of `--per-class`.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    size: u32,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// A missing input path is the caller's mistake; other I/O failures are the
/// machine's.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        e if e.is_environment() => 2,
        _ => 1,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    }
}

/// First line of every command's output.
fn announce(seed: Option<u64>, params: &impl Serialize) -> Result<()> {
    let text = toml::to_string(params).map_err(|e| Error::Config(e.to_string()))?;
    let seed = seed.map_or("none".to_string(), |s| s.to_string());
    println!("seed={seed} config_hash={}", short_hash(text.as_bytes()));
    Ok(())
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("{flag} is required without --config")))
}

fn classes(n: usize) -> String {
    if n == 1 {
        "1 class".into()
    } else {
        format!("{n} classes")
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let root = required(a.root.or_else(|| suite.as_ref().and_then(|s| s.paths.data_root.clone())), "--root")?;
    let out = required(a.out.or_else(|| suite.as_ref().map(|s| s.manifest_path())), "--out")?;
    let min_images = a
        .min_images
        .or_else(|| suite.as_ref().map(|s| s.dataset.min_images))
        .unwrap_or(DEFAULT_MIN_IMAGES);

    #[derive(Serialize)]
    struct Params<'a> {
        root: &'a Path,
        min_images: usize,
    }
    announce(None, &Params { root: &root, min_images })?;
    if !root.is_dir() {
        return Err(Error::io(
            &root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root is not a directory"),
        ));
    }
    let m = dataset::filter_small_classes(&dataset::ingest(&root)?, min_images)?;
    dataset::save_manifest(&m, &out)?;

    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &m.records {
        *per_class.entry(&r.class_id).or_default() += usize::from(!r.is_excluded());
    }
    let dropped = per_class.values().filter(|&&n| n == 0).count();
    let images = m.records.iter().filter(|r| !r.is_excluded()).count();
    let mut line = format!("{}, {images} images", classes(m.num_classes()));
    if dropped > 0 {
        line += &format!("; {} excluded (fewer than {min_images} images)", classes(dropped));
    }
    let unreadable = dataset::unreadable_paths(&m).len();
    if unreadable > 0 {
        line += &format!("; {unreadable} unreadable files skipped");
    }
    println!("{line}");
    println!("manifest {} ({})", out.display(), m.content_hash());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let params = suite.as_ref().map(|s| s.preprocess.clone()).unwrap_or_default();
    let manifest = required(a.manifest.or_else(|| suite.as_ref().map(|s| s.manifest_path())), "--manifest")?;
    let out = required(a.out.or_else(|| suite.as_ref().map(|s| s.crops_dir())), "--out")?;
    let manifest_out = a.manifest_out.unwrap_or_else(|| manifest.clone());
    let opts = PreprocessOptions {
        conf_threshold: a.threshold.unwrap_or(params.threshold),
        out_size: a.size.unwrap_or(params.out_size),
        target_label: params.target_label.clone(),
        min_images: Some(suite.as_ref().map_or(DEFAULT_MIN_IMAGES, |s| s.dataset.min_images)),
    };
    let detector_spec = a.detector.unwrap_or(params.detector);

    #[derive(Serialize)]
    struct Params<'a> {
        detector: &'a str,
        threshold: f32,
        out_size: u32,
        target_label: &'a str,
    }
    announce(
        None,
        &Params {
            detector: &detector_spec,
            threshold: opts.conf_threshold,
            out_size: opts.out_size,
            target_label: &opts.target_label,
        },
    )?;
    let m = dataset::load_manifest(&manifest)?;
    let detector = DetectorRegistry::default().build(&detector_spec)?;
    let (out_m, summary) = preprocess::preprocess_manifest(&m, detector.as_ref(), &out, &opts)?;
    dataset::save_manifest(&out_m, &manifest_out)?;
    let excluded: Vec<String> = summary.excluded.iter().map(|(r, n)| format!("{r} {n}")).collect();
    println!(
        "{} crops written, {} unchanged, excluded: {}",
        summary.written,
        summary.unchanged,
        if excluded.is_empty() { "none".to_string() } else { excluded.join(", ") }
    );
    println!(
        "{}, {} images retained",
        classes(out_m.num_classes()),
        out_m.records.iter().filter(|r| !r.is_excluded()).count()
    );
    println!("manifest {} ({})", manifest_out.display(), out_m.content_hash());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let params = suite.as_ref().map(|s| s.dataset.clone()).unwrap_or_default();
    let manifest = required(a.manifest.or_else(|| suite.as_ref().map(|s| s.manifest_path())), "--manifest")?;
    let out = a.out.unwrap_or_else(|| manifest.clone());
    let seed = a.seed.unwrap_or(params.seed);
    let (val, test) = (a.val.unwrap_or(params.val_per_class), a.test.unwrap_or(params.test_per_class));

    #[derive(Serialize)]
    struct Params {
        seed: u64,
        val_per_class: usize,
        test_per_class: usize,
    }
    announce(Some(seed), &Params { seed, val_per_class: val, test_per_class: test })?;
    let m = dataset::split(&dataset::load_manifest(&manifest)?, val, test, seed)?;
    dataset::save_manifest(&m, &out)?;
    println!(
        "{}: {} train, {} val, {} test",
        classes(m.num_classes()),
        m.count(Split::Train),
        m.count(Split::Val),
        m.count(Split::Test)
    );
    println!("manifest {} ({})", out.display(), m.content_hash());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let suite = required(a.suite.load()?, "--config")?;
    let mut cfg = suite.run(&a.run)?.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs_max = e;
    }
    if a.lr0.is_some() {
        cfg.lr0 = a.lr0;
    }
    if a.batch_size.is_some() {
        cfg.batch_size = a.batch_size;
    }
    if let Some(s) = a.input_size {
        cfg.input_size = s;
    }
    // Overrides may break invariants the suite file satisfied.
    cfg.validate()?;
    let resolved = cfg.resolved();
    println!("seed={} config_hash={}", cfg.seed, cfg.config_hash()?);

    let manifest = a.manifest.unwrap_or_else(|| suite.manifest_path());
    let m = dataset::load_manifest(&manifest)?;
    let run_dir = a.run_dir.unwrap_or_else(|| suite.run_dir(&cfg.name));
    let opts = TrainOptions {
        overwrite: a.overwrite,
        ..Default::default()
    };
    let out = trainer::train(&resolved, &m, &run_dir, &opts)?;
    let s = &out.summary;
    if out.reused {
        println!("run {} already complete with this config; nothing to do", run_dir.display());
    }
    println!(
        "{} {} on {}: {} epochs{}, best val_acc {:.4} at epoch {}",
        s.name,
        s.mode,
        s.backbone,
        s.epochs_run,
        if s.stopped_early { " (early stop)" } else { "" },
        s.best.val_acc,
        s.best.epoch
    );
    println!("run dir {}", run_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let run_dir = match &suite {
        Some(s) if !a.run.exists() && a.run.components().count() == 1 => s.run_dir(&a.run.to_string_lossy()),
        _ => a.run.clone(),
    };
    // Checked first so a missing run is reported as such, whatever else is wrong.
    let summary = trainer::read_summary(&run_dir)?;
    println!("seed={} config_hash={}", summary.seed, summary.config_hash);
    let manifest = match (a.manifest, &suite) {
        (Some(p), _) => p,
        (None, Some(s)) => s.manifest_path(),
        (None, None) => return Err(Error::InvalidArgument("--manifest is required without --config".into())),
    };
    let m = dataset::load_manifest(&manifest)?;
    let split: Split = a.split.into();
    let r = evaluator::evaluate_run(&run_dir, &m, split, &Device::Cpu)?;
    println!(
        "{} {split}: accuracy {:.4} ({}/{})",
        r.run, r.accuracy, r.correct, r.total
    );
    println!("predictions {}", run_dir.join(evaluator::predictions_file(split)).display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let suite = a.suite.load()?;
    let runs = if !a.runs.is_empty() {
        a.runs
    } else if let Some(s) = &suite {
        s.report_runs()
    } else {
        return Err(Error::InvalidArgument("--runs is required without --config".into()));
    };
    let out = a
        .out
        .or_else(|| suite.as_ref().map(|s| s.report_dir()))
        .unwrap_or_else(|| PathBuf::from("."));

    let mut hashes = Vec::new();
    for r in &runs {
        hashes.push(trainer::read_summary(r)?.config_hash);
    }
    announce(None, &BTreeMap::from([("runs", hashes)]))?;
    let entries = evaluator::collect_runs(&runs, a.force)?;
    let report = evaluator::render_report(&entries)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let md = out.join("report.md");
    let markdown = report.to_markdown();
    fs::write(&md, &markdown).map_err(|e| Error::io(&md, e))?;
    let csv = out.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    print!("{markdown}");
    println!("wrote {} and {}", md.display(), csv.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        total: a.total,
        size: a.size,
        seed: a.seed,
    };
    announce(Some(cfg.seed), &cfg)?;
    let summary = synth::generate(&cfg, &a.out)?;
    println!("{}, {} images in {}", classes(summary.classes), summary.images, a.out.display());
    Ok(())
}
