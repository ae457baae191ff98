//! Experiment-suite config: one TOML document holding the paths, dataset and
//! preprocessing parameters, and every run of the suite.
//!
//! Relative paths are resolved against the directory holding the file, so a
//! suite can be run from any working directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use catreid_core::dataset::{DEFAULT_MIN_IMAGES, DEFAULT_TEST_PER_CLASS, DEFAULT_VAL_PER_CLASS};
use catreid_core::preprocess::{DEFAULT_CONF_THRESHOLD, DEFAULT_OUT_SIZE, DEFAULT_TARGET_LABEL};
use catreid_core::trainer::RunConfig;
use catreid_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RUNS_DIR: &str = "runs";
pub const CROPS_DIR: &str = "crops";
pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: None,
            work_dir: default_work_dir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub min_images: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            min_images: DEFAULT_MIN_IMAGES,
            val_per_class: DEFAULT_VAL_PER_CLASS,
            test_per_class: DEFAULT_TEST_PER_CLASS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    /// `full-frame`, `stub:<file>` or `cmd:<command line>`.
    pub detector: String,
    pub threshold: f32,
    pub out_size: u32,
    pub target_label: String,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            detector: "full-frame".into(),
            threshold: DEFAULT_CONF_THRESHOLD,
            out_size: DEFAULT_OUT_SIZE,
            target_label: DEFAULT_TARGET_LABEL.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportTargets {
    /// Run names to tabulate; empty means every run of the suite.
    pub runs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub preprocess: PreprocessParams,
    #[serde(default)]
    pub runs: Vec<RunConfig>,
    #[serde(default)]
    pub report: ReportTargets,
}

impl CliConfig {
    /// Parse, resolve relative paths against the file's directory, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: CliConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.paths.data_root {
            fix(p);
        }
        fix(&mut self.paths.work_dir);
        if let Some(p) = &mut self.report.out_dir {
            fix(p);
        }
        for run in &mut self.runs {
            if let Some(w) = &mut run.weights {
                fix(&mut w.cache_dir);
            }
        }
        if let Some(file) = self.preprocess.detector.strip_prefix("stub:") {
            let mut p = PathBuf::from(file);
            fix(&mut p);
            self.preprocess.detector = format!("stub:{}", p.display());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        for run in &self.runs {
            run.validate()
                .map_err(|e| Error::Config(format!("run {}: {e}", run.name)))?;
            if !names.insert(run.name.as_str()) {
                return Err(Error::Config(format!("duplicate run name {}", run.name)));
            }
        }
        if let Some(missing) = self.report.runs.iter().find(|r| !names.contains(r.as_str())) {
            return Err(Error::Config(format!("report lists unknown run {missing}")));
        }
        if self.dataset.min_images < 6 {
            return Err(Error::Config(format!(
                "dataset.min_images must be at least 6, got {}",
                self.dataset.min_images
            )));
        }
        if !(self.preprocess.threshold.is_finite() && (0.0..=1.0).contains(&self.preprocess.threshold)) {
            return Err(Error::Config(format!(
                "preprocess.threshold {} outside [0, 1]",
                self.preprocess.threshold
            )));
        }
        if self.preprocess.out_size < 32 {
            return Err(Error::Config(format!(
                "preprocess.out_size must be at least 32, got {}",
                self.preprocess.out_size
            )));
        }
        Ok(())
    }

    pub fn run(&self, name: &str) -> Result<&RunConfig> {
        self.runs.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.runs.iter().map(|r| r.name.as_str()).collect();
            Error::Config(format!("no run named {name} (suite has: {})", known.join(", ")))
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.work_dir.join(MANIFEST_FILE)
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(RUNS_DIR).join(name)
    }

    pub fn crops_dir(&self) -> PathBuf {
        self.paths.work_dir.join(CROPS_DIR)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.report
            .out_dir
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join(REPORT_DIR))
    }

    /// Run dirs named by the report targets, in suite order.
    pub fn report_runs(&self) -> Vec<PathBuf> {
        self.runs
            .iter()
            .filter(|r| self.report.runs.is_empty() || self.report.runs.contains(&r.name))
            .map(|r| self.run_dir(&r.name))
            .collect()
    }
}
