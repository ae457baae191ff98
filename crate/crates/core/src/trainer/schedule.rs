//! Learning-rate schedules and the early-stopping rule.

use serde::{Deserialize, Serialize};

use super::EpochMetrics;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    ValLoss,
    ValAcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub monitor: Monitor,
    /// An epoch improves only if it beats the best value by more than this.
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            factor: 0.5,
            monitor: Monitor::ValLoss,
            min_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub interval_epochs: usize,
    pub factor: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            interval_epochs: 10,
            factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    /// Registered scheduler name: `plateau_decay` or `step_decay`.
    pub kind: String,
    #[serde(default)]
    pub plateau: PlateauConfig,
    #[serde(default)]
    pub step: StepConfig,
}

impl SchedulerSpec {
    pub fn plateau() -> Self {
        SchedulerSpec {
            kind: "plateau_decay".into(),
            plateau: PlateauConfig::default(),
            step: StepConfig::default(),
        }
    }

    pub fn step() -> Self {
        SchedulerSpec {
            kind: "step_decay".into(),
            ..Self::plateau()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.plateau;
        let s = &self.step;
        if !(p.factor > 0.0 && p.factor < 1.0) || !(s.factor > 0.0 && s.factor < 1.0) {
            return Err(Error::Config("scheduler factor must be in (0, 1)".into()));
        }
        if p.patience == 0 || s.interval_epochs == 0 {
            return Err(Error::Config(
                "scheduler patience and interval_epochs must be >= 1".into(),
            ));
        }
        if !(p.min_delta >= 0.0) {
            return Err(Error::Config("plateau min_delta must be >= 0".into()));
        }
        if !schedulers().contains(&self.kind) {
            return Err(Error::Config(format!(
                "unknown scheduler '{}' (known: {})",
                self.kind,
                schedulers().names().join(", ")
            )));
        }
        Ok(())
    }
}

/// Per-epoch learning-rate policy.
pub trait LrScheduler: Send {
    fn name(&self) -> &'static str;
    /// Rate for the upcoming epoch.
    fn lr(&self) -> f64;
    /// Observe the finished epoch; returns the rate for the next one.
    fn step(&mut self, metrics: &EpochMetrics) -> f64;
}

/// Multiply by `factor` once `patience` consecutive epochs fail to improve
/// the monitored metric, then start counting again.
pub struct PlateauDecay {
    cfg: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauDecay {
    pub fn new(cfg: PlateauConfig, lr0: f64) -> Self {
        PlateauDecay {
            cfg,
            lr: lr0,
            best: None,
            bad_epochs: 0,
        }
    }
}

impl LrScheduler for PlateauDecay {
    fn name(&self) -> &'static str {
        "plateau_decay"
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, m: &EpochMetrics) -> f64 {
        let d = self.cfg.min_delta;
        let (value, improved) = match self.cfg.monitor {
            Monitor::ValLoss => (m.val_loss, self.best.is_none_or(|b| m.val_loss < b - d)),
            Monitor::ValAcc => (m.val_acc, self.best.is_none_or(|b| m.val_acc > b + d)),
        };
        match self.best {
            Some(_) if !improved => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.cfg.patience {
                    self.lr *= self.cfg.factor;
                    self.bad_epochs = 0;
                }
            }
            _ => {
                self.best = Some(value);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// `lr0 * factor^floor((epoch - 1) / interval)` for 1-based epochs.
pub struct StepDecay {
    cfg: StepConfig,
    lr0: f64,
    epoch: usize,
}

impl StepDecay {
    pub fn new(cfg: StepConfig, lr0: f64) -> Self {
        StepDecay { cfg, lr0, epoch: 1 }
    }
}

impl LrScheduler for StepDecay {
    fn name(&self) -> &'static str {
        "step_decay"
    }

    fn lr(&self) -> f64 {
        let k = (self.epoch - 1) / self.cfg.interval_epochs;
        self.lr0 * self.cfg.factor.powi(k as i32)
    }

    fn step(&mut self, _m: &EpochMetrics) -> f64 {
        self.epoch += 1;
        self.lr()
    }
}

pub fn schedulers() -> Registry<dyn LrScheduler, (SchedulerSpec, f64)> {
    let mut r: Registry<dyn LrScheduler, (SchedulerSpec, f64)> = Registry::new("scheduler");
    r.register("plateau_decay", |(s, lr0): &(SchedulerSpec, f64)| {
        Ok(Box::new(PlateauDecay::new(s.plateau.clone(), *lr0)))
    });
    r.register("step_decay", |(s, lr0): &(SchedulerSpec, f64)| {
        Ok(Box::new(StepDecay::new(s.step.clone(), *lr0)))
    });
    r
}

pub fn build_scheduler(spec: &SchedulerSpec, lr0: f64) -> Result<Box<dyn LrScheduler>> {
    schedulers().build(&spec.kind, &(spec.clone(), lr0))
}

/// True iff the best validation accuracy has not improved by more than
/// `min_delta` during the last `patience` epochs. The first epoch sets the
/// initial best.
pub fn early_stop_check(history: &[EpochMetrics], patience: usize, min_delta: f64) -> bool {
    let Some(first) = history.first() else {
        return false;
    };
    let mut best = first.val_acc;
    let mut since = 0;
    for m in &history[1..] {
        if m.val_acc > best + min_delta {
            best = m.val_acc;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(e: usize, val_loss: f64, val_acc: f64) -> EpochMetrics {
        EpochMetrics {
            epoch: e,
            lr: 0.0,
            train_loss: 0.0,
            train_acc: 0.0,
            val_loss,
            val_acc,
        }
    }

    /// lr used in each epoch for a stream of (val_loss, val_acc).
    fn replay(spec: &SchedulerSpec, lr0: f64, stream: &[(f64, f64)]) -> Vec<f64> {
        let mut s = build_scheduler(spec, lr0).unwrap();
        let mut out = Vec::new();
        for (i, (l, a)) in stream.iter().enumerate() {
            out.push(s.lr());
            s.step(&epoch(i + 1, *l, *a));
        }
        out
    }

    #[test]
    fn plateau_improving_stream_keeps_lr() {
        let stream: Vec<(f64, f64)> = (0..20).map(|i| (2.0 - 0.05 * i as f64, 0.0)).collect();
        assert!(replay(&SchedulerSpec::plateau(), 0.01, &stream).iter().all(|lr| *lr == 0.01));
    }

    #[test]
    fn plateau_flat_stream_halves_once_after_sixth_epoch() {
        let spec = SchedulerSpec::plateau();
        let mut s = build_scheduler(&spec, 0.01).unwrap();
        let after: Vec<f64> = (1..=6).map(|e| s.step(&epoch(e, 1.0, 0.5))).collect();
        assert_eq!(after, vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.005]);
        // Counting restarts after a reduction.
        let more: Vec<f64> = (7..=11).map(|e| s.step(&epoch(e, 1.0, 0.5))).collect();
        assert_eq!(more, vec![0.005, 0.005, 0.005, 0.005, 0.0025]);
    }

    #[test]
    fn plateau_can_monitor_accuracy() {
        let mut spec = SchedulerSpec::plateau();
        spec.plateau.monitor = Monitor::ValAcc;
        spec.plateau.patience = 2;
        // Loss is flat but accuracy keeps rising: no decay.
        let rising: Vec<(f64, f64)> = (0..6).map(|i| (1.0, 0.1 * i as f64)).collect();
        assert!(replay(&spec, 0.1, &rising).iter().all(|lr| *lr == 0.1));
        let flat = vec![(1.0, 0.5); 4];
        assert_eq!(replay(&spec, 0.1, &flat), vec![0.1, 0.1, 0.1, 0.05]);
    }

    #[test]
    fn step_decay_arithmetic() {
        let stream = vec![(1.0, 0.0); 25];
        let lrs = replay(&SchedulerSpec::step(), 0.005, &stream);
        assert_eq!(lrs[9], 0.005);
        assert_eq!(lrs[10], 0.0025);
        assert_eq!(lrs[19], 0.0025);
        assert_eq!(lrs[20], 0.005 * 0.25);
    }

    #[test]
    fn scheduler_spec_validation() {
        let mut s = SchedulerSpec::plateau();
        s.plateau.factor = 1.0;
        assert!(s.validate().is_err());
        let mut s = SchedulerSpec::step();
        s.step.interval_epochs = 0;
        assert!(s.validate().is_err());
        let s = SchedulerSpec { kind: "cosine".into(), ..SchedulerSpec::plateau() };
        assert!(s.validate().unwrap_err().to_string().contains("plateau_decay"));
    }

    #[test]
    fn early_stopping_rules() {
        let improving: Vec<EpochMetrics> = (0..15).map(|i| epoch(i + 1, 0.0, 0.05 * i as f64)).collect();
        assert!(!early_stop_check(&improving, 10, 0.001));
        let flat: Vec<EpochMetrics> = (0..11).map(|i| epoch(i + 1, 0.0, 0.5)).collect();
        assert!(early_stop_check(&flat, 10, 0.001));
        assert!(!early_stop_check(&flat[..10], 10, 0.001));
        // A gain of exactly min_delta does not count.
        let exact: Vec<EpochMetrics> = [0.5, 0.75, 0.75].iter().enumerate().map(|(i, a)| epoch(i + 1, 0.0, *a)).collect();
        assert!(early_stop_check(&exact, 2, 0.25));
        assert!(!early_stop_check(&exact, 2, 0.125));
        assert!(!early_stop_check(&[], 1, 0.0));
    }
}
