//! Asynchronous draft training and its cost relative to recompute-based
//! baselines.
//!
//! Baselines regenerate target hidden states with a prefill pass: the
//! offline baseline does it once and stores everything, the online baseline
//! redoes it every epoch and stores nothing. Reusing serving-time states
//! removes prefill entirely and only keeps a rolling buffer.

use serde::{Deserialize, Serialize};

use crate::control::Sample;
use crate::error::{Result, SimError};
use crate::serving::SignalGeometry;
use crate::workload::PhaseSpec;

/// The deployed draft, summarized by how many samples of each workload
/// phase it has been trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftModel {
    pub version: u32,
    pub trained_samples: Vec<f64>,
}

impl DraftModel {
    pub fn new(num_phases: usize) -> Self {
        Self {
            version: 0,
            trained_samples: vec![0.0; num_phases],
        }
    }

    pub fn trained_on(&self, phase: usize) -> f64 {
        self.trained_samples.get(phase).copied().unwrap_or(0.0)
    }
}

pub struct TrainingJob<'a> {
    pub train: &'a [Sample],
    pub eval: &'a [Sample],
    pub base: &'a DraftModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub duration_hours: f64,
    pub alpha_eval: f64,
    pub new_version: u32,
    /// Per-phase sample counts of the candidate draft.
    pub trained_samples: Vec<f64>,
}

pub trait Trainer {
    fn train(&mut self, job: &TrainingJob<'_>) -> Result<TrainingOutcome>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerProfile {
    /// Draft-training throughput on the training GPUs, per epoch pass.
    pub samples_per_hour: f64,
    /// Target-model hidden-state regeneration throughput (baselines only).
    pub prefill_samples_per_hour: f64,
    pub epochs: u32,
}

/// Samples in the reference training-time comparison.
pub const REFERENCE_DATASET_SAMPLES: u64 = 100_000;

impl Default for TrainerProfile {
    /// Calibrated to 100k samples: 6.16 h prefill, 9.16 h training over 3
    /// epochs.
    fn default() -> Self {
        Self::from_hours(REFERENCE_DATASET_SAMPLES, 6.16, 9.16, 3)
            .expect("reference calibration is valid")
    }
}

impl TrainerProfile {
    /// Rates that reproduce the given wall-clock hours on `samples` samples.
    pub fn from_hours(
        samples: u64,
        prefill_hours: f64,
        train_hours: f64,
        epochs: u32,
    ) -> Result<Self> {
        if samples == 0 || !positive(prefill_hours) || !positive(train_hours) || epochs == 0 {
            return Err(SimError::domain(
                "samples, prefill hours, train hours and epochs must all be positive",
            ));
        }
        let n = samples as f64;
        let profile = Self {
            samples_per_hour: n * f64::from(epochs) / train_hours,
            prefill_samples_per_hour: n / prefill_hours,
            epochs,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.samples_per_hour.is_finite() && self.samples_per_hour > 0.0) {
            problems.push("trainer.samples_per_hour must be > 0".to_string());
        }
        if !positive(self.prefill_samples_per_hour) {
            problems.push("trainer.prefill_samples_per_hour must be > 0".to_string());
        }
        if self.epochs == 0 {
            problems.push("trainer.epochs must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }

    pub fn train_hours(&self, samples: u64) -> f64 {
        samples as f64 * f64::from(self.epochs) / self.samples_per_hour
    }

    pub fn prefill_hours(&self, samples: u64) -> f64 {
        samples as f64 / self.prefill_samples_per_hour
    }
}

/// False for NaN; infinity counts as positive.
fn positive(x: f64) -> bool {
    x > 0.0
}

/// Trains a draft on `samples` samples of one phase it has already seen
/// `samples_seen_before` samples of.
pub fn train(
    samples: u64,
    phase: &PhaseSpec,
    profile: &TrainerProfile,
    samples_seen_before: f64,
    new_version: u32,
) -> Result<TrainingOutcome> {
    if samples == 0 {
        return Err(SimError::domain("training job needs at least one sample"));
    }
    let seen = samples_seen_before + samples as f64;
    Ok(TrainingOutcome {
        duration_hours: profile.train_hours(samples),
        alpha_eval: phase.current_alpha(seen),
        new_version,
        trained_samples: vec![seen],
    })
}

/// Trainer driven by the workload's adaptation dynamics.
///
/// Every training sample advances its phase's count in the candidate draft.
/// Eval acceptance is the mean, over eval samples, of the candidate's
/// alignment on each sample's phase.
#[derive(Debug, Clone)]
pub struct SimTrainer {
    phases: Vec<PhaseSpec>,
    profile: TrainerProfile,
}

impl SimTrainer {
    pub fn new(phases: Vec<PhaseSpec>, profile: TrainerProfile) -> Result<Self> {
        profile.validate()?;
        Ok(Self { phases, profile })
    }
}

impl Trainer for SimTrainer {
    fn train(&mut self, job: &TrainingJob<'_>) -> Result<TrainingOutcome> {
        if job.train.is_empty() || job.eval.is_empty() {
            return Err(SimError::Trainer(
                "train and eval splits must be non-empty".into(),
            ));
        }
        let mut trained = job.base.trained_samples.clone();
        trained.resize(self.phases.len(), 0.0);
        for s in job.train {
            let slot = trained
                .get_mut(s.phase)
                .ok_or_else(|| SimError::Trainer(format!("unknown phase {}", s.phase)))?;
            *slot += 1.0;
        }
        let mut eval_sum = 0.0;
        for s in job.eval {
            let phase = self
                .phases
                .get(s.phase)
                .ok_or_else(|| SimError::Trainer(format!("unknown phase {}", s.phase)))?;
            eval_sum += phase.current_alpha(trained[s.phase]);
        }
        Ok(TrainingOutcome {
            duration_hours: self.profile.train_hours(job.train.len() as u64),
            alpha_eval: eval_sum / job.eval.len() as f64,
            new_version: job.base.version + 1,
            trained_samples: trained,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Prefill once, store all hidden states, then train.
    Offline,
    /// Regenerate hidden states every epoch; nothing stored.
    Online,
    /// Reuse hidden states captured while serving.
    ServingReuse,
}

impl TrainingMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainingMode::Offline => "offline",
            TrainingMode::Online => "online",
            TrainingMode::ServingReuse => "tide",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingCostRow {
    pub mode: TrainingMode,
    pub prefill_hours: f64,
    pub train_hours: f64,
    pub total_hours: f64,
    pub speedup_vs_offline: f64,
}

pub fn compare_training_modes(
    dataset_samples: u64,
    profile: &TrainerProfile,
) -> Result<Vec<TrainingCostRow>> {
    if dataset_samples == 0 {
        return Err(SimError::domain("dataset must contain at least one sample"));
    }
    profile.validate()?;
    let prefill = profile.prefill_hours(dataset_samples);
    let train = profile.train_hours(dataset_samples);
    let offline_total = prefill + train;
    let rows = [
        (TrainingMode::Offline, prefill),
        (TrainingMode::Online, prefill * f64::from(profile.epochs)),
        (TrainingMode::ServingReuse, 0.0),
    ]
    .into_iter()
    .map(|(mode, prefill_hours)| {
        let total_hours = prefill_hours + train;
        TrainingCostRow {
            mode,
            prefill_hours,
            train_hours: train,
            total_hours,
            speedup_vs_offline: offline_total / total_hours,
        }
    })
    .collect();
    Ok(rows)
}

/// Persistent hidden-state bytes each training mode keeps.
pub fn storage_footprint(
    mode: TrainingMode,
    dataset_tokens: u64,
    buffer_tokens: u64,
    geometry: &SignalGeometry,
) -> Result<u64> {
    if buffer_tokens > dataset_tokens {
        return Err(SimError::domain(
            "buffer cannot hold more tokens than the dataset",
        ));
    }
    let per_token = geometry.bytes_per_token();
    Ok(match mode {
        TrainingMode::Offline => dataset_tokens * per_token,
        TrainingMode::ServingReuse => buffer_tokens * per_token,
        TrainingMode::Online => 0,
    })
}
