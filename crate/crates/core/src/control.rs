//! Selective draft-training control.
//!
//! Two exponential moving averages of the per-request acceptance rate run at
//! different speeds. When the fast one drops more than `epsilon` below the
//! slow one, the workload has drifted away from what the draft was trained
//! on and signal collection is switched on. Once `n_threshold` samples are
//! stored they are split chronologically 9:1 into train and eval sets and
//! handed to a [`Trainer`]. The trained draft is deployed only if its eval
//! acceptance beats the mean acceptance of the training set; if it is worse,
//! collection is switched off again because training has stopped paying.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::training::{DraftModel, Trainer, TrainingJob, TrainingOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    pub lambda_short: f64,
    pub lambda_long: f64,
    pub epsilon: f64,
    pub n_init: usize,
    pub n_threshold: usize,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            lambda_short: 0.9,
            lambda_long: 0.99,
            epsilon: 0.05,
            n_init: 32,
            n_threshold: 2048,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.lambda_short) {
            problems.push("controller.lambda_short must be in (0, 1)".to_string());
        }
        if !open_unit(self.lambda_long) {
            problems.push("controller.lambda_long must be in (0, 1)".to_string());
        }
        if self.lambda_long < self.lambda_short {
            problems.push("controller.lambda_long must not be below lambda_short".to_string());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            problems.push("controller.epsilon must be > 0".to_string());
        }
        if self.n_init == 0 {
            problems.push("controller.n_init must be >= 1".to_string());
        }
        if self.n_threshold < 2 {
            problems.push(
                "controller.n_threshold must be >= 2 (train and eval both non-empty)".to_string(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

/// Reference to the stored hidden states behind one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalHandle {
    pub request_id: u64,
    pub tokens: u32,
}

/// One stored `(signal, alpha)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub handle: SignalHandle,
    /// Workload phase the request came from.
    pub phase: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlEventKind {
    CollectOn,
    CollectOff,
    TrainTrigger,
    Deploy,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEvent {
    pub clock_ms: f64,
    pub kind: ControlEventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draft_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_eval: Option<f64>,
}

impl ControlEvent {
    fn new(clock_ms: f64, kind: ControlEventKind) -> Self {
        Self {
            clock_ms,
            kind,
            draft_version: None,
            alpha_train: None,
            alpha_eval: None,
        }
    }
}

/// A training job that has been started and whose result is not yet applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingTraining {
    pub alpha_train: f64,
    pub outcome: TrainingOutcome,
    pub started_ms: f64,
}

impl PendingTraining {
    pub fn ready_at_ms(&self) -> f64 {
        self.started_ms + self.outcome.duration_hours * 3_600_000.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Deploy,
    /// Eval acceptance fell below the training mean; collection stops.
    Reject,
    /// Equal acceptance: keep the current draft and keep collecting.
    Tie,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    params: ControllerParams,
    ema_short: f64,
    ema_long: f64,
    initialized: bool,
    warmup: Vec<f64>,
    collection_enabled: bool,
    pending: Vec<Sample>,
    draft_version: u32,
    job_in_flight: bool,
    events: Vec<ControlEvent>,
}

impl ControllerState {
    /// A controller still collecting its first `n_init` observations.
    pub fn new(params: ControllerParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            ema_short: 0.0,
            ema_long: 0.0,
            initialized: false,
            warmup: Vec::with_capacity(params.n_init),
            collection_enabled: false,
            pending: Vec::new(),
            draft_version: 0,
            job_in_flight: false,
            events: Vec::new(),
        })
    }

    /// Initializes both averages to the mean of exactly `n_init` warm-up
    /// acceptance rates.
    pub fn init_from_warmup(params: ControllerParams, alphas: &[f64]) -> Result<Self> {
        let mut state = Self::new(params)?;
        if alphas.len() != params.n_init {
            return Err(SimError::domain(format!(
                "warm-up needs exactly {} observations, got {}",
                params.n_init,
                alphas.len()
            )));
        }
        for &a in alphas {
            check_alpha(a)?;
        }
        state.warmup.extend_from_slice(alphas);
        state.finish_warmup();
        Ok(state)
    }

    fn finish_warmup(&mut self) {
        let mean = self.warmup.iter().sum::<f64>() / self.warmup.len() as f64;
        self.ema_short = mean;
        self.ema_long = mean;
        self.initialized = true;
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn ema_short(&self) -> f64 {
        self.ema_short
    }

    pub fn ema_long(&self) -> f64 {
        self.ema_long
    }

    /// Short-term average once warm-up is over.
    pub fn monitored_alpha(&self) -> Option<f64> {
        self.initialized.then_some(self.ema_short)
    }

    pub fn collection_enabled(&self) -> bool {
        self.collection_enabled
    }

    pub fn stored_samples(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_samples(&self) -> &[Sample] {
        &self.pending
    }

    pub fn draft_version(&self) -> u32 {
        self.draft_version
    }

    pub fn job_in_flight(&self) -> bool {
        self.job_in_flight
    }

    pub fn events(&self) -> &[ControlEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ControlEvent> {
        std::mem::take(&mut self.events)
    }

    /// Feeds one measured acceptance rate.
    ///
    /// During warm-up the value is buffered; the `n_init`-th value
    /// initializes both averages. Afterwards both averages are updated and
    /// collection is switched on if the short one falls more than `epsilon`
    /// below the long one. This never switches collection off.
    pub fn observe(&mut self, alpha: f64, clock_ms: f64) -> Result<()> {
        check_alpha(alpha)?;
        if !self.initialized {
            self.warmup.push(alpha);
            if self.warmup.len() >= self.params.n_init {
                self.finish_warmup();
            }
            return Ok(());
        }
        let p = &self.params;
        self.ema_short = p.lambda_short * self.ema_short + (1.0 - p.lambda_short) * alpha;
        self.ema_long = p.lambda_long * self.ema_long + (1.0 - p.lambda_long) * alpha;
        if !self.collection_enabled && self.ema_short < self.ema_long - p.epsilon {
            self.collection_enabled = true;
            self.events
                .push(ControlEvent::new(clock_ms, ControlEventKind::CollectOn));
        }
        Ok(())
    }

    /// Stores a sample if collection is on; otherwise does nothing.
    pub fn record_sample(&mut self, sample: Sample) -> bool {
        if self.collection_enabled {
            self.pending.push(sample);
        }
        self.collection_enabled
    }

    /// Starts a training job once `n_threshold` samples are stored.
    ///
    /// The pending set is split chronologically (oldest 90% train) and moved
    /// into the job. No job starts while another is in flight. If the
    /// trainer fails, the controller is left exactly as it was.
    pub fn maybe_trigger_training(
        &mut self,
        trainer: &mut dyn Trainer,
        base: &DraftModel,
        clock_ms: f64,
    ) -> Result<Option<PendingTraining>> {
        if self.job_in_flight || self.pending.len() < self.params.n_threshold {
            return Ok(None);
        }
        let n = self.pending.len();
        let n_train = (n * 9 / 10).clamp(1, n - 1);
        let (train, eval) = self.pending.split_at(n_train);
        let alpha_train = train.iter().map(|s| s.alpha).sum::<f64>() / train.len() as f64;
        let outcome = trainer.train(&TrainingJob { train, eval, base })?;
        self.pending.clear();
        self.job_in_flight = true;
        let mut ev = ControlEvent::new(clock_ms, ControlEventKind::TrainTrigger);
        ev.alpha_train = Some(alpha_train);
        self.events.push(ev);
        Ok(Some(PendingTraining {
            alpha_train,
            outcome,
            started_ms: clock_ms,
        }))
    }

    /// Applies a finished job's deploy-if-improved decision.
    pub fn apply_outcome(&mut self, job: &PendingTraining, clock_ms: f64) -> Decision {
        self.job_in_flight = false;
        let eval = job.outcome.alpha_eval;
        let decision = if eval > job.alpha_train {
            self.draft_version = job.outcome.new_version;
            Decision::Deploy
        } else if eval < job.alpha_train {
            Decision::Reject
        } else {
            Decision::Tie
        };
        let kind = match decision {
            Decision::Deploy => ControlEventKind::Deploy,
            Decision::Reject | Decision::Tie => ControlEventKind::Reject,
        };
        let mut ev = ControlEvent::new(clock_ms, kind);
        ev.draft_version = Some(job.outcome.new_version);
        ev.alpha_train = Some(job.alpha_train);
        ev.alpha_eval = Some(eval);
        self.events.push(ev);
        if decision == Decision::Reject && self.collection_enabled {
            self.collection_enabled = false;
            self.pending.clear();
            self.events
                .push(ControlEvent::new(clock_ms, ControlEventKind::CollectOff));
        }
        decision
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(SimError::domain(format!(
            "alpha must be in [0, 1], got {alpha}"
        )))
    }
}
