//! Iteration-level serving simulator.
//!
//! The engine is one actor on a simulated millisecond clock. Every iteration
//! advances all in-flight requests together: with speculation on, each
//! request drafts `gamma` tokens and keeps a sampled acceptance length worth
//! of them; with speculation off, each request gains one token. Completed
//! requests are replaced from the workload script right away.
//!
//! The trainer is the second actor. It receives sample batches from the
//! controller and answers with a deploy decision stamped at a future clock
//! value. The two only interact through those timestamped events.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{
    ControlEvent, ControllerParams, ControllerState, Decision, PendingTraining, Sample,
    SignalHandle,
};
use crate::error::{Result, SimError};
use crate::perf_model::{self, practical_speedup, LatencyProfile, SpeculationConfig};
use crate::training::{DraftModel, SimTrainer, Trainer, TrainerProfile};
use crate::workload::{jittered_alpha, Request, ScriptCursor, WorkloadScript};

pub const DEFAULT_FLUSH_THRESHOLD_BYTES: u64 = 64 * 1024 * 1024;

/// Shape of the hidden states captured per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalGeometry {
    pub hidden_dim: u32,
    pub layers_tapped: u32,
    pub bytes_per_element: u32,
}

impl Default for SignalGeometry {
    fn default() -> Self {
        Self {
            hidden_dim: 4096,
            layers_tapped: 3,
            bytes_per_element: 2,
        }
    }
}

impl SignalGeometry {
    pub fn bytes_per_token(&self) -> u64 {
        u64::from(self.layers_tapped)
            * u64::from(self.hidden_dim)
            * u64::from(self.bytes_per_element)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.hidden_dim == 0 {
            problems.push("geometry.hidden_dim must be >= 1".to_string());
        }
        if self.layers_tapped == 0 {
            problems.push("geometry.layers_tapped must be >= 1".to_string());
        }
        if self.bytes_per_element == 0 {
            problems.push("geometry.bytes_per_element must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

/// Who decides whether hidden states are captured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionPolicy {
    /// The training controller's collection flag (training modes only).
    #[default]
    Controller,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalConfig {
    pub flush_threshold_bytes: u64,
    /// Clock cost per buffer flush. Zero models transfers fully overlapped
    /// with the next verification step.
    pub overhead_ms_per_flush: f64,
    pub collection: CollectionPolicy,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            flush_threshold_bytes: DEFAULT_FLUSH_THRESHOLD_BYTES,
            overhead_ms_per_flush: 0.0,
            collection: CollectionPolicy::Controller,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Speculation gated by predicted speedup; online training.
    TideAdaptive,
    /// Speculation always on; online training.
    TideDefault,
    /// Plain autoregressive decoding.
    SpeculationOff,
    /// Speculation always on with a static draft.
    SpeculationOnNoTraining,
}

impl RunMode {
    pub const ALL: [RunMode; 4] = [
        RunMode::TideAdaptive,
        RunMode::TideDefault,
        RunMode::SpeculationOff,
        RunMode::SpeculationOnNoTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::TideAdaptive => "tide_adaptive",
            RunMode::TideDefault => "tide_default",
            RunMode::SpeculationOff => "speculation_off",
            RunMode::SpeculationOnNoTraining => "speculation_on_no_training",
        }
    }

    pub fn trains(self) -> bool {
        matches!(self, RunMode::TideAdaptive | RunMode::TideDefault)
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                SimError::Config(format!(
                    "unknown mode {s:?}; expected one of {}",
                    RunMode::ALL.map(RunMode::as_str).join(", ")
                ))
            })
    }
}

/// Everything the engine needs besides the script and the latency profile.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub spec: SpeculationConfig,
    pub controller: ControllerParams,
    pub trainer: TrainerProfile,
    pub geometry: SignalGeometry,
    pub signals: SignalConfig,
    pub mode: RunMode,
    pub seed: u64,
    /// Speculation state before the controller has warmed up.
    pub initial_speculation: bool,
    /// Acceptance rate of the draft on the data it was trained on. When
    /// set, the controller's warm-up is seeded with it instead of with the
    /// first served requests, so the opening phase already counts as drift.
    pub reference_alpha: Option<f64>,
    /// Iterations in the trailing throughput window.
    pub throughput_window: usize,
    pub record_iterations: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            spec: SpeculationConfig::default(),
            controller: ControllerParams::default(),
            trainer: TrainerProfile::default(),
            geometry: SignalGeometry::default(),
            signals: SignalConfig::default(),
            mode: RunMode::TideAdaptive,
            seed: 0,
            initial_speculation: true,
            reference_alpha: None,
            throughput_window: 64,
            record_iterations: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for r in [
            self.spec.validate(),
            self.controller.validate(),
            self.trainer.validate(),
            self.geometry.validate(),
        ] {
            if let Err(SimError::Validation(p)) = r {
                problems.extend(p);
            }
        }
        if self.signals.flush_threshold_bytes == 0 {
            problems.push("signals.flush_threshold_bytes must be > 0".to_string());
        }
        if !(self.signals.overhead_ms_per_flush.is_finite()
            && self.signals.overhead_ms_per_flush >= 0.0)
        {
            problems.push("signals.overhead_ms_per_flush must be >= 0".to_string());
        }
        if let Some(a) = self.reference_alpha {
            if !(0.0..=1.0).contains(&a) {
                problems.push("reference_alpha must be in [0, 1]".to_string());
            }
        }
        if self.throughput_window == 0 {
            problems.push("throughput_window must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalBuffer {
    pub records: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub clock_ms: f64,
    pub batch: Vec<Request>,
    pub speculation_enabled: bool,
    pub monitored_alpha: Option<f64>,
    pub draft: DraftModel,
    pub signal_buffer: SignalBuffer,
    pub cumulative_storage_bytes: u64,
    pub flush_count: u64,
}

impl EngineState {
    pub fn new(num_phases: usize, speculation_enabled: bool) -> Self {
        Self {
            clock_ms: 0.0,
            batch: Vec::new(),
            speculation_enabled,
            monitored_alpha: None,
            draft: DraftModel::new(num_phases),
            signal_buffer: SignalBuffer::default(),
            cumulative_storage_bytes: 0,
            flush_count: 0,
        }
    }

    pub fn draft_version(&self) -> u32 {
        self.draft.version
    }
}

/// What one decode iteration did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub latency_ms: f64,
    pub batch_size: u32,
    pub tokens_emitted: u64,
    /// Mean sampled acceptance length with speculation on, 1 with it off.
    pub mean_accept_length: f64,
    pub completed: Vec<Request>,
}

/// Runs one iteration over the current batch and refills it from `cursor`.
///
/// Every request samples an acceptance length from its current alignment
/// in both modes, so the acceptance monitor sees the same statistics
/// whether or not speculation is on. With speculation off the sample is not
/// applied and each request advances by one token.
pub fn step(
    state: &mut EngineState,
    profile: &LatencyProfile,
    spec: &SpeculationConfig,
    cursor: &mut ScriptCursor<'_>,
    script: &WorkloadScript,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let b = state.batch.len() as u32;
    if b == 0 {
        return Err(SimError::domain("step requires a non-empty batch"));
    }
    let gamma = spec.gamma;
    let latency_ms = if state.speculation_enabled {
        f64::from(gamma) * profile.d0_ms() + profile.latency(b * (gamma + 1))?
    } else {
        profile.latency(b)?
    };
    let mut tokens = 0u64;
    let mut sampled = 0u64;
    for req in &mut state.batch {
        let phase = script.phase(req.phase);
        let alpha = jittered_alpha(phase, state.draft.trained_on(req.phase), req.alpha_jitter);
        let k = perf_model::sample_unchecked(rng, alpha, gamma);
        let emitted = if state.speculation_enabled {
            k.min(req.output_tokens_remaining)
        } else {
            1
        };
        req.output_tokens_remaining -= emitted;
        req.accept_total += u64::from(k);
        req.steps += 1;
        tokens += u64::from(emitted);
        sampled += u64::from(k);
    }
    state.clock_ms += latency_ms;
    let mut completed = Vec::new();
    let mut i = 0;
    while i < state.batch.len() {
        if state.batch[i].is_done() {
            completed.push(state.batch.remove(i));
        } else {
            i += 1;
        }
    }
    cursor.refill(&mut state.batch);
    Ok(StepReport {
        latency_ms,
        batch_size: b,
        tokens_emitted: tokens,
        mean_accept_length: if state.speculation_enabled {
            sampled as f64 / f64::from(b)
        } else {
            1.0
        },
        completed,
    })
}

/// Whether speculation should run at batch size `b` given the monitored
/// acceptance rate.
pub fn adaptive_drafter_decide(
    monitored_alpha: f64,
    profile: &LatencyProfile,
    spec: &SpeculationConfig,
    b: u32,
) -> Result<bool> {
    let predicted = practical_speedup(profile, monitored_alpha.clamp(0.0, 1.0), spec.gamma, b)?;
    Ok(predicted > 1.0 + spec.hysteresis_margin)
}

/// Buffers hidden states for `accepted_tokens` tokens and flushes the buffer
/// to shared storage once it exceeds the threshold. Returns true on flush.
pub fn extract_signals(
    state: &mut EngineState,
    geometry: &SignalGeometry,
    signals: &SignalConfig,
    accepted_tokens: u64,
    collection_enabled: bool,
) -> bool {
    if !collection_enabled {
        return false;
    }
    state.signal_buffer.records += accepted_tokens;
    state.signal_buffer.bytes += accepted_tokens * geometry.bytes_per_token();
    if state.signal_buffer.bytes > signals.flush_threshold_bytes {
        flush(state, signals);
        true
    } else {
        false
    }
}

fn flush(state: &mut EngineState, signals: &SignalConfig) {
    state.cumulative_storage_bytes += state.signal_buffer.bytes;
    state.signal_buffer = SignalBuffer::default();
    state.flush_count += 1;
    state.clock_ms += signals.overhead_ms_per_flush;
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRow {
    pub clock_ms: f64,
    pub batch_size: u32,
    pub speculation_on: bool,
    pub mean_accept_length: f64,
    pub tokens_emitted: u64,
    pub throughput_tokens_per_s: f64,
    pub collection_on: bool,
    pub buffer_bytes: u64,
    pub cumulative_storage_bytes: u64,
    pub draft_version: u32,
}

impl IterationRow {
    pub const HEADER: [&'static str; 10] = [
        "clock_ms",
        "batch_size",
        "speculation_on",
        "mean_accept_length",
        "tokens_emitted",
        "throughput_tokens_per_s",
        "collection_on",
        "buffer_bytes",
        "cumulative_storage_bytes",
        "draft_version",
    ];

    pub fn to_record(&self) -> [String; 10] {
        [
            self.clock_ms.to_string(),
            self.batch_size.to_string(),
            u8::from(self.speculation_on).to_string(),
            self.mean_accept_length.to_string(),
            self.tokens_emitted.to_string(),
            self.throughput_tokens_per_s.to_string(),
            u8::from(self.collection_on).to_string(),
            self.buffer_bytes.to_string(),
            self.cumulative_storage_bytes.to_string(),
            self.draft_version.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub name: String,
    pub iterations: u64,
    pub tokens: u64,
    pub time_ms: f64,
    pub throughput_tokens_per_s: f64,
    /// Iterations run at the phase's configured concurrency.
    pub full_batch_iterations: u64,
    pub full_batch_tokens: u64,
    pub full_batch_time_ms: f64,
    pub full_batch_throughput_tokens_per_s: f64,
    pub speculation_time_fraction: f64,
    #[serde(skip)]
    speculative_time_ms: f64,
}

/// Contiguous stretch of iterations with one admitting phase and one draft.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub phase: usize,
    pub phase_name: String,
    pub draft_version: u32,
    pub start_ms: f64,
    pub end_ms: f64,
    pub iterations: u64,
    pub tokens: u64,
    pub time_ms: f64,
    pub throughput_tokens_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub seed: u64,
    pub model: String,
    pub total_requests: u64,
    pub total_tokens: u64,
    pub completion_time_ms: f64,
    pub mean_throughput_tokens_per_s: f64,
    pub iterations: u64,
    pub speculative_iterations: u64,
    /// Fraction of simulated time spent in speculative iterations.
    pub speculation_duty_cycle: f64,
    /// Fraction of simulated time with signal collection on.
    pub collection_duty_cycle: f64,
    pub flush_count: u64,
    pub cumulative_storage_bytes: u64,
    pub collected_tokens: u64,
    pub training_jobs: u64,
    pub deploys: u64,
    pub final_draft_version: u32,
    pub phases: Vec<PhaseSummary>,
    pub segments: Vec<SegmentSummary>,
    pub events: Vec<ControlEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// Per-iteration trace; empty unless `record_iterations` was set.
    pub rows: Vec<IterationRow>,
    pub summary: RunSummary,
}

struct ScheduledJob {
    ready_at_ms: f64,
    seq: u64,
    job: PendingTraining,
}

impl PartialEq for ScheduledJob {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ScheduledJob {}

impl PartialOrd for ScheduledJob {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScheduledJob {
    // Reversed: BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .ready_at_ms
            .total_cmp(&self.ready_at_ms)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Recorder {
    rows: Vec<IterationRow>,
    record_rows: bool,
    window: VecDeque<(f64, u64)>,
    window_cap: usize,
    window_time: f64,
    window_tokens: u64,
    iterations: u64,
    speculative_iterations: u64,
    speculative_time: f64,
    collection_time: f64,
    collected_tokens: u64,
    tokens: u64,
    phases: Vec<PhaseSummary>,
    segments: Vec<SegmentSummary>,
}

impl Recorder {
    fn new(script: &WorkloadScript, cfg: &EngineConfig) -> Self {
        Self {
            rows: Vec::new(),
            record_rows: cfg.record_iterations,
            window: VecDeque::with_capacity(cfg.throughput_window),
            window_cap: cfg.throughput_window,
            window_time: 0.0,
            window_tokens: 0,
            iterations: 0,
            speculative_iterations: 0,
            speculative_time: 0.0,
            collection_time: 0.0,
            collected_tokens: 0,
            tokens: 0,
            phases: script
                .phases()
                .iter()
                .map(|p| PhaseSummary {
                    name: p.name.clone(),
                    ..PhaseSummary::default()
                })
                .collect(),
            segments: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        script: &WorkloadScript,
        phase: usize,
        state: &EngineState,
        report: &StepReport,
        elapsed_ms: f64,
        speculation_on: bool,
        collection_on: bool,
    ) {
        self.iterations += 1;
        self.tokens += report.tokens_emitted;
        if speculation_on {
            self.speculative_iterations += 1;
            self.speculative_time += elapsed_ms;
        }
        if collection_on {
            self.collection_time += elapsed_ms;
            self.collected_tokens += report.tokens_emitted;
        }

        self.window.push_back((elapsed_ms, report.tokens_emitted));
        self.window_time += elapsed_ms;
        self.window_tokens += report.tokens_emitted;
        if self.window.len() > self.window_cap {
            let (t, n) = self.window.pop_front().expect("window is non-empty");
            self.window_time -= t;
            self.window_tokens -= n;
        }

        let ps = &mut self.phases[phase];
        ps.iterations += 1;
        ps.tokens += report.tokens_emitted;
        ps.time_ms += elapsed_ms;
        if speculation_on {
            ps.speculative_time_ms += elapsed_ms;
        }
        if report.batch_size == script.phase(phase).concurrency {
            ps.full_batch_iterations += 1;
            ps.full_batch_tokens += report.tokens_emitted;
            ps.full_batch_time_ms += elapsed_ms;
        }

        let version = state.draft_version();
        let start = state.clock_ms - elapsed_ms;
        match self.segments.last_mut() {
            Some(seg) if seg.phase == phase && seg.draft_version == version => {
                seg.iterations += 1;
                seg.tokens += report.tokens_emitted;
                seg.time_ms += elapsed_ms;
                seg.end_ms = state.clock_ms;
            }
            _ => self.segments.push(SegmentSummary {
                phase,
                phase_name: script.phase(phase).name.clone(),
                draft_version: version,
                start_ms: start,
                end_ms: state.clock_ms,
                iterations: 1,
                tokens: report.tokens_emitted,
                time_ms: elapsed_ms,
                throughput_tokens_per_s: 0.0,
            }),
        }

        if self.record_rows {
            self.rows.push(IterationRow {
                clock_ms: state.clock_ms,
                batch_size: report.batch_size,
                speculation_on,
                mean_accept_length: report.mean_accept_length,
                tokens_emitted: report.tokens_emitted,
                throughput_tokens_per_s: per_second(self.window_tokens, self.window_time),
                collection_on,
                buffer_bytes: state.signal_buffer.bytes,
                cumulative_storage_bytes: state.cumulative_storage_bytes,
                draft_version: version,
            });
        }
    }
}

fn per_second(tokens: u64, ms: f64) -> f64 {
    if ms > 0.0 {
        tokens as f64 * 1000.0 / ms
    } else {
        0.0
    }
}

/// Runs a full simulation with the dynamics-driven [`SimTrainer`].
pub fn run(
    script: &WorkloadScript,
    profile: &LatencyProfile,
    cfg: &EngineConfig,
) -> Result<RunMetrics> {
    let mut trainer = SimTrainer::new(script.phases().to_vec(), cfg.trainer)?;
    run_with_trainer(script, profile, cfg, &mut trainer)
}

/// Runs a full simulation: drafter decision, decode step, signal capture,
/// acceptance monitoring, training triggers and deploys, until every
/// scripted request has completed.
pub fn run_with_trainer(
    script: &WorkloadScript,
    profile: &LatencyProfile,
    cfg: &EngineConfig,
    trainer: &mut dyn Trainer,
) -> Result<RunMetrics> {
    cfg.validate()?;
    let gamma = cfg.spec.gamma;
    // Surface profile problems before the clock starts.
    for p in script.phases() {
        profile.latency(p.concurrency * (gamma + 1))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cursor = script.cursor();
    let initial_spec = match cfg.mode {
        RunMode::TideAdaptive => cfg.initial_speculation,
        RunMode::TideDefault | RunMode::SpeculationOnNoTraining => true,
        RunMode::SpeculationOff => false,
    };
    let mut state = EngineState::new(script.phases().len(), initial_spec);
    cursor.refill(&mut state.batch);
    let mut controller = match cfg.reference_alpha {
        Some(a) => {
            ControllerState::init_from_warmup(cfg.controller, &vec![a; cfg.controller.n_init])?
        }
        None => ControllerState::new(cfg.controller)?,
    };
    let mut jobs: BinaryHeap<ScheduledJob> = BinaryHeap::new();
    let mut job_seq = 0u64;
    let mut training_jobs = 0u64;
    let mut deploys = 0u64;
    let mut events = Vec::new();
    let mut rec = Recorder::new(script, cfg);
    let monitors = cfg.mode != RunMode::SpeculationOff;

    while !state.batch.is_empty() {
        while jobs.peek().is_some_and(|j| j.ready_at_ms <= state.clock_ms) {
            let done = jobs.pop().expect("peeked");
            if controller.apply_outcome(&done.job, done.ready_at_ms) == Decision::Deploy {
                state.draft = DraftModel {
                    version: done.job.outcome.new_version,
                    trained_samples: done.job.outcome.trained_samples.clone(),
                };
                deploys += 1;
            }
        }
        events.extend(controller.take_events());

        state.monitored_alpha = controller.monitored_alpha();
        let b = state.batch.len() as u32;
        if cfg.mode == RunMode::TideAdaptive {
            if let Some(alpha) = state.monitored_alpha {
                state.speculation_enabled = adaptive_drafter_decide(alpha, profile, &cfg.spec, b)?;
            }
        }
        let speculation_on = state.speculation_enabled;
        let collection_on = match cfg.signals.collection {
            CollectionPolicy::Never => false,
            CollectionPolicy::Always => true,
            CollectionPolicy::Controller => cfg.mode.trains() && controller.collection_enabled(),
        };

        let phase = cursor.current_phase();
        let before = state.clock_ms;
        let report = step(
            &mut state,
            profile,
            &cfg.spec,
            &mut cursor,
            script,
            &mut rng,
        )?;
        extract_signals(
            &mut state,
            &cfg.geometry,
            &cfg.signals,
            report.tokens_emitted,
            collection_on,
        );
        let elapsed = state.clock_ms - before;

        if monitors {
            for req in &report.completed {
                let Some(mean_len) = req.mean_accept_length() else {
                    continue;
                };
                let alpha = perf_model::alpha_from_accept_length(
                    mean_len.clamp(1.0, f64::from(gamma) + 1.0),
                    gamma,
                )?;
                controller.observe(alpha, state.clock_ms)?;
                if cfg.mode.trains() {
                    controller.record_sample(Sample {
                        handle: SignalHandle {
                            request_id: req.id,
                            tokens: req.output_tokens,
                        },
                        phase: req.phase,
                        alpha,
                    });
                }
            }
        }
        if cfg.mode.trains() {
            if let Some(job) =
                controller.maybe_trigger_training(trainer, &state.draft, state.clock_ms)?
            {
                training_jobs += 1;
                jobs.push(ScheduledJob {
                    ready_at_ms: job.ready_at_ms(),
                    seq: job_seq,
                    job,
                });
                job_seq += 1;
            }
        }
        events.extend(controller.take_events());

        rec.record(
            script,
            phase,
            &state,
            &report,
            elapsed,
            speculation_on,
            collection_on,
        );
    }

    if state.signal_buffer.bytes > 0 {
        flush(&mut state, &cfg.signals);
    }

    let completion = state.clock_ms;
    let mut phases = rec.phases;
    for p in &mut phases {
        p.throughput_tokens_per_s = per_second(p.tokens, p.time_ms);
        p.full_batch_throughput_tokens_per_s =
            per_second(p.full_batch_tokens, p.full_batch_time_ms);
        p.speculation_time_fraction = if p.time_ms > 0.0 {
            p.speculative_time_ms / p.time_ms
        } else {
            0.0
        };
    }
    let mut segments = rec.segments;
    for s in &mut segments {
        s.throughput_tokens_per_s = per_second(s.tokens, s.time_ms);
    }
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        model: profile.model_name().to_string(),
        total_requests: script.total_requests() as u64,
        total_tokens: rec.tokens,
        completion_time_ms: completion,
        mean_throughput_tokens_per_s: per_second(rec.tokens, completion),
        iterations: rec.iterations,
        speculative_iterations: rec.speculative_iterations,
        speculation_duty_cycle: if completion > 0.0 {
            rec.speculative_time / completion
        } else {
            0.0
        },
        collection_duty_cycle: if completion > 0.0 {
            rec.collection_time / completion
        } else {
            0.0
        },
        flush_count: state.flush_count,
        cumulative_storage_bytes: state.cumulative_storage_bytes,
        collected_tokens: rec.collected_tokens,
        training_jobs,
        deploys,
        final_draft_version: state.draft_version(),
        phases,
        segments,
        events,
    };
    Ok(RunMetrics {
        rows: rec.rows,
        summary,
    })
}
