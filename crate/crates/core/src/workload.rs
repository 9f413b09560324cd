//! Scripted, phased request streams.
//!
//! Each phase models one workload distribution. Its draft–target alignment
//! starts at `alpha_start` for a draft that has never seen the phase and
//! saturates toward `alpha_ceiling` as the draft is trained on samples from
//! it:
//!
//! ```text
//! alpha(n) = ceiling - (ceiling - start) * exp(-n / tau)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub name: String,
    pub num_requests: u32,
    /// Closed-loop batch size held while this phase is admitting requests.
    #[serde(alias = "b")]
    pub concurrency: u32,
    pub mean_output_tokens: u32,
    pub alpha_start: f64,
    pub alpha_ceiling: f64,
    pub tau_samples: f64,
    #[serde(default)]
    pub alpha_noise_sd: f64,
}

impl PhaseSpec {
    fn problems(&self, idx: usize, out: &mut Vec<String>) {
        let who = format!("phase {idx} ({})", self.name);
        if self.num_requests == 0 {
            out.push(format!("{who}: num_requests must be >= 1"));
        }
        if self.concurrency == 0 {
            out.push(format!("{who}: concurrency must be >= 1"));
        }
        if self.mean_output_tokens == 0 {
            out.push(format!("{who}: mean_output_tokens must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha_start) {
            out.push(format!("{who}: alpha_start must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha_ceiling) {
            out.push(format!("{who}: alpha_ceiling must be in [0, 1]"));
        }
        if self.alpha_start > self.alpha_ceiling {
            out.push(format!("{who}: alpha_start must not exceed alpha_ceiling"));
        }
        if !(self.tau_samples.is_finite() && self.tau_samples > 0.0) {
            out.push(format!("{who}: tau_samples must be > 0"));
        }
        if !(self.alpha_noise_sd.is_finite() && self.alpha_noise_sd >= 0.0) {
            out.push(format!("{who}: alpha_noise_sd must be >= 0"));
        }
    }

    /// Alignment of a draft trained on `trained_samples` samples of this
    /// phase, before per-request jitter.
    pub fn current_alpha(&self, trained_samples: f64) -> f64 {
        let n = trained_samples.max(0.0);
        let gap = self.alpha_ceiling - self.alpha_start;
        (self.alpha_ceiling - gap * (-n / self.tau_samples).exp()).clamp(0.0, 1.0)
    }
}

/// Free-function form of [`PhaseSpec::current_alpha`].
pub fn current_alpha(phase: &PhaseSpec, trained_samples: f64) -> f64 {
    phase.current_alpha(trained_samples)
}

/// Per-request alignment: the phase dynamics plus the request's jitter,
/// clamped to `[0, 1]`.
pub fn jittered_alpha(phase: &PhaseSpec, trained_samples: f64, jitter: f64) -> f64 {
    (phase.current_alpha(trained_samples) + jitter).clamp(0.0, 1.0)
}

/// On-disk workload description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub phases: Vec<PhaseSpec>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl WorkloadConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.phases.is_empty() {
            problems.push("workload has no phases".to_string());
        }
        for (i, p) in self.phases.iter().enumerate() {
            p.problems(i, &mut problems);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }

    /// Bundled workload configs by name (`langshift4`, `sharegpt`, ...).
    pub fn bundled(name: &str) -> Result<Self> {
        BUNDLED_WORKLOADS
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| SimError::Config(format!("no bundled workload named {name:?}")))
            .and_then(|(_, text)| Self::from_json(text))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED_WORKLOADS.iter().map(|(n, _)| *n)
    }

    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::bundled(spec) {
            Ok(w) => Ok(w),
            Err(_) => Self::load(spec),
        }
    }
}

const BUNDLED_WORKLOADS: [(&str, &str); 5] = [
    (
        "langshift4",
        include_str!("../data/workloads/langshift4.json"),
    ),
    ("sharegpt", include_str!("../data/workloads/sharegpt.json")),
    ("science", include_str!("../data/workloads/science.json")),
    (
        "numinamath",
        include_str!("../data/workloads/numinamath.json"),
    ),
    (
        "evolcodealpaca",
        include_str!("../data/workloads/evolcodealpaca.json"),
    ),
];

/// A pre-drawn request: output length and alignment jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestTemplate {
    pub output_tokens: u32,
    pub alpha_jitter: f64,
}

/// Fully materialized workload; identical seeds give identical scripts.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadScript {
    phases: Vec<PhaseSpec>,
    rng_seed: u64,
    requests: Vec<Vec<RequestTemplate>>,
}

/// Validates `config` and draws every request's output length and jitter.
///
/// Output lengths are geometric on `{1, 2, ...}` with the phase's mean.
pub fn build_script(config: &WorkloadConfig) -> Result<WorkloadScript> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut requests = Vec::with_capacity(config.phases.len());
    for phase in &config.phases {
        let lengths = Geometric::new(1.0 / f64::from(phase.mean_output_tokens))
            .map_err(|e| SimError::Config(e.to_string()))?;
        let jitter = if phase.alpha_noise_sd > 0.0 {
            Some(
                Normal::new(0.0, phase.alpha_noise_sd)
                    .map_err(|e| SimError::Config(e.to_string()))?,
            )
        } else {
            None
        };
        let templates = (0..phase.num_requests)
            .map(|_| {
                let extra = lengths.sample(&mut rng).min(u64::from(u32::MAX - 1)) as u32;
                RequestTemplate {
                    output_tokens: extra + 1,
                    alpha_jitter: jitter.map_or(0.0, |d| d.sample(&mut rng)),
                }
            })
            .collect();
        requests.push(templates);
    }
    Ok(WorkloadScript {
        phases: config.phases.clone(),
        rng_seed: config.rng_seed,
        requests,
    })
}

impl WorkloadScript {
    pub fn phases(&self) -> &[PhaseSpec] {
        &self.phases
    }

    pub fn phase(&self, idx: usize) -> &PhaseSpec {
        &self.phases[idx]
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn requests(&self, phase: usize) -> &[RequestTemplate] {
        &self.requests[phase]
    }

    pub fn total_requests(&self) -> usize {
        self.requests.iter().map(Vec::len).sum()
    }

    pub fn total_output_tokens(&self) -> u64 {
        self.requests
            .iter()
            .flatten()
            .map(|r| u64::from(r.output_tokens))
            .sum()
    }

    pub fn cursor(&self) -> ScriptCursor<'_> {
        ScriptCursor {
            script: self,
            phase: 0,
            next_in_phase: 0,
            next_id: 0,
        }
    }
}

/// An in-flight request.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: u64,
    pub phase: usize,
    pub output_tokens: u32,
    pub output_tokens_remaining: u32,
    pub alpha_jitter: f64,
    /// Sum of sampled acceptance lengths across this request's steps.
    pub accept_total: u64,
    /// Number of decode steps this request took part in.
    pub steps: u32,
}

impl Request {
    pub fn is_done(&self) -> bool {
        self.output_tokens_remaining == 0
    }

    pub fn mean_accept_length(&self) -> Option<f64> {
        (self.steps > 0).then(|| self.accept_total as f64 / f64::from(self.steps))
    }
}

/// Single-owner admission cursor over a script.
///
/// Admission is closed-loop: free batch slots are refilled immediately.
/// When the current phase runs out of requests, admission moves on to the
/// next phase.
#[derive(Debug, Clone)]
pub struct ScriptCursor<'a> {
    script: &'a WorkloadScript,
    phase: usize,
    next_in_phase: usize,
    next_id: u64,
}

impl<'a> ScriptCursor<'a> {
    /// Phase currently admitting requests (the last phase once exhausted).
    pub fn current_phase(&self) -> usize {
        self.phase.min(self.script.phases.len() - 1)
    }

    pub fn is_exhausted(&self) -> bool {
        self.phase >= self.script.phases.len()
    }

    fn skip_empty_phases(&mut self) {
        while self.phase < self.script.phases.len()
            && self.next_in_phase >= self.script.requests[self.phase].len()
        {
            self.phase += 1;
            self.next_in_phase = 0;
        }
    }

    fn pop(&mut self) -> Option<Request> {
        self.skip_empty_phases();
        let template = *self
            .script
            .requests
            .get(self.phase)?
            .get(self.next_in_phase)?;
        let req = Request {
            id: self.next_id,
            phase: self.phase,
            output_tokens: template.output_tokens,
            output_tokens_remaining: template.output_tokens,
            alpha_jitter: template.alpha_jitter,
            accept_total: 0,
            steps: 0,
        };
        self.next_id += 1;
        self.next_in_phase += 1;
        self.skip_empty_phases();
        Some(req)
    }

    /// Tops `batch` up to the admitting phase's concurrency.
    pub fn refill(&mut self, batch: &mut Vec<Request>) {
        loop {
            if self.is_exhausted() {
                return;
            }
            let target = self.script.phases[self.current_phase()].concurrency as usize;
            if batch.len() >= target {
                return;
            }
            match self.pop() {
                Some(r) => batch.push(r),
                None => return,
            }
        }
    }

    /// A fresh batch of at most the admitting phase's concurrency; empty once
    /// the script is exhausted.
    pub fn next_batch(&mut self) -> Vec<Request> {
        let mut batch = Vec::new();
        self.refill(&mut batch);
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn phase(name: &str, n: u32, b: u32) -> PhaseSpec {
        PhaseSpec {
            name: name.into(),
            num_requests: n,
            concurrency: b,
            mean_output_tokens: 50,
            alpha_start: 0.3,
            alpha_ceiling: 0.7,
            tau_samples: 100.0,
            alpha_noise_sd: 0.05,
        }
    }

    #[test]
    fn empty_phase_rejected() {
        let cfg = WorkloadConfig {
            phases: vec![phase("only", 0, 4)],
            rng_seed: 1,
        };
        assert!(matches!(build_script(&cfg), Err(SimError::Validation(_))));
        let none = WorkloadConfig {
            phases: vec![],
            rng_seed: 1,
        };
        assert!(build_script(&none).is_err());
    }

    #[test]
    fn validation_lists_all_violations() {
        let mut p = phase("x", 0, 0);
        p.alpha_start = 0.9;
        p.alpha_ceiling = 0.5;
        p.tau_samples = 0.0;
        let cfg = WorkloadConfig {
            phases: vec![p],
            rng_seed: 0,
        };
        let Err(SimError::Validation(problems)) = cfg.validate() else {
            panic!("expected validation error")
        };
        assert_eq!(problems.len(), 4, "{problems:?}");
    }

    #[test]
    fn langshift_has_four_ordered_phases() {
        let cfg = WorkloadConfig::bundled("langshift4").unwrap();
        let script = build_script(&cfg).unwrap();
        let names: Vec<_> = script.phases().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["korean", "arabic", "chinese", "french"]);
    }

    #[test]
    fn all_bundled_workloads_validate() {
        for name in WorkloadConfig::bundled_names() {
            build_script(&WorkloadConfig::bundled(name).unwrap()).unwrap();
        }
    }

    #[test]
    fn current_alpha_examples() {
        let mut p = phase("p", 1, 1);
        p.alpha_start = 0.36;
        p.alpha_ceiling = 0.55;
        p.tau_samples = 5000.0;
        assert_eq!(p.current_alpha(0.0), 0.36);
        assert!((p.current_alpha(1e9) - 0.55).abs() < 1e-12);
        // 0.55 - 0.19 / e
        assert!((p.current_alpha(5000.0) - 0.480_102_906).abs() < 1e-8);
    }

    #[test]
    fn jitter_is_clamped() {
        let p = phase("p", 1, 1);
        assert_eq!(jittered_alpha(&p, 0.0, 5.0), 1.0);
        assert_eq!(jittered_alpha(&p, 0.0, -5.0), 0.0);
    }

    #[test]
    fn cursor_keeps_batch_full_and_moves_phases() {
        let cfg = WorkloadConfig {
            phases: vec![phase("a", 5, 3), phase("b", 4, 2)],
            rng_seed: 9,
        };
        let script = build_script(&cfg).unwrap();
        let mut cur = script.cursor();
        let mut batch = cur.next_batch();
        assert_eq!(batch.len(), 3);
        assert!(batch.iter().all(|r| r.phase == 0));
        // Complete two requests; two refills from phase a.
        batch.drain(..2);
        cur.refill(&mut batch);
        assert_eq!(batch.len(), 3);
        assert_eq!(cur.current_phase(), 1);
        // Phase b admits only up to its own concurrency.
        batch.clear();
        cur.refill(&mut batch);
        assert_eq!(batch.len(), 2);
        assert!(batch.iter().all(|r| r.phase == 1));
        batch.clear();
        cur.refill(&mut batch);
        assert_eq!(batch.len(), 2);
        assert!(cur.is_exhausted());
        batch.clear();
        assert!(cur.next_batch().is_empty());
        assert_eq!(script.total_requests(), 9);
    }

    #[test]
    fn output_lengths_have_configured_mean() {
        let mut p = phase("p", 200_000, 1);
        p.mean_output_tokens = 40;
        let script = build_script(&WorkloadConfig {
            phases: vec![p],
            rng_seed: 5,
        })
        .unwrap();
        let mean = script.total_output_tokens() as f64 / script.total_requests() as f64;
        assert!((mean - 40.0).abs() < 0.5, "{mean}");
        assert!(script.requests(0).iter().all(|r| r.output_tokens >= 1));
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = WorkloadConfig::from_json(r#"{"phases": [], "bogus": 1}"#).unwrap_err();
        assert!(err.is_config_error());
    }

    proptest! {
        #[test]
        fn current_alpha_monotone_and_bounded(
            start in 0.0f64..1.0, extra in 0.0f64..1.0, tau in 1.0f64..1e5,
            n in 0.0f64..1e6, dn in 0.0f64..1e4,
        ) {
            let ceiling = start + (1.0 - start) * extra;
            let mut p = phase("p", 1, 1);
            p.alpha_start = start;
            p.alpha_ceiling = ceiling;
            p.tau_samples = tau;
            let a = p.current_alpha(n);
            prop_assert!(a >= start - 1e-12 && a <= ceiling + 1e-12);
            prop_assert!(p.current_alpha(n + dn) >= a);
        }

        #[test]
        fn same_seed_same_script(seed in any::<u64>()) {
            let cfg = WorkloadConfig { phases: vec![phase("a", 50, 4), phase("b", 20, 2)], rng_seed: seed };
            prop_assert_eq!(build_script(&cfg).unwrap(), build_script(&cfg).unwrap());
        }
    }
}
