//! Closed-form performance model for speculative decoding.
//!
//! The model predicts the speedup of draft-then-verify decoding over plain
//! autoregressive decoding from three ingredients: the per-token acceptance
//! rate `alpha`, the number of drafted candidates `gamma`, and a profiled
//! target-model latency curve `T(n)` together with a static draft-step
//! latency `D0`.
//!
//! ```text
//! E[l]       = (1 - alpha^(gamma+1)) / (1 - alpha)
//! beta(b)    = T(b (gamma+1)) / T(b)
//! c(b)       = D0 / T(b)
//! speedup(b) = E[l] / (c(b) gamma + beta(b))
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::par::{self, Execution};

/// Candidate tokens per speculation step used throughout the evaluation.
pub const DEFAULT_GAMMA: u32 = 3;

/// Extra predicted speedup required before speculation is switched on.
pub const DEFAULT_HYSTERESIS_MARGIN: f64 = 0.02;

/// Absolute tolerance of every bisection in this module (well inside 1e-6).
pub const BISECTION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub n: u32,
    pub latency_ms: f64,
}

/// Profiled target-model latency `T(n)` plus the static draft latency `D0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    model_name: String,
    points: Vec<LatencyPoint>,
    d0_ms: f64,
    hidden_dim: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileMeta {
    model_name: String,
    d0_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_dim: Option<u32>,
}

/// Bundled profiles: (file stem, csv, sidecar metadata).
const BUNDLED: [(&str, &str, &str); 4] = [
    (
        "gpt-oss-120b",
        include_str!("../data/profiles/gpt-oss-120b.csv"),
        include_str!("../data/profiles/gpt-oss-120b.meta.json"),
    ),
    (
        "qwen3-235b-a22b",
        include_str!("../data/profiles/qwen3-235b-a22b.csv"),
        include_str!("../data/profiles/qwen3-235b-a22b.meta.json"),
    ),
    (
        "llama-4-scout-17b-16e",
        include_str!("../data/profiles/llama-4-scout-17b-16e.csv"),
        include_str!("../data/profiles/llama-4-scout-17b-16e.meta.json"),
    ),
    (
        "llama-3.3-70b-instruct",
        include_str!("../data/profiles/llama-3.3-70b-instruct.csv"),
        include_str!("../data/profiles/llama-3.3-70b-instruct.meta.json"),
    ),
];

impl LatencyProfile {
    /// Builds a profile, rejecting it unless batch sizes are strictly
    /// increasing from 1 or more, latencies are positive and non-decreasing,
    /// and `d0_ms` is finite and non-negative.
    ///
    /// A zero draft latency is accepted and models a free draft.
    pub fn new(
        model_name: impl Into<String>,
        points: Vec<LatencyPoint>,
        d0_ms: f64,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if points.is_empty() {
            problems.push("profile has no points".to_string());
        }
        for (i, p) in points.iter().enumerate() {
            if p.n == 0 {
                problems.push(format!("point {i}: batch size must be >= 1"));
            }
            if !(p.latency_ms.is_finite() && p.latency_ms > 0.0) {
                problems.push(format!(
                    "point {i}: latency must be > 0, got {}",
                    p.latency_ms
                ));
            }
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].n <= w[0].n {
                problems.push(format!(
                    "points {i}..{}: batch sizes not strictly increasing ({} then {})",
                    i + 1,
                    w[0].n,
                    w[1].n
                ));
            }
            if w[1].latency_ms < w[0].latency_ms {
                problems.push(format!(
                    "points {i}..{}: latency decreases ({} then {})",
                    i + 1,
                    w[0].latency_ms,
                    w[1].latency_ms
                ));
            }
        }
        if !(d0_ms.is_finite() && d0_ms >= 0.0) {
            problems.push(format!("d0_ms must be >= 0, got {d0_ms}"));
        }
        if !problems.is_empty() {
            return Err(SimError::InvalidProfile(problems.join("; ")));
        }
        Ok(Self {
            model_name: model_name.into(),
            points,
            d0_ms,
            hidden_dim: None,
        })
    }

    /// A perfectly memory-bound profile: `T(n) = latency_ms` for every n.
    pub fn flat(latency_ms: f64, d0_ms: f64) -> Result<Self> {
        Self::new(
            "flat",
            vec![
                LatencyPoint { n: 1, latency_ms },
                LatencyPoint { n: 2, latency_ms },
            ],
            d0_ms,
        )
    }

    pub fn with_hidden_dim(mut self, hidden_dim: u32) -> Self {
        self.hidden_dim = Some(hidden_dim);
        self
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn points(&self) -> &[LatencyPoint] {
        &self.points
    }

    pub fn batch_sizes(&self) -> impl Iterator<Item = u32> + '_ {
        self.points.iter().map(|p| p.n)
    }

    pub fn d0_ms(&self) -> f64 {
        self.d0_ms
    }

    pub fn hidden_dim(&self) -> Option<u32> {
        self.hidden_dim
    }

    /// Names accepted by [`LatencyProfile::bundled`].
    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(name, _, _)| *name)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, csv_text, meta_text) = BUNDLED
            .iter()
            .find(|(stem, _, meta)| {
                stem.eq_ignore_ascii_case(name)
                    || serde_json::from_str::<ProfileMeta>(meta)
                        .map(|m| m.model_name.eq_ignore_ascii_case(name))
                        .unwrap_or(false)
            })
            .ok_or_else(|| {
                SimError::InvalidProfile(format!("no bundled profile named {name:?}"))
            })?;
        let meta: ProfileMeta = serde_json::from_str(meta_text)?;
        Self::from_parts(csv_text.as_bytes(), meta)
    }

    pub fn all_bundled() -> Vec<Self> {
        Self::bundled_names()
            .map(|n| Self::bundled(n).expect("bundled profiles are valid"))
            .collect()
    }

    /// Resolves `spec` as a bundled profile name first, then as a CSV path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::bundled(spec) {
            Ok(p) => Ok(p),
            Err(_) if Path::new(spec).exists() => Self::load(spec),
            Err(_) => Err(SimError::InvalidProfile(format!(
                "{spec:?} is neither a bundled profile ({}) nor an existing file",
                Self::bundled_names().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Path of the metadata sidecar that accompanies a profile CSV.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    /// Loads `<stem>.csv` and its `<stem>.meta.json` sidecar.
    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let meta_path = Self::sidecar_path(csv_path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| SimError::io(&meta_path, e))?;
        let meta: ProfileMeta = serde_json::from_str(&meta_text)
            .map_err(|e| SimError::InvalidProfile(format!("{}: {e}", meta_path.display())))?;
        let csv_bytes = fs::read(csv_path).map_err(|e| SimError::io(csv_path, e))?;
        Self::from_parts(csv_bytes.as_slice(), meta)
    }

    fn from_parts(csv_data: &[u8], meta: ProfileMeta) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(csv_data);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["n", "latency_ms"] {
            return Err(SimError::InvalidProfile(format!(
                "expected header `n,latency_ms`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let points = reader
            .deserialize::<LatencyPoint>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| SimError::InvalidProfile(e.to_string()))?;
        let mut profile = Self::new(meta.model_name, points, meta.d0_ms)?;
        profile.hidden_dim = meta.hidden_dim;
        Ok(profile)
    }

    /// Serializes the latency table in the bundled CSV layout.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("n,latency_ms\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.n, p.latency_ms));
        }
        out
    }

    pub fn to_meta_json(&self) -> String {
        let meta = ProfileMeta {
            model_name: self.model_name.clone(),
            d0_ms: self.d0_ms,
            hidden_dim: self.hidden_dim,
        };
        let mut s = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        s.push('\n');
        s
    }

    /// Writes `<csv_path>` and its sidecar.
    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        fs::write(csv_path, self.to_csv_string()).map_err(|e| SimError::io(csv_path, e))?;
        let meta_path = Self::sidecar_path(csv_path);
        fs::write(&meta_path, self.to_meta_json()).map_err(|e| SimError::io(&meta_path, e))
    }

    /// Target latency `T(n)` in milliseconds.
    ///
    /// Exact at profiled points, piecewise linear in `n` between them, clamped
    /// to `T(n_min)` below the grid and extrapolated with the last segment's
    /// slope above it.
    pub fn latency(&self, n: u32) -> Result<f64> {
        self.latency_at(f64::from(n))
    }

    fn latency_at(&self, n: f64) -> Result<f64> {
        if n < 1.0 {
            return Err(SimError::domain(format!(
                "batch size must be >= 1, got {n}"
            )));
        }
        let pts = &self.points;
        let first = pts[0];
        if n <= f64::from(first.n) {
            return Ok(first.latency_ms);
        }
        // Past the first point interpolation is unavoidable.
        if pts.len() < 2 {
            if n == f64::from(first.n) {
                return Ok(first.latency_ms);
            }
            return Err(SimError::InvalidProfile(format!(
                "profile {} has a single point; cannot interpolate at n={n}",
                self.model_name
            )));
        }
        let idx = pts.partition_point(|p| f64::from(p.n) < n);
        if idx < pts.len() && f64::from(pts[idx].n) == n {
            return Ok(pts[idx].latency_ms);
        }
        let (lo, hi) = if idx >= pts.len() {
            (pts[pts.len() - 2], pts[pts.len() - 1])
        } else {
            (pts[idx - 1], pts[idx])
        };
        let slope = (hi.latency_ms - lo.latency_ms) / f64::from(hi.n - lo.n);
        Ok(lo.latency_ms + slope * (n - f64::from(lo.n)))
    }
}

/// Free-function form of [`LatencyProfile::latency`].
pub fn lookup_latency(profile: &LatencyProfile, n: u32) -> Result<f64> {
    profile.latency(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeculationConfig {
    pub gamma: u32,
    pub hysteresis_margin: f64,
}

impl Default for SpeculationConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            hysteresis_margin: DEFAULT_HYSTERESIS_MARGIN,
        }
    }
}

impl SpeculationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.gamma < 1 {
            problems.push("spec.gamma must be >= 1".to_string());
        }
        if !(self.hysteresis_margin.is_finite() && self.hysteresis_margin >= 0.0) {
            problems.push("spec.hysteresis_margin must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
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

fn check_gamma(gamma: u32) -> Result<()> {
    if gamma >= 1 {
        Ok(())
    } else {
        Err(SimError::domain("gamma must be >= 1"))
    }
}

/// Expected tokens gained per speculation step, bonus token included.
pub fn expected_accept_length(alpha: f64, gamma: u32) -> Result<f64> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    Ok(accept_length_unchecked(alpha, gamma))
}

fn accept_length_unchecked(alpha: f64, gamma: u32) -> f64 {
    if alpha >= 1.0 {
        return f64::from(gamma) + 1.0;
    }
    // Geometric partial sum; numerically stable near alpha = 1 unlike the
    // closed-form quotient.
    let mut term = 1.0;
    let mut sum = 1.0;
    for _ in 0..gamma {
        term *= alpha;
        sum += term;
    }
    sum
}

/// Draws one acceptance length from `{1, ..., gamma + 1}`.
///
/// Each of the `gamma` drafted tokens is accepted independently with
/// probability `alpha` until the first rejection, so
/// `P(k) = alpha^(k-1) (1 - alpha)` for `k <= gamma` and
/// `P(gamma + 1) = alpha^gamma`.
pub fn sample_accept_length<R: Rng + ?Sized>(rng: &mut R, alpha: f64, gamma: u32) -> Result<u32> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    Ok(sample_unchecked(rng, alpha, gamma))
}

#[inline]
pub(crate) fn sample_unchecked<R: Rng + ?Sized>(rng: &mut R, alpha: f64, gamma: u32) -> u32 {
    let mut k = 1;
    while k <= gamma && rng.random::<f64>() < alpha {
        k += 1;
    }
    k
}

const MC_CHUNK: u64 = 1 << 16;

/// Monte Carlo mean of [`sample_accept_length`] over `draws` samples.
///
/// Draws are split into fixed chunks, each with its own ChaCha stream derived
/// from `seed`, so sequential and parallel execution give identical results.
pub fn monte_carlo_accept_length(
    alpha: f64,
    gamma: u32,
    draws: u64,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    if draws == 0 {
        return Err(SimError::domain("draws must be > 0"));
    }
    let chunks = draws.div_ceil(MC_CHUNK);
    let sums = par::map_indices(exec, chunks as usize, |chunk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        let len = MC_CHUNK.min(draws - chunk as u64 * MC_CHUNK);
        (0..len)
            .map(|_| u64::from(sample_unchecked(&mut rng, alpha, gamma)))
            .sum::<u64>()
    });
    Ok(sums.iter().sum::<u64>() as f64 / draws as f64)
}

/// Verification latency ratio `T(b (gamma+1)) / T(b)`.
pub fn beta_ratio(profile: &LatencyProfile, b: u32, gamma: u32) -> Result<f64> {
    check_gamma(gamma)?;
    let verify = profile.latency_at(f64::from(b) * (f64::from(gamma) + 1.0))?;
    Ok(verify / profile.latency(b)?)
}

/// Draft cost ratio `D0 / T(b)`.
pub fn c_ratio(profile: &LatencyProfile, b: u32) -> Result<f64> {
    Ok(profile.d0_ms() / profile.latency(b)?)
}

/// Memory-bound speedup with a fixed draft cost ratio `c`.
pub fn theoretical_speedup(alpha: f64, gamma: u32, c: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_gamma(gamma)?;
    if alpha >= 1.0 {
        return Err(SimError::domain("theoretical speedup requires alpha < 1"));
    }
    if !(c.is_finite() && c >= 0.0) {
        return Err(SimError::domain(format!("c must be >= 0, got {c}")));
    }
    Ok(accept_length_unchecked(alpha, gamma) / (c * f64::from(gamma) + 1.0))
}

/// Per-step cost of speculation relative to one plain decode step:
/// `c(b) gamma + beta(b)`.
pub fn speculation_cost_ratio(profile: &LatencyProfile, gamma: u32, b: u32) -> Result<f64> {
    Ok(c_ratio(profile, b)? * f64::from(gamma) + beta_ratio(profile, b, gamma)?)
}

/// Batch-aware speedup prediction. `alpha = 1` is accepted as the limit case.
pub fn practical_speedup(profile: &LatencyProfile, alpha: f64, gamma: u32, b: u32) -> Result<f64> {
    let gain = expected_accept_length(alpha, gamma)?;
    Ok(gain / speculation_cost_ratio(profile, gamma, b)?)
}

/// Minimum acceptance rate at which speculation breaks even.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "alpha", rename_all = "snake_case")]
pub enum BreakEven {
    /// Speculation pays off at any acceptance rate at or above this one.
    Alpha(f64),
    /// Even perfect acceptance cannot cover the verification cost.
    NeverBeneficial,
}

impl BreakEven {
    pub fn alpha(self) -> Option<f64> {
        match self {
            BreakEven::Alpha(a) => Some(a),
            BreakEven::NeverBeneficial => None,
        }
    }
}

pub fn min_acceptance_for_gain(profile: &LatencyProfile, gamma: u32, b: u32) -> Result<BreakEven> {
    check_gamma(gamma)?;
    let rhs = speculation_cost_ratio(profile, gamma, b)?;
    if rhs <= 1.0 {
        return Ok(BreakEven::Alpha(0.0));
    }
    if rhs > f64::from(gamma) + 1.0 {
        return Ok(BreakEven::NeverBeneficial);
    }
    Ok(BreakEven::Alpha(invert_accept_length(rhs, gamma)))
}

/// Acceptance rate whose expected acceptance length is `ell`.
pub fn alpha_from_accept_length(ell: f64, gamma: u32) -> Result<f64> {
    check_gamma(gamma)?;
    let max = f64::from(gamma) + 1.0;
    if !(1.0..=max).contains(&ell) {
        return Err(SimError::domain(format!(
            "accept length must be in [1, {max}], got {ell}"
        )));
    }
    Ok(invert_accept_length(ell, gamma))
}

fn invert_accept_length(ell: f64, gamma: u32) -> f64 {
    if ell <= 1.0 {
        return 0.0;
    }
    if ell >= f64::from(gamma) + 1.0 {
        return 1.0;
    }
    bisect_increasing(
        |a| accept_length_unchecked(a, gamma) - ell,
        0.0,
        1.0,
        BISECTION_TOL,
    )
}

/// Root of an increasing function on `[lo, hi]` with `f(lo) <= 0 <= f(hi)`.
pub(crate) fn bisect_increasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
