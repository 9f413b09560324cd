//! Splitting a mixed GPU cluster between inference and draft training.
//!
//! Throughput is compared against a baseline where every GPU serves
//! inference without speculation. Only the inference share of the split
//! cluster benefits from the speculative speedup `s`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::training::TrainerProfile;

const BUNDLED_GPU_PROFILES: &str = include_str!("../data/gpu_profiles.csv");

/// Upper bound on class-level partitions visited by [`best_assignment`].
pub const MAX_ENUMERATED_ASSIGNMENTS: u64 = 50_000_000;

/// Per-GPU throughputs relative to an MI250.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuClassProfile {
    pub name: String,
    pub inference_rel: f64,
    pub training_rel: f64,
}

impl GpuClassProfile {
    pub fn new(name: impl Into<String>, inference_rel: f64, training_rel: f64) -> Result<Self> {
        let p = Self {
            name: name.into(),
            inference_rel,
            training_rel,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.name.trim().is_empty() {
            problems.push("GPU class name is empty".to_string());
        }
        if !(self.inference_rel.is_finite() && self.inference_rel > 0.0) {
            problems.push(format!("{}: inference_rel must be > 0", self.name));
        }
        if !(self.training_rel.is_finite() && self.training_rel > 0.0) {
            problems.push(format!("{}: training_rel must be > 0", self.name));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(problems))
        }
    }
}

/// A set of GPU classes, usually read from `gpu_profiles.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuCatalog {
    pub classes: Vec<GpuClassProfile>,
}

impl GpuCatalog {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_GPU_PROFILES).expect("bundled GPU profiles are valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != ["name", "inference_rel", "training_rel"] {
            return Err(SimError::Config(format!(
                "GPU profile header must be name,inference_rel,training_rel, got {}",
                header.join(",")
            )));
        }
        let mut classes: Vec<GpuClassProfile> = Vec::new();
        let mut problems = Vec::new();
        for row in rdr.deserialize() {
            let p: GpuClassProfile = row?;
            if let Err(SimError::Validation(v)) = p.validate() {
                problems.extend(v);
            }
            if classes.iter().any(|c| c.name == p.name) {
                problems.push(format!("duplicate GPU class {}", p.name));
            }
            classes.push(p);
        }
        if classes.is_empty() {
            problems.push("GPU profile file has no rows".to_string());
        }
        if !problems.is_empty() {
            return Err(SimError::Validation(problems));
        }
        Ok(Self { classes })
    }

    pub fn get(&self, name: &str) -> Result<&GpuClassProfile> {
        self.classes
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                let known: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
                SimError::Config(format!(
                    "unknown GPU class {name:?}; known: {}",
                    known.join(", ")
                ))
            })
    }
}

/// `count` GPUs of one class, requested as e.g. `H100:8`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub class: String,
    pub count: u32,
}

impl FromStr for ClusterEntry {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        let (class, count) = s
            .split_once(':')
            .ok_or_else(|| SimError::Config(format!("cluster entry {s:?} is not CLASS:COUNT")))?;
        let count = count
            .trim()
            .parse()
            .map_err(|_| SimError::Config(format!("cluster entry {s:?} has a bad count")))?;
        Ok(Self {
            class: class.trim().to_string(),
            count,
        })
    }
}

/// Parses `H100:8,MI250:4`.
pub fn parse_cluster(spec: &str) -> Result<Vec<ClusterEntry>> {
    let entries: Vec<ClusterEntry> = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if entries.is_empty() {
        return Err(SimError::Config("cluster is empty".into()));
    }
    Ok(entries)
}

/// How many GPUs of one class go to each side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAllocation {
    pub class: GpuClassProfile,
    pub inference: u32,
    pub training: u32,
}

/// A full inference/training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub allocations: Vec<ClassAllocation>,
}

impl ClusterSpec {
    /// Resolves entries against the catalog, sending every GPU of the
    /// classes in `training_classes` to training and the rest to inference.
    pub fn from_entries(
        catalog: &GpuCatalog,
        entries: &[ClusterEntry],
        training_classes: &[String],
    ) -> Result<Self> {
        for t in training_classes {
            if !entries.iter().any(|e| e.class.eq_ignore_ascii_case(t)) {
                return Err(SimError::Config(format!(
                    "training class {t} is not in the cluster"
                )));
            }
        }
        let allocations = entries
            .iter()
            .map(|e| {
                let class = catalog.get(&e.class)?.clone();
                let trains = training_classes
                    .iter()
                    .any(|t| t.eq_ignore_ascii_case(&e.class));
                Ok(ClassAllocation {
                    class,
                    inference: if trains { 0 } else { e.count },
                    training: if trains { e.count } else { 0 },
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { allocations })
    }

    pub fn inference_capacity(&self) -> f64 {
        self.allocations
            .iter()
            .map(|a| a.class.inference_rel * f64::from(a.inference))
            .sum()
    }

    /// Inference capacity if every GPU served.
    pub fn total_inference_capacity(&self) -> f64 {
        self.allocations
            .iter()
            .map(|a| a.class.inference_rel * f64::from(a.inference + a.training))
            .sum()
    }

    /// Training capacity in MI250-equivalents.
    pub fn training_capacity(&self) -> f64 {
        self.allocations
            .iter()
            .map(|a| a.class.training_rel * f64::from(a.training))
            .sum()
    }

    pub fn training_gpus(&self) -> u32 {
        self.allocations.iter().map(|a| a.training).sum()
    }

    fn check(&self) -> Result<()> {
        for a in &self.allocations {
            a.class.validate()?;
        }
        if self.inference_capacity() <= 0.0 {
            return Err(SimError::EmptyInferenceSet);
        }
        Ok(())
    }
}

impl fmt::Display for ClusterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |train: bool| {
            self.allocations
                .iter()
                .filter_map(|a| {
                    let n = if train { a.training } else { a.inference };
                    (n > 0).then(|| format!("{}:{n}", a.class.name))
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "inference [{}] training [{}]", side(false), side(true))
    }
}

/// Throughput of the split cluster at speculative speedup `s`, relative to
/// all GPUs serving without speculation.
pub fn relative_throughput(cluster: &ClusterSpec, s: f64) -> Result<f64> {
    cluster.check()?;
    if !(s.is_finite() && s > 0.0) {
        return Err(SimError::domain(format!(
            "speedup must be positive, got {s}"
        )));
    }
    Ok(cluster.inference_capacity() * s / cluster.total_inference_capacity())
}

/// Speedup at which the split cluster matches the baseline.
pub fn breakeven_speedup(cluster: &ClusterSpec) -> Result<f64> {
    cluster.check()?;
    Ok(cluster.total_inference_capacity() / cluster.inference_capacity())
}

/// Training throughput required from the training side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingDemand {
    pub samples_per_hour: f64,
    /// Samples per hour delivered by one MI250-equivalent of training
    /// capacity.
    pub samples_per_hour_per_unit: f64,
}

impl TrainingDemand {
    /// Demand with the per-unit rate taken from the default trainer profile.
    pub fn new(samples_per_hour: f64) -> Self {
        Self {
            samples_per_hour,
            samples_per_hour_per_unit: TrainerProfile::default().samples_per_hour,
        }
    }

    pub fn satisfied_by(&self, cluster: &ClusterSpec) -> bool {
        cluster.training_capacity() * self.samples_per_hour_per_unit >= self.samples_per_hour
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub cluster: ClusterSpec,
    pub relative_throughput: f64,
    pub breakeven_speedup: f64,
}

/// Best class-level split at speedup `s`, optionally subject to a training
/// demand. Ties go to the split with fewer training GPUs.
pub fn best_assignment(
    catalog: &GpuCatalog,
    entries: &[ClusterEntry],
    s: f64,
    demand: Option<&TrainingDemand>,
) -> Result<Assignment> {
    if !(s.is_finite() && s > 0.0) {
        return Err(SimError::domain(format!(
            "speedup must be positive, got {s}"
        )));
    }
    if let Some(d) = demand {
        if !(d.samples_per_hour.is_finite() && d.samples_per_hour >= 0.0)
            || !(d.samples_per_hour_per_unit.is_finite() && d.samples_per_hour_per_unit > 0.0)
        {
            return Err(SimError::domain(
                "training demand and per-unit rate must be non-negative and finite",
            ));
        }
    }
    let classes: Vec<GpuClassProfile> = entries
        .iter()
        .map(|e| catalog.get(&e.class).cloned())
        .collect::<Result<_>>()?;
    let counts: Vec<u32> = entries.iter().map(|e| e.count).collect();
    let space = counts
        .iter()
        .try_fold(1u64, |acc, &c| acc.checked_mul(u64::from(c) + 1))
        .filter(|&n| n <= MAX_ENUMERATED_ASSIGNMENTS)
        .ok_or_else(|| SimError::domain("cluster too large to enumerate"))?;

    let mut cluster = ClusterSpec {
        allocations: classes
            .into_iter()
            .zip(&counts)
            .map(|(class, &count)| ClassAllocation {
                class,
                inference: count,
                training: 0,
            })
            .collect(),
    };
    let mut best: Option<(f64, u32, ClusterSpec)> = None;
    let mut train = vec![0u32; counts.len()];
    for _ in 0..space {
        for (a, (&t, &c)) in cluster
            .allocations
            .iter_mut()
            .zip(train.iter().zip(&counts))
        {
            a.training = t;
            a.inference = c - t;
        }
        let feasible =
            cluster.inference_capacity() > 0.0 && demand.is_none_or(|d| d.satisfied_by(&cluster));
        if feasible {
            let rel = relative_throughput(&cluster, s)?;
            let gpus = cluster.training_gpus();
            let better = match &best {
                None => true,
                Some((r, g, _)) => rel > *r || (rel == *r && gpus < *g),
            };
            if better {
                best = Some((rel, gpus, cluster.clone()));
            }
        }
        // Odometer increment over per-class training counts.
        for (t, &c) in train.iter_mut().zip(&counts) {
            if *t < c {
                *t += 1;
                break;
            }
            *t = 0;
        }
    }
    let (rel, _, cluster) = best.ok_or_else(|| {
        SimError::NoFeasibleAssignment(match demand {
            Some(d) => format!(
                "training demand of {} samples/h exceeds what any split can supply while keeping an inference GPU",
                d.samples_per_hour
            ),
            None => "cluster has no GPUs".to_string(),
        })
    })?;
    let breakeven = breakeven_speedup(&cluster)?;
    Ok(Assignment {
        cluster,
        relative_throughput: rel,
        breakeven_speedup: breakeven,
    })
}
