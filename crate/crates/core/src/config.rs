//! JSON run configuration.
//!
//! `profile` and `workload` name either a bundled asset or a file. Relative
//! file paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::ControllerParams;
use crate::error::{Result, SimError};
use crate::perf_model::{LatencyProfile, SpeculationConfig};
use crate::serving::{EngineConfig, RunMode, SignalConfig, SignalGeometry};
use crate::training::TrainerProfile;
use crate::workload::{build_script, WorkloadConfig, WorkloadScript};

const BUNDLED_RUN_CONFIGS: [(&str, &str); 1] = [(
    "langshift4_run",
    include_str!("../data/configs/langshift4_run.json"),
)];

fn default_true() -> bool {
    true
}

fn default_window() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub workload: String,
    #[serde(default)]
    pub spec: SpeculationConfig,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub trainer: TrainerProfile,
    /// Defaults to the profile's hidden size with 3 tapped layers in bf16.
    #[serde(default)]
    pub geometry: Option<SignalGeometry>,
    #[serde(default)]
    pub signals: SignalConfig,
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub initial_speculation: bool,
    #[serde(default)]
    pub reference_alpha: Option<f64>,
    #[serde(default = "default_window")]
    pub throughput_window: usize,
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

/// A config with every referenced asset loaded and validated.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub profile: LatencyProfile,
    pub workload: WorkloadConfig,
    pub script: WorkloadScript,
    pub engine: EngineConfig,
}

impl RunConfig {
    pub fn new(profile: impl Into<String>, workload: impl Into<String>, mode: RunMode) -> Self {
        Self {
            profile: profile.into(),
            workload: workload.into(),
            spec: SpeculationConfig::default(),
            controller: ControllerParams::default(),
            trainer: TrainerProfile::default(),
            geometry: None,
            signals: SignalConfig::default(),
            mode,
            seed: 0,
            output_dir: None,
            initial_speculation: true,
            reference_alpha: None,
            throughput_window: 64,
            base_dir: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        if let Some(out) = &cfg.output_dir {
            cfg.output_dir = Some(cfg.resolve_path(out));
        }
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::Config(format!("run config: {e}")))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED_RUN_CONFIGS.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED_RUN_CONFIGS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| SimError::Config(format!("no bundled run config named {name:?}")))?;
        Self::from_json(text)
    }

    /// Loads `spec` as a file if it exists, else as a bundled config name.
    pub fn resolve(spec: &str) -> Result<Self> {
        if Path::new(spec).exists() {
            Self::load(spec)
        } else {
            Self::bundled(spec).or_else(|_| Self::load(spec))
        }
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn resolve_asset(&self, spec: &str, bundled: impl Fn(&str) -> bool) -> String {
        if bundled(spec) {
            spec.to_string()
        } else {
            self.resolve_path(Path::new(spec))
                .to_string_lossy()
                .into_owned()
        }
    }

    /// Loads the profile and workload and validates everything.
    pub fn prepare(&self) -> Result<PreparedRun> {
        let profile_spec =
            self.resolve_asset(&self.profile, |s| LatencyProfile::bundled(s).is_ok());
        let profile = LatencyProfile::resolve(&profile_spec)?;
        let workload_spec =
            self.resolve_asset(&self.workload, |s| WorkloadConfig::bundled(s).is_ok());
        let workload = WorkloadConfig::resolve(&workload_spec)?;
        let script = build_script(&workload)?;
        let geometry = self.geometry.unwrap_or_else(|| SignalGeometry {
            hidden_dim: profile
                .hidden_dim()
                .unwrap_or(SignalGeometry::default().hidden_dim),
            ..SignalGeometry::default()
        });
        let engine = EngineConfig {
            spec: self.spec,
            controller: self.controller,
            trainer: self.trainer,
            geometry,
            signals: self.signals,
            mode: self.mode,
            seed: self.seed,
            initial_speculation: self.initial_speculation,
            reference_alpha: self.reference_alpha,
            throughput_window: self.throughput_window,
            record_iterations: true,
        };
        engine.validate()?;
        Ok(PreparedRun {
            profile,
            workload,
            script,
            engine,
        })
    }
}

/// A grid of runs sharing one base config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub modes: Vec<RunMode>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| SimError::Config(format!("sweep config: {e}")))?;
        cfg.base.base_dir = path.parent().map(Path::to_path_buf);
        if let Some(out) = &cfg.base.output_dir {
            cfg.base.output_dir = Some(cfg.base.resolve_path(out));
        }
        Ok(cfg)
    }

    /// One config per (mode, seed), modes outermost. Empty lists fall back
    /// to the base config's value.
    pub fn expand(&self) -> Vec<RunConfig> {
        let modes = if self.modes.is_empty() {
            vec![self.base.mode]
        } else {
            self.modes.clone()
        };
        let seeds = if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        };
        modes
            .iter()
            .flat_map(|&mode| {
                seeds.iter().map(move |&seed| RunConfig {
                    mode,
                    seed,
                    ..self.base.clone()
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_assets_and_defaults() {
        let cfg = RunConfig::from_json(
            r#"{"profile":"gpt-oss-120b","workload":"sharegpt","mode":"tide_adaptive"}"#,
        )
        .unwrap();
        let run = cfg.prepare().unwrap();
        assert_eq!(run.engine.geometry.hidden_dim, 2880);
        assert_eq!(run.engine.spec.gamma, 3);
        assert_eq!(run.script.phases().len(), 1);
    }

    #[test]
    fn unknown_fields_and_missing_files_are_config_errors() {
        let e = RunConfig::from_json(
            r#"{"profile":"x","workload":"y","mode":"tide_default","bogus":1}"#,
        )
        .unwrap_err();
        assert!(e.is_config_error());
        let cfg = RunConfig::new("/nonexistent/profile.csv", "sharegpt", RunMode::TideDefault);
        assert!(cfg.prepare().unwrap_err().is_config_error());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = LatencyProfile::bundled("gpt-oss-120b").unwrap();
        std::fs::create_dir(dir.path().join("assets")).unwrap();
        p.save(dir.path().join("assets/mine.csv")).unwrap();
        let cfg_path = dir.path().join("run.json");
        std::fs::write(
            &cfg_path,
            r#"{"profile":"assets/mine.csv","workload":"science","mode":"speculation_off","output_dir":"out"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&cfg_path).unwrap();
        assert_eq!(
            cfg.output_dir.as_deref(),
            Some(dir.path().join("out").as_path())
        );
        assert_eq!(cfg.prepare().unwrap().profile, p);
    }

    #[test]
    fn bundled_scenario_config_prepares() {
        let cfg = RunConfig::resolve("langshift4_run").unwrap();
        let run = cfg.prepare().unwrap();
        assert_eq!(run.script.phases().len(), 4);
        assert_eq!(run.engine.reference_alpha, Some(0.7));
        assert!(RunConfig::resolve("nope").unwrap_err().is_config_error());
    }

    #[test]
    fn sweep_expansion_order() {
        let sweep = SweepConfig {
            base: RunConfig::new("gpt-oss-120b", "sharegpt", RunMode::TideDefault),
            modes: vec![RunMode::SpeculationOff, RunMode::TideAdaptive],
            seeds: vec![5, 6],
        };
        let runs: Vec<(RunMode, u64)> = sweep.expand().iter().map(|r| (r.mode, r.seed)).collect();
        assert_eq!(
            runs,
            vec![
                (RunMode::SpeculationOff, 5),
                (RunMode::SpeculationOff, 6),
                (RunMode::TideAdaptive, 5),
                (RunMode::TideAdaptive, 6),
            ]
        );
    }
}
