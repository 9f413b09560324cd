//! Tables and output files behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SimError};
use crate::par::{self, Execution};
use crate::perf_model::{
    beta_ratio, c_ratio, min_acceptance_for_gain, practical_speedup, theoretical_speedup,
    BreakEven, LatencyProfile,
};
use crate::serving::{run, IterationRow, RunMetrics, RunMode, RunSummary};

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub batch: u32,
    pub beta: f64,
    pub c: f64,
    /// Undefined at `alpha = 1`.
    pub theoretical: Option<f64>,
    pub practical: f64,
    pub breakeven: BreakEven,
}

/// One row per batch size; `batches = None` uses every profiled point.
pub fn speedup_table(
    profile: &LatencyProfile,
    alpha: f64,
    gamma: u32,
    batches: Option<&[u32]>,
) -> Result<Vec<SpeedupRow>> {
    let batches: Vec<u32> = match batches {
        Some(b) => b.to_vec(),
        None => profile.batch_sizes().collect(),
    };
    batches
        .into_iter()
        .map(|b| {
            let c = c_ratio(profile, b)?;
            Ok(SpeedupRow {
                batch: b,
                beta: beta_ratio(profile, b, gamma)?,
                c,
                theoretical: if alpha < 1.0 {
                    Some(theoretical_speedup(alpha, gamma, c)?)
                } else {
                    None
                },
                practical: practical_speedup(profile, alpha, gamma, b)?,
                breakeven: min_acceptance_for_gain(profile, gamma, b)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub model: String,
    pub batch: u32,
    pub breakeven: BreakEven,
}

/// Break-even acceptance for every profile at every profiled batch size.
pub fn threshold_table(profiles: &[LatencyProfile], gamma: u32) -> Result<Vec<ThresholdRow>> {
    let mut rows = Vec::new();
    for p in profiles {
        for b in p.batch_sizes() {
            rows.push(ThresholdRow {
                model: p.model_name().to_string(),
                batch: b,
                breakeven: min_acceptance_for_gain(p, gamma, b)?,
            });
        }
    }
    Ok(rows)
}

/// Renders rows as a plain whitespace-aligned table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Iteration trace as CSV text.
pub fn iterations_csv(rows: &[IterationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(IterationRow::HEADER)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| SimError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn summary_json(summary: &RunSummary) -> Result<String> {
    let mut s = serde_json::to_string_pretty(summary)?;
    s.push('\n');
    Ok(s)
}

/// Writes a set of files into `dir`. If any write fails, every file written
/// by this call is removed again.
pub fn write_outputs(dir: &Path, files: &[(&str, String)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = fs::write(&path, body) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            let _ = fs::remove_file(&path);
            return Err(SimError::io(path, e));
        }
        written.push(path);
    }
    Ok(written)
}

/// Runs a config and writes `iterations.csv` and `summary.json`.
pub fn simulate_to_dir(cfg: &RunConfig, dir: &Path) -> Result<(RunMetrics, Vec<PathBuf>)> {
    let run_cfg = cfg.prepare()?;
    let metrics = run(&run_cfg.script, &run_cfg.profile, &run_cfg.engine)?;
    let files = [
        (ITERATIONS_FILE, iterations_csv(&metrics.rows)?),
        (SUMMARY_FILE, summary_json(&metrics.summary)?),
    ];
    let paths = write_outputs(dir, &files)?;
    Ok((metrics, paths))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: RunMode,
    pub seed: u64,
    pub completion_time_ms: f64,
    pub mean_throughput_tokens_per_s: f64,
    pub total_tokens: u64,
    pub speculation_duty_cycle: f64,
    pub collection_duty_cycle: f64,
    pub training_jobs: u64,
    pub deploys: u64,
    pub cumulative_storage_bytes: u64,
}

impl From<&RunSummary> for SweepRow {
    fn from(s: &RunSummary) -> Self {
        Self {
            mode: s.mode,
            seed: s.seed,
            completion_time_ms: s.completion_time_ms,
            mean_throughput_tokens_per_s: s.mean_throughput_tokens_per_s,
            total_tokens: s.total_tokens,
            speculation_duty_cycle: s.speculation_duty_cycle,
            collection_duty_cycle: s.collection_duty_cycle,
            training_jobs: s.training_jobs,
            deploys: s.deploys,
            cumulative_storage_bytes: s.cumulative_storage_bytes,
        }
    }
}

/// Runs every config independently and returns summaries in input order.
pub fn run_sweep(configs: &[RunConfig], exec: Execution) -> Result<Vec<RunSummary>> {
    par::map_slice(exec, configs, |cfg| -> Result<RunSummary> {
        let prepared = cfg.prepare()?;
        let engine = crate::serving::EngineConfig {
            record_iterations: false,
            ..prepared.engine
        };
        Ok(run(&prepared.script, &prepared.profile, &engine)?.summary)
    })
    .into_iter()
    .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| SimError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
