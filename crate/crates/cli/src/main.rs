use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use specsim_core::config::{RunConfig, SweepConfig};
use specsim_core::hetero::{self, ClusterSpec, GpuCatalog, TrainingDemand};
use specsim_core::perf_model::{BreakEven, LatencyProfile, DEFAULT_GAMMA};
use specsim_core::report::{self, SweepRow};
use specsim_core::training::{compare_training_modes, TrainerProfile, REFERENCE_DATASET_SAMPLES};
use specsim_core::{Execution, RunMode, SimError};

#[derive(Parser)]
#[command(
    name = "specsim",
    version,
    about = "Speculative decoding speedup model and serving simulator"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Override the seed of every simulated run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Directory for output files.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Theoretical and batch-aware speedup per batch size.
    Speedup {
        /// Bundled profile name or path to a profile CSV.
        #[arg(long, default_value = "gpt-oss-120b")]
        profile: String,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: u32,
        /// Comma-separated batch sizes; defaults to every profiled point.
        #[arg(long, value_delimiter = ',')]
        batch: Vec<u32>,
    },
    /// Break-even acceptance rate per profile and batch size.
    Threshold {
        /// Profiles to include; defaults to all bundled profiles.
        #[arg(long)]
        profile: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: u32,
    },
    /// Run the serving simulator and write iterations.csv and summary.json.
    Simulate {
        /// Run config path or bundled config name.
        #[arg(long, default_value = "langshift4_run")]
        config: String,
        #[arg(long)]
        mode: Option<RunMode>,
    },
    /// Training-time comparison of recompute baselines and serving reuse.
    CompareTraining {
        #[arg(long, default_value_t = REFERENCE_DATASET_SAMPLES)]
        samples: u64,
        #[arg(long, default_value_t = 6.16)]
        prefill_hours: f64,
        #[arg(long, default_value_t = 9.16)]
        train_hours: f64,
        #[arg(long, default_value_t = 3)]
        epochs: u32,
    },
    /// Inference/training split of a heterogeneous cluster.
    Plan {
        /// Cluster as CLASS:COUNT pairs, e.g. H100:8,MI250:4.
        #[arg(long)]
        cluster: String,
        /// Classes used for training. Omit to search for the best split.
        #[arg(long, value_delimiter = ',')]
        train_class: Vec<String>,
        /// Speculative speedup on the inference GPUs.
        #[arg(long)]
        speedup: f64,
        /// Required training throughput in samples per hour (search only).
        #[arg(long)]
        demand: Option<f64>,
        /// Samples per hour from one MI250-equivalent of training capacity.
        #[arg(long)]
        per_unit: Option<f64>,
        /// GPU class CSV; defaults to the bundled classes.
        #[arg(long)]
        gpu_profiles: Option<PathBuf>,
    },
    /// Run a grid of simulations and write one summary row per run.
    Sweep {
        /// Sweep config path.
        #[arg(long)]
        config: PathBuf,
        /// Run configurations one after another.
        #[arg(long)]
        sequential: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), SimError> {
    let g = cli.global;
    match cli.command {
        Command::Speedup {
            profile,
            alpha,
            gamma,
            batch,
        } => speedup(&g, &profile, alpha, gamma, &batch),
        Command::Threshold { profile, gamma } => threshold(&g, &profile, gamma),
        Command::Simulate { config, mode } => simulate(&g, &config, mode),
        Command::CompareTraining {
            samples,
            prefill_hours,
            train_hours,
            epochs,
        } => compare(&g, samples, prefill_hours, train_hours, epochs),
        Command::Plan {
            cluster,
            train_class,
            speedup,
            demand,
            per_unit,
            gpu_profiles,
        } => plan(
            &g,
            &cluster,
            &train_class,
            speedup,
            demand,
            per_unit,
            gpu_profiles.as_deref(),
        ),
        Command::Sweep { config, sequential } => sweep(&g, &config, sequential),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), SimError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn fmt_breakeven(b: BreakEven) -> String {
    match b {
        BreakEven::Alpha(a) => format!("{a:.4}"),
        BreakEven::NeverBeneficial => "never".to_string(),
    }
}

fn speedup(
    g: &Global,
    profile: &str,
    alpha: f64,
    gamma: u32,
    batch: &[u32],
) -> Result<(), SimError> {
    let p = LatencyProfile::resolve(profile)?;
    let rows = report::speedup_table(&p, alpha, gamma, (!batch.is_empty()).then_some(batch))?;
    if let Some(dir) = &g.output_dir {
        let body = serde_json::to_string_pretty(&rows)? + "\n";
        report::write_outputs(dir, &[("speedup.json", body)])?;
    }
    if g.json {
        return print_json(&rows);
    }
    println!("{} alpha={alpha} gamma={gamma}", p.model_name());
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.batch.to_string(),
                format!("{:.4}", r.beta),
                format!("{:.4}", r.c),
                r.theoretical.map_or("-".into(), |t| format!("{t:.4}")),
                format!("{:.4}", r.practical),
                fmt_breakeven(r.breakeven),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(
            &[
                "batch",
                "beta",
                "c",
                "theoretical",
                "practical",
                "breakeven_alpha"
            ],
            &cells
        )
    );
    Ok(())
}

fn threshold(g: &Global, profiles: &[String], gamma: u32) -> Result<(), SimError> {
    let profiles = if profiles.is_empty() {
        LatencyProfile::all_bundled()
    } else {
        profiles
            .iter()
            .map(|p| LatencyProfile::resolve(p))
            .collect::<Result<_, _>>()?
    };
    let rows = report::threshold_table(&profiles, gamma)?;
    if let Some(dir) = &g.output_dir {
        let body = serde_json::to_string_pretty(&rows)? + "\n";
        report::write_outputs(dir, &[("threshold.json", body)])?;
    }
    if g.json {
        return print_json(&rows);
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.batch.to_string(),
                fmt_breakeven(r.breakeven),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(&["model", "batch", "breakeven_alpha"], &cells)
    );
    Ok(())
}

fn output_dir(g: &Global, from_config: Option<&Path>) -> PathBuf {
    g.output_dir
        .clone()
        .or_else(|| from_config.map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn simulate(g: &Global, config: &str, mode: Option<RunMode>) -> Result<(), SimError> {
    let mut cfg = RunConfig::resolve(config)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    let dir = output_dir(g, cfg.output_dir.as_deref());
    let (metrics, paths) = report::simulate_to_dir(&cfg, &dir)?;
    let s = &metrics.summary;
    if g.json {
        return print_json(s);
    }
    println!("mode              {}", s.mode);
    println!("model             {}", s.model);
    println!("requests          {}", s.total_requests);
    println!("tokens            {}", s.total_tokens);
    println!("completion_s      {:.3}", s.completion_time_ms / 1000.0);
    println!("throughput_tok_s  {:.1}", s.mean_throughput_tokens_per_s);
    println!("speculation_duty  {:.3}", s.speculation_duty_cycle);
    println!("collection_duty   {:.3}", s.collection_duty_cycle);
    println!("training_jobs     {}", s.training_jobs);
    println!("deploys           {}", s.deploys);
    println!("storage_bytes     {}", s.cumulative_storage_bytes);
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn compare(
    g: &Global,
    samples: u64,
    prefill: f64,
    train: f64,
    epochs: u32,
) -> Result<(), SimError> {
    let profile = TrainerProfile::from_hours(samples, prefill, train, epochs)?;
    let rows = compare_training_modes(samples, &profile)?;
    if let Some(dir) = &g.output_dir {
        let body = serde_json::to_string_pretty(&rows)? + "\n";
        report::write_outputs(dir, &[("compare_training.json", body)])?;
    }
    if g.json {
        return print_json(&rows);
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.label().to_string(),
                format!("{:.2}", r.prefill_hours),
                format!("{:.2}", r.train_hours),
                format!("{:.2}", r.total_hours),
                format!("{:.2}x", r.speedup_vs_offline),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(
            &["mode", "prefill_h", "train_h", "total_h", "speedup"],
            &cells
        )
    );
    Ok(())
}

#[derive(Serialize)]
struct PlanOutput {
    relative_throughput: f64,
    breakeven_speedup: f64,
    assignment: ClusterSpec,
}

fn plan(
    g: &Global,
    cluster: &str,
    train_classes: &[String],
    speedup: f64,
    demand: Option<f64>,
    per_unit: Option<f64>,
    gpu_profiles: Option<&Path>,
) -> Result<(), SimError> {
    let catalog = match gpu_profiles {
        Some(p) => GpuCatalog::load(p)?,
        None => GpuCatalog::bundled(),
    };
    let entries = hetero::parse_cluster(cluster)?;
    let out = if train_classes.is_empty() {
        let demand = demand.map(|d| {
            let mut t = TrainingDemand::new(d);
            if let Some(u) = per_unit {
                t.samples_per_hour_per_unit = u;
            }
            t
        });
        let a = hetero::best_assignment(&catalog, &entries, speedup, demand.as_ref())?;
        PlanOutput {
            relative_throughput: a.relative_throughput,
            breakeven_speedup: a.breakeven_speedup,
            assignment: a.cluster,
        }
    } else {
        let split = ClusterSpec::from_entries(&catalog, &entries, train_classes)?;
        PlanOutput {
            relative_throughput: hetero::relative_throughput(&split, speedup)?,
            breakeven_speedup: hetero::breakeven_speedup(&split)?,
            assignment: split,
        }
    };
    if let Some(dir) = &g.output_dir {
        let body = serde_json::to_string_pretty(&out)? + "\n";
        report::write_outputs(dir, &[("plan.json", body)])?;
    }
    print_json(&out)
}

fn sweep(g: &Global, config: &Path, sequential: bool) -> Result<(), SimError> {
    let mut cfg = SweepConfig::load(config)?;
    if let Some(seed) = g.seed {
        cfg.seeds = vec![seed];
    }
    let runs = cfg.expand();
    let exec = if sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let summaries = report::run_sweep(&runs, exec)?;
    let rows: Vec<SweepRow> = summaries.iter().map(SweepRow::from).collect();
    let dir = output_dir(g, cfg.base.output_dir.as_deref());
    let paths = report::write_outputs(&dir, &[(report::SWEEP_FILE, report::sweep_csv(&rows)?)])?;
    if g.json {
        return print_json(&rows);
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.seed.to_string(),
                format!("{:.3}", r.completion_time_ms / 1000.0),
                format!("{:.1}", r.mean_throughput_tokens_per_s),
                r.deploys.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        report::render_table(
            &["mode", "seed", "completion_s", "tok_per_s", "deploys"],
            &cells
        )
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}
