//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

use specsim_core::control::{
    ControlEventKind, ControllerParams, ControllerState, Sample, SignalHandle,
};
use specsim_core::hetero::{self, ClusterSpec, GpuCatalog};
use specsim_core::perf_model::{
    expected_accept_length, min_acceptance_for_gain, monte_carlo_accept_length, practical_speedup,
    BreakEven, LatencyProfile,
};
use specsim_core::report;
use specsim_core::serving::{
    run, CollectionPolicy, EngineConfig, RunMode, RunSummary, SignalGeometry,
};
use specsim_core::training::{
    compare_training_modes, storage_footprint, DraftModel, Trainer, TrainerProfile, TrainingJob,
    TrainingMode, TrainingOutcome,
};
use specsim_core::workload::{build_script, PhaseSpec, WorkloadConfig};
use specsim_core::{Execution, RunConfig};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_monte_carlo() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for ai in 1..=9 {
        let alpha = f64::from(ai) / 10.0;
        for gamma in 1..=8 {
            let exact = expected_accept_length(alpha, gamma).map_err(|e| e.to_string())?;
            let seed = u64::from(ai * 100 + gamma);
            let mc = monte_carlo_accept_length(alpha, gamma, 1_000_000, seed, Execution::default())
                .map_err(|e| e.to_string())?;
            let rel = (mc - exact).abs() / exact;
            worst = worst.max(rel);
            ensure(rel <= 0.005, || {
                format!("alpha={alpha} gamma={gamma}: mc {mc} vs {exact}")
            })?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "72 cells, worst rel err {:.4}%, {secs:.2}s",
        worst * 100.0
    ))
}

fn fixed_alpha_summary(
    profile: &LatencyProfile,
    alpha: f64,
    b: u32,
    mode: RunMode,
) -> Result<RunSummary, String> {
    let phase = PhaseSpec {
        name: "fixed".into(),
        num_requests: (b * 4).max(300),
        concurrency: b,
        mean_output_tokens: 1000,
        alpha_start: alpha,
        alpha_ceiling: alpha,
        tau_samples: 1.0,
        alpha_noise_sd: 0.0,
    };
    let script = build_script(&WorkloadConfig {
        phases: vec![phase],
        rng_seed: 21,
    })
    .map_err(|e| e.to_string())?;
    let cfg = EngineConfig {
        mode,
        seed: 5,
        ..EngineConfig::default()
    };
    run(&script, profile, &cfg)
        .map(|m| m.summary)
        .map_err(|e| e.to_string())
}

fn c2_model_consistency() -> Check {
    let mut worst = 0.0f64;
    let mut n = 0;
    for p in LatencyProfile::all_bundled() {
        for alpha in [0.3, 0.5, 0.7] {
            for b in [1, 8, 64] {
                let on = fixed_alpha_summary(&p, alpha, b, RunMode::SpeculationOnNoTraining)?;
                let off = fixed_alpha_summary(&p, alpha, b, RunMode::SpeculationOff)?;
                let ratio = on.phases[0].full_batch_throughput_tokens_per_s
                    / off.phases[0].full_batch_throughput_tokens_per_s;
                let model = practical_speedup(&p, alpha, 3, b).map_err(|e| e.to_string())?;
                let rel = (ratio - model).abs() / model;
                worst = worst.max(rel);
                n += 1;
                ensure(rel <= 0.02, || {
                    format!(
                        "{} alpha={alpha} b={b}: simulated {ratio:.4} vs model {model:.4}",
                        p.model_name()
                    )
                })?;
            }
        }
    }
    Ok(format!("{n} cells, worst rel err {:.3}%", worst * 100.0))
}

fn c3_breakeven() -> Check {
    let mut checked = 0;
    let mut never = 0;
    let mut worst = 0.0f64;
    for p in LatencyProfile::all_bundled() {
        for b in p.batch_sizes() {
            match min_acceptance_for_gain(&p, 3, b).map_err(|e| e.to_string())? {
                BreakEven::Alpha(a) => {
                    let s = practical_speedup(&p, a, 3, b).map_err(|e| e.to_string())?;
                    worst = worst.max((s - 1.0).abs());
                    ensure((s - 1.0).abs() <= 1e-5, || {
                        format!("{} b={b}: speedup {s} at alpha* {a}", p.model_name())
                    })?;
                    checked += 1;
                }
                BreakEven::NeverBeneficial => never += 1,
            }
        }
    }
    Ok(format!(
        "{checked} points at 1 +/- {worst:.1e}, {never} never beneficial"
    ))
}

fn c4_training_table() -> Check {
    let profile = TrainerProfile::from_hours(100_000, 6.16, 9.16, 3).map_err(|e| e.to_string())?;
    let rows = compare_training_modes(100_000, &profile).map_err(|e| e.to_string())?;
    let expect = [(15.32, 1.00), (27.64, 0.55), (9.16, 1.67)];
    for (r, (total, ratio)) in rows.iter().zip(expect) {
        ensure((r.total_hours - total).abs() < 0.005, || {
            format!(
                "{}: total {} h, want {total}",
                r.mode.label(),
                r.total_hours
            )
        })?;
        ensure((r.speedup_vs_offline - ratio).abs() <= 0.01, || {
            format!(
                "{}: ratio {}, want {ratio}",
                r.mode.label(),
                r.speedup_vs_offline
            )
        })?;
    }
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{} {:.2}h {:.2}x",
                r.mode.label(),
                r.total_hours,
                r.speedup_vs_offline
            )
        })
        .collect::<Vec<_>>()
        .join(", "))
}

fn c5_planner() -> Check {
    let cat = GpuCatalog::bundled();
    let cases = [
        ("H100:8,MI250:4", 1.15, 1.070799, 1.08, 0.02),
        ("H100:8,MI250:4", 1.30, 1.210468, 1.22, 0.02),
        ("MI300X:2,MI250:1", 1.1, 0.988211, 0.99, 0.01),
        ("H100:4,MI250:1", 1.3, 1.253638, 1.26, 0.01),
    ];
    let mut got = Vec::new();
    for (cluster, s, derived, reported, tol) in cases {
        let entries = hetero::parse_cluster(cluster).map_err(|e| e.to_string())?;
        let split = ClusterSpec::from_entries(&cat, &entries, &["MI250".to_string()])
            .map_err(|e| e.to_string())?;
        let r = hetero::relative_throughput(&split, s).map_err(|e| e.to_string())?;
        ensure((r - derived).abs() < 1e-6, || {
            format!("{cluster} s={s}: {r} vs {derived}")
        })?;
        ensure((r - reported).abs() <= tol, || {
            format!("{cluster} s={s}: {r} vs reported {reported}")
        })?;
        got.push(format!("{r:.3}"));
    }
    Ok(got.join(", "))
}

struct LowerEval;

impl Trainer for LowerEval {
    fn train(&mut self, job: &TrainingJob<'_>) -> specsim_core::Result<TrainingOutcome> {
        let mean = job.train.iter().map(|s| s.alpha).sum::<f64>() / job.train.len() as f64;
        Ok(TrainingOutcome {
            duration_hours: 0.01,
            alpha_eval: mean - 0.05,
            new_version: job.base.version + 1,
            trained_samples: job.base.trained_samples.clone(),
        })
    }
}

fn c6_controller() -> Check {
    let params = ControllerParams {
        lambda_short: 0.9,
        lambda_long: 0.99,
        epsilon: 0.05,
        n_init: 32,
        n_threshold: 20,
    };
    let mut c = ControllerState::init_from_warmup(params, &[0.8; 32]).map_err(|e| e.to_string())?;
    let mut first = None;
    for k in 1..=50 {
        c.observe(0.5, f64::from(k)).map_err(|e| e.to_string())?;
        if c.collection_enabled() && first.is_none() {
            first = Some(k);
        }
    }
    ensure(first == Some(2), || {
        format!("step drop enabled collection at {first:?}")
    })?;

    let mut flat =
        ControllerState::init_from_warmup(params, &[0.8; 32]).map_err(|e| e.to_string())?;
    for k in 0..10_000 {
        flat.observe(0.8, f64::from(k)).map_err(|e| e.to_string())?;
    }
    ensure(!flat.collection_enabled(), || {
        "constant trace enabled collection".into()
    })?;

    for i in 0..20u64 {
        c.record_sample(Sample {
            handle: SignalHandle {
                request_id: i,
                tokens: 10,
            },
            phase: 0,
            alpha: 0.5,
        });
    }
    let job = c
        .maybe_trigger_training(&mut LowerEval, &DraftModel::new(1), 100.0)
        .map_err(|e| e.to_string())?
        .ok_or("training did not trigger")?;
    c.apply_outcome(&job, 200.0);
    ensure(!c.collection_enabled(), || {
        "worse eval did not disable collection".into()
    })?;

    let mut runner = TestRunner::new(PtConfig {
        cases: 256,
        failure_persistence: None,
        ..PtConfig::default()
    });
    let strategy = (
        proptest::collection::vec(0.0f64..=1.0, 1..300),
        0.5f64..0.99,
        0.0f64..0.2,
    );
    runner
        .run(&strategy, |(trace, ls, eps)| {
            let p = ControllerParams {
                lambda_short: ls,
                lambda_long: 0.995f64.max(ls),
                epsilon: eps.max(1e-3),
                n_init: 1,
                n_threshold: 1_000_000,
            };
            let mut c = ControllerState::new(p).unwrap();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut was_on = false;
            for (i, &a) in trace.iter().enumerate() {
                c.observe(a, i as f64).unwrap();
                lo = lo.min(a);
                hi = hi.max(a);
                if c.is_initialized() {
                    for e in [c.ema_short(), c.ema_long()] {
                        prop_assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
                    }
                }
                if c.collection_enabled() && !was_on {
                    prop_assert!(c.ema_short() < c.ema_long() - p.epsilon);
                }
                // Observations alone never switch collection off.
                prop_assert!(!(was_on && !c.collection_enabled()));
                was_on = c.collection_enabled();
            }
            let kinds: Vec<ControlEventKind> = c.events().iter().map(|e| e.kind).collect();
            prop_assert!(kinds.iter().all(|k| *k == ControlEventKind::CollectOn));
            prop_assert!(kinds.len() <= 1);
            Ok(())
        })
        .map_err(|e| format!("property: {e}"))?;
    Ok("step drop enables at k=2, constant never, reject disables, 256 random traces".into())
}

fn c7_adaptive_scenario() -> Check {
    let base = RunConfig::bundled("langshift4_run").map_err(|e| e.to_string())?;
    let summary = |mode| -> Result<RunSummary, String> {
        let mut cfg = base.clone();
        cfg.mode = mode;
        let p = cfg.prepare().map_err(|e| e.to_string())?;
        let engine = EngineConfig {
            record_iterations: false,
            ..p.engine
        };
        run(&p.script, &p.profile, &engine)
            .map(|m| m.summary)
            .map_err(|e| e.to_string())
    };
    let adaptive = summary(RunMode::TideAdaptive)?;
    let default = summary(RunMode::TideDefault)?;
    let off = summary(RunMode::SpeculationOff)?;
    let (a, d, o) = (
        adaptive.completion_time_ms,
        default.completion_time_ms,
        off.completion_time_ms,
    );
    ensure(a <= d && a <= o && (a < d || a < o), || {
        format!("completion adaptive {a:.0} default {d:.0} off {o:.0}")
    })?;

    let profile = LatencyProfile::bundled("gpt-oss-120b").map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for (i, phase) in adaptive.phases.iter().enumerate() {
        let segs: Vec<_> = adaptive.segments.iter().filter(|s| s.phase == i).collect();
        let (Some(pre), Some(post)) = (segs.first(), segs.last()) else {
            return Err(format!("{}: no iterations", phase.name));
        };
        let ratio = post.throughput_tokens_per_s / pre.throughput_tokens_per_s;
        ensure(ratio >= 1.10, || {
            format!("{}: post/pre {ratio:.3}", phase.name)
        })?;
        ratios.push(format!("{} {ratio:.2}", phase.name));
    }
    // The script must straddle the break-even point for the comparison to mean anything.
    let script = base.prepare().map_err(|e| e.to_string())?.script;
    for ph in script.phases() {
        let star = min_acceptance_for_gain(&profile, 3, ph.concurrency)
            .map_err(|e| e.to_string())?
            .alpha()
            .ok_or("never beneficial")?;
        ensure(ph.alpha_start < star && ph.alpha_ceiling > star, || {
            format!("{}: alpha range does not straddle {star:.3}", ph.name)
        })?;
    }
    Ok(format!(
        "completion s: adaptive {:.0} default {:.0} off {:.0}; post/pre {}",
        a / 1e3,
        d / 1e3,
        o / 1e3,
        ratios.join(", ")
    ))
}

fn c8_zero_overhead() -> Check {
    let prepared = RunConfig::bundled("langshift4_run")
        .and_then(|c| c.prepare())
        .map_err(|e| e.to_string())?;
    let geometry = SignalGeometry {
        hidden_dim: 4096,
        ..SignalGeometry::default()
    };
    let mut detail = Vec::new();
    for mode in [RunMode::SpeculationOnNoTraining, RunMode::TideAdaptive] {
        let with = |policy| {
            let mut e = prepared.engine.clone();
            e.mode = mode;
            e.geometry = geometry;
            e.signals.collection = policy;
            run(&prepared.script, &prepared.profile, &e).map_err(|e| e.to_string())
        };
        let on = with(CollectionPolicy::Always)?;
        let off = with(CollectionPolicy::Never)?;
        let same = on.rows.len() == off.rows.len()
            && on
                .rows
                .iter()
                .zip(&off.rows)
                .all(|(x, y)| x.clock_ms.to_bits() == y.clock_ms.to_bits());
        ensure(same, || format!("{mode}: clock trajectories differ"))?;
        let expected = on.summary.total_tokens * 3 * 4096 * 2;
        ensure(on.summary.cumulative_storage_bytes == expected, || {
            format!(
                "{mode}: stored {} bytes, want {expected}",
                on.summary.cumulative_storage_bytes
            )
        })?;
        ensure(off.summary.cumulative_storage_bytes == 0, || {
            "collection off stored bytes".into()
        })?;
        detail.push(format!("{mode} {} rows", on.rows.len()));
    }
    let dataset_tokens = 24_000_000u64;
    let buffer_tokens = 1_000_000u64;
    let offline = storage_footprint(
        TrainingMode::Offline,
        dataset_tokens,
        buffer_tokens,
        &geometry,
    )
    .map_err(|e| e.to_string())?;
    let tide = storage_footprint(
        TrainingMode::ServingReuse,
        dataset_tokens,
        buffer_tokens,
        &geometry,
    )
    .map_err(|e| e.to_string())?;
    ensure(offline * buffer_tokens == tide * dataset_tokens, || {
        format!("storage {offline}:{tide} is not {dataset_tokens}:{buffer_tokens}")
    })?;
    ensure(offline / tide == 24 && offline % tide == 0, || {
        "ratio is not 24".into()
    })?;
    Ok(format!("{}; offline:tide storage 24:1", detail.join(", ")))
}

fn c9_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::bundled("langshift4_run").map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        report::simulate_to_dir(&cfg, &dir).map_err(|e| e.to_string())?;
        csvs.push(std::fs::read(dir.join(report::ITERATIONS_FILE)).map_err(|e| e.to_string())?);
    }
    ensure(!csvs[0].is_empty() && csvs[0] == csvs[1], || {
        "iteration CSVs differ".into()
    })?;
    Ok(format!("{} byte CSV identical across runs", csvs[0].len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("closed form vs Monte Carlo", c1_monte_carlo),
        ("simulator matches batch-aware model", c2_model_consistency),
        ("break-even acceptance", c3_breakeven),
        ("training-time comparison", c4_training_table),
        ("heterogeneous planner", c5_planner),
        ("acceptance-monitor state machine", c6_controller),
        (
            "adaptive vs default under language shift",
            c7_adaptive_scenario,
        ),
        ("zero-overhead signal extraction", c8_zero_overhead),
        ("determinism", c9_determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        match check() {
            Ok(detail) => println!(
                "criterion {} PASS  {name} ({detail}) [{:.2}s]",
                i + 1,
                t.elapsed().as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1}s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
