use std::path::Path;
use std::process::{Command, Output};

fn specsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn help_exits_zero_everywhere() {
    assert_eq!(code(&specsim(&["--help"])), 0);
    for sub in [
        "speedup",
        "threshold",
        "simulate",
        "compare-training",
        "plan",
        "sweep",
    ] {
        assert_eq!(code(&specsim(&[sub, "--help"])), 0, "{sub}");
    }
}

#[test]
fn unknown_flag_exits_two() {
    assert_eq!(
        code(&specsim(&["speedup", "--alpha", "0.5", "--frobnicate"])),
        2
    );
    assert_eq!(code(&specsim(&["nope"])), 2);
}

#[test]
fn domain_and_config_errors_map_to_exit_codes() {
    assert_eq!(code(&specsim(&["speedup", "--alpha", "1.5"])), 1);
    assert_eq!(
        code(&specsim(&[
            "speedup",
            "--alpha",
            "0.5",
            "--profile",
            "missing"
        ])),
        2
    );
    assert_eq!(
        code(&specsim(&["simulate", "--config", "/does/not/exist.json"])),
        2
    );
    assert_eq!(
        code(&specsim(&[
            "plan",
            "--cluster",
            "MI250:1",
            "--speedup",
            "1.2",
            "--demand",
            "1e12"
        ])),
        1
    );
}

#[test]
fn speedup_json() {
    let out = specsim(&["--json", "speedup", "--alpha", "0.6", "--batch", "1"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let practical = v[0]["practical"].as_f64().unwrap();
    assert!((practical - 1.346597).abs() < 1e-6);
}

#[test]
fn plan_json_matches_planner() {
    let out = specsim(&[
        "plan",
        "--cluster",
        "H100:8,MI250:4",
        "--train-class",
        "MI250",
        "--speedup",
        "1.15",
    ]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["relative_throughput"].as_f64().unwrap() - 1.070799).abs() < 1e-6);
    assert!((v["breakeven_speedup"].as_f64().unwrap() - 1.073964).abs() < 1e-6);
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"profile":"llama-3.3-70b-instruct","workload":"science","mode":"tide_default",
            "controller":{"n_threshold":256},"reference_alpha":0.6,"seed":3}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let out = specsim(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(std::fs::read(dir.join("iterations.csv")).unwrap());
        assert!(dir.join("summary.json").exists());
    }
    assert!(!csvs[0].is_empty());
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn sweep_writes_rows_in_config_order() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = tmp.path().join("sweep.json");
    std::fs::write(
        &sweep,
        r#"{"base":{"profile":"gpt-oss-120b","workload":"sharegpt","mode":"speculation_off"},
            "modes":["speculation_off","speculation_on_no_training"],"seeds":[2,1]}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = specsim(&[
        "sweep",
        "--config",
        sweep.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let keys: Vec<String> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        keys,
        [
            "speculation_off,2",
            "speculation_off,1",
            "speculation_on_no_training,2",
            "speculation_on_no_training,1"
        ]
    );
}

#[test]
fn compare_training_table() {
    let out = specsim(&["--json", "compare-training"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let totals: Vec<f64> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["total_hours"].as_f64().unwrap())
        .collect();
    assert!((totals[0] - 15.32).abs() < 1e-9);
    assert!((totals[1] - 27.64).abs() < 1e-9);
    assert!((totals[2] - 9.16).abs() < 1e-9);
}
