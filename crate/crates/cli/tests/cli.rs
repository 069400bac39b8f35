use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mmdc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmdc"))
        .args(args)
        .env("MMDC_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn stdout_json_lines(o: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

#[test]
fn plan_only_echoes_a_sixty_layer_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmdc(&["prune", "--plan-only", "--depth", "60", "--keep", "30"], dir.path());
    assert!(o.status.success());
    let plan = &stdout_json_lines(&o)[0];
    assert_eq!(plan["protected"], serde_json::json!([0, 59]));
    assert_eq!(plan["keep"].as_array().unwrap().len(), 30);
    let remove: Vec<u64> = serde_json::from_value(plan["remove"].clone()).unwrap();
    assert_eq!(remove.len(), 30);
    assert!(remove.iter().all(|&l| (1..=58).contains(&l)));
}

#[test]
fn exit_codes_distinguish_config_and_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = mmdc(&["train-teacher", "--set", "prune.target_keep=99"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("prune.target_keep"));
    let unknown = mmdc(&["train-teacher", "--set", "model.wings=2"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    let missing = mmdc(&["distill", "-c", smoke_config().to_str().unwrap()], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("`train-teacher`"));
}

#[test]
fn show_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let first = mmdc(&["show-config", "--set", "seed=5"], dir.path());
    assert!(first.status.success());
    let path = dir.path().join("resolved.json");
    std::fs::write(&path, &first.stdout).unwrap();
    let second = mmdc(&["show-config", "-c", path.to_str().unwrap()], dir.path());
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn smoke_run_all_then_stage_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = mmdc(&["run-all", "-c", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stages: Vec<String> = stdout_json_lines(&o)
        .iter()
        .filter_map(|v| v["stage"].as_str().map(String::from))
        .collect();
    assert_eq!(
        stages,
        [
            "teacher",
            "importance",
            "prune",
            "distill",
            "finetune",
            "hybridize",
            "align",
            "finetune-lite",
            "eval",
            "report"
        ]
    );
    assert!(dir.path().join("report.md").exists());

    let b = mmdc(
        &[
            "bench",
            "-c",
            cfg.to_str().unwrap(),
            "--iters",
            "10",
            "--batch",
            "2",
            "--pipeline",
        ],
        dir.path(),
    );
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let stages = std::fs::read_to_string(dir.path().join("bench_stages.csv")).unwrap();
    assert_eq!(stages.lines().count(), 1 + 9 + 1);
}
