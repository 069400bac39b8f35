//! End-to-end runs of the smoke config: stage artifacts, lineage, reports.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use common::brute_force_scores;
use mmdc_core::bench::stage_timings;
use mmdc_core::checkpoint::load_checkpoint;
use mmdc_core::dataset::probe_items;
use mmdc_core::eval::EvalReport;
use mmdc_core::importance::{ImportanceReport, OmegaKind};
use mmdc_core::pipeline::{load_config, read_summaries, write_report, Pipeline, PipelineConfig, Stage, SUMMARY_FILE};
use mmdc_core::Error;
use serde_json::Value;

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn smoke(root: &Path) -> PipelineConfig {
    load_config(
        Some(&workspace_file("configs/smoke.json")),
        &[format!("output_dir={}", root.display())],
    )
    .unwrap()
}

#[test]
fn shipped_default_config_is_the_builtin_default() {
    let shipped = load_config(Some(&workspace_file("configs/default.json")), &[]).unwrap();
    assert_eq!(shipped, load_config(None, &[]).unwrap());
    assert_eq!(shipped, PipelineConfig::default());
}

#[test]
fn run_all_writes_nine_linked_stages_and_a_stable_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke(dir.path())).unwrap();
    let summaries = p.run_all(|_| {}).unwrap();
    assert_eq!(summaries.len(), 9);
    for stage in Stage::ALL {
        assert!(
            dir.path().join(stage.name()).join(SUMMARY_FILE).exists(),
            "{}",
            stage.name()
        );
    }

    // Every recorded input is a dataset or an artifact some earlier stage produced.
    let mut produced = BTreeSet::new();
    for s in &summaries {
        for (name, hash) in &s.inputs {
            if s.stage == Stage::Teacher {
                assert!(name == "train" || name == "val");
                continue;
            }
            assert!(
                produced.contains(hash),
                "{}: input {name} has no producer",
                s.stage.name()
            );
        }
        produced.extend(s.outputs.values().cloned());
    }

    let text = std::fs::read_to_string(dir.path().join("eval/eval.json")).unwrap();
    let reports: Vec<EvalReport> = serde_json::from_str(&text).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["teacher", "pruned", "student", "hybrid_init", "hybrid"]);
    let hybrid = load_checkpoint(&p.checkpoint_dir(Stage::FinetuneLite)).unwrap();
    assert_eq!(hybrid.config.layout.describe(), reports[4].layout);

    let (md, js) = write_report(dir.path()).unwrap();
    let first = (std::fs::read(&md).unwrap(), std::fs::read(&js).unwrap());
    write_report(dir.path()).unwrap();
    assert_eq!(first, (std::fs::read(&md).unwrap(), std::fs::read(&js).unwrap()));

    let report: Value = serde_json::from_slice(&first.1).unwrap();
    let rows = report["parameters"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for pair in rows.windows(2) {
        let parent = pair[0]["params"]["total"].as_f64().unwrap();
        let child = pair[1]["params"]["total"].as_f64().unwrap();
        let shown = pair[1]["total_reduction"].as_f64().unwrap();
        assert_eq!(format!("{shown:.3}"), format!("{:.3}", 1.0 - child / parent));
    }
    let md_text = String::from_utf8(first.0).unwrap();
    assert!(md_text.contains("approximately 40%"));

    let timings = stage_timings(dir.path()).unwrap();
    assert_eq!(timings.rows.len(), 9);
    let sum: f64 = timings.rows.iter().map(|r| r.1).sum();
    assert_eq!(timings.total_s, sum);
}

#[test]
fn two_weightings_both_match_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    p.run(Stage::Teacher).unwrap();
    p.run_importance(&[OmegaKind::Uniform, OmegaKind::Linear]).unwrap();
    let teacher = load_checkpoint(&p.checkpoint_dir(Stage::Teacher)).unwrap();
    let seed = cfg.importance.seed ^ cfg.derive_seed("importance");
    let probes = probe_items(cfg.importance.prompts, seed).unwrap();
    let t_sub = &cfg.importance.t_sub;
    let total = cfg.model.timesteps as f64;
    let layers: Vec<usize> = (1..cfg.model.depth - 1).collect();
    for (file, weight) in [
        ("importance.json", Box::new(|_: usize| 1.0) as Box<dyn Fn(usize) -> f64>),
        ("importance-linear.json", Box::new(move |t: usize| t as f64 / total)),
    ] {
        let text = std::fs::read_to_string(dir.path().join("importance").join(file)).unwrap();
        let report: ImportanceReport = serde_json::from_str(&text).unwrap();
        let expect = brute_force_scores(&teacher, &probes, t_sub, weight, &p.schedule, seed, &layers);
        for (&l, e) in layers.iter().zip(expect) {
            let got = report.scores[l].unwrap();
            assert!((got - e).abs() <= 1e-6 * e.max(1.0), "{file} layer {l}: {got} vs {e}");
        }
    }
    let summaries = read_summaries(dir.path()).unwrap();
    let imp = summaries.iter().find(|s| s.stage == Stage::Importance).unwrap();
    assert!(imp.metrics.contains_key("ranking.uniform") && imp.metrics.contains_key("ranking.linear"));
}

#[test]
fn stages_without_inputs_name_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(smoke(dir.path())).unwrap();
    for (stage, producer) in [
        (Stage::Prune, Stage::Teacher),
        (Stage::Align, Stage::Hybridize),
        (Stage::Eval, Stage::Teacher),
    ] {
        match p.run(stage) {
            Err(Error::MissingArtifact { stage: s, .. }) => assert_eq!(s, producer.command(), "{}", stage.name()),
            other => panic!("{}: {other:?}", stage.name()),
        }
    }
}
