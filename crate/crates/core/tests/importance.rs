mod common;

use std::collections::BTreeSet;

use common::{brute_force_scores, live_model, tiny_config};
use mmdc_core::dataset::probe_items;
use mmdc_core::diffusion::NoiseSchedule;
use mmdc_core::importance::{importance_scores, OmegaKind, TimestepWeighting};
use mmdc_core::StreamLayout;

#[test]
fn scores_match_brute_force_enumeration() {
    let cfg = tiny_config(StreamLayout::all_dual(4));
    let model = live_model(&cfg, 11, 0.1);
    let schedule = NoiseSchedule::cosine(cfg.timesteps).unwrap();
    let probes = probe_items(3, 5).unwrap();
    let weighting = TimestepWeighting::new(OmegaKind::Linear, &[30, 80], cfg.timesteps).unwrap();
    let protected = BTreeSet::from([0, 3]);
    let seed = 77;
    let report = importance_scores(&model, &probes, &weighting, &schedule, seed, &protected, false).unwrap();

    for l in [0, 3] {
        assert!(report.scores[l].is_none());
    }
    let steps = [30, 80];
    let expect = brute_force_scores(
        &model,
        &probes,
        &steps,
        |t| t as f64 / cfg.timesteps as f64,
        &schedule,
        seed,
        &[1, 2],
    );
    for (l, e) in [1, 2].into_iter().zip(expect) {
        let got = report.scores[l].unwrap();
        assert!(e > 0.0);
        assert!((got - e).abs() <= 1e-6 * e.max(1.0), "layer {l}: {got} vs {e}");
    }
    report.check_consistency(1e-12).unwrap();
}

#[test]
fn scores_are_invariant_to_weight_scale() {
    let cfg = tiny_config(StreamLayout::all_dual(4));
    let model = live_model(&cfg, 12, 0.1);
    let schedule = NoiseSchedule::cosine(cfg.timesteps).unwrap();
    let probes = probe_items(3, 1).unwrap();
    let base = TimestepWeighting::new(OmegaKind::Quadratic, &[10, 50, 90], cfg.timesteps).unwrap();
    let protected = BTreeSet::from([0, 3]);
    let reference = importance_scores(&model, &probes, &base, &schedule, 0, &protected, false).unwrap();
    for c in [0.5, 2.0, 10.0] {
        let scaled = importance_scores(&model, &probes, &base.scaled(c), &schedule, 0, &protected, false).unwrap();
        for (a, b) in reference.scores.iter().zip(&scaled.scores) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0), "c={c}"),
                (None, None) => {}
                _ => panic!("presence differs"),
            }
        }
        assert_eq!(reference.table, scaled.table);
    }
}

#[test]
fn reports_are_deterministic_and_fingerprinted() {
    let cfg = tiny_config(StreamLayout::all_dual(4));
    let model = live_model(&cfg, 13, 0.1);
    let schedule = NoiseSchedule::cosine(cfg.timesteps).unwrap();
    let probes = probe_items(4, 2).unwrap();
    let w = TimestepWeighting::new(OmegaKind::Linear, &[10, 30, 50, 70, 90], cfg.timesteps).unwrap();
    let p = BTreeSet::from([0, 3]);
    let a = importance_scores(&model, &probes, &w, &schedule, 3, &p, false).unwrap();
    let b = importance_scores(&model, &probes, &w, &schedule, 3, &p, false).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.config.fingerprint, b.config.fingerprint);
    let c = importance_scores(&model, &probes, &w, &schedule, 4, &p, false).unwrap();
    assert_ne!(a.config.fingerprint, c.config.fingerprint);
    let pure = importance_scores(&model, &probes, &w, &schedule, 3, &p, true).unwrap();
    assert_ne!(a.scores, pure.scores);
    assert!(importance_scores(&model, &[], &w, &schedule, 3, &p, false).is_err());
}
