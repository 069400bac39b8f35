mod common;

use std::collections::BTreeSet;

use common::{layer_arrays, live_model, mean_oracle_error, oracle_cluster, tiny_config};
use mmdc_core::compress::{apply_depth_prune, convert_hybrid, HybridPlan, MlpInit, PrunePlan};
use mmdc_core::importance::plan_only;
use mmdc_core::{Block, BlockKind, Error, Model, ParamCount, StreamLayout, StreamWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn clusters_tile_the_teacher(depth in 3usize..48, bits in prop::collection::vec(any::<bool>(), 48)) {
        let removed: BTreeSet<usize> = (1..depth - 1).filter(|&l| bits[l]).collect();
        let keep: Vec<usize> = (0..depth).filter(|l| !removed.contains(l)).collect();
        let remove: Vec<usize> = removed.iter().copied().collect();
        let plan = PrunePlan::new(&keep, &remove, depth).unwrap();
        let covered: usize = plan.clusters.values().map(|k| 1 + k).sum();
        prop_assert_eq!(covered, depth);
        for &l in &keep {
            prop_assert_eq!(plan.cluster(l), oracle_cluster(l, &removed, depth));
        }
        prop_assert_eq!(plan.student_depth(), keep.len());
    }

    #[test]
    fn plans_touching_protected_layers_are_rejected(depth in 3usize..48, bits in prop::collection::vec(any::<bool>(), 48), last in any::<bool>()) {
        let mut removed: BTreeSet<usize> = (1..depth - 1).filter(|&l| bits[l]).collect();
        let hit = if last { depth - 1 } else { 0 };
        removed.insert(hit);
        let keep: Vec<usize> = (0..depth).filter(|l| !removed.contains(l)).collect();
        let remove: Vec<usize> = removed.into_iter().collect();
        prop_assert!(matches!(
            PrunePlan::new(&keep, &remove, depth),
            Err(Error::ProtectedLayerPruned(l)) if l == 0 || l == depth - 1
        ));
    }
}

#[test]
fn sixty_layer_plan_removes_thirty_interior_layers() {
    let (keep, remove) = plan_only(60, 30, &BTreeSet::from([0, 59])).unwrap();
    assert_eq!(remove.len(), 30);
    assert!(remove.iter().all(|&l| (1..=58).contains(&l)));
    assert!(keep.contains(&0) && keep.contains(&59));
    let plan = PrunePlan::new(&keep, &remove, 60).unwrap();
    assert_eq!(plan.student_depth(), 30);
}

#[test]
fn averaged_init_matches_elementwise_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..50 {
        let depth = rng.random_range(3..9);
        let cfg = tiny_config(StreamLayout::all_dual(depth));
        let teacher = live_model(&cfg, case, 0.2);
        let removed: BTreeSet<usize> = (1..depth - 1).filter(|_| rng.random_bool(0.5)).collect();
        let keep: Vec<usize> = (0..depth).filter(|l| !removed.contains(l)).collect();
        let remove: Vec<usize> = removed.iter().copied().collect();
        let plan = PrunePlan::new(&keep, &remove, depth).unwrap();
        let student = apply_depth_prune(&teacher, &plan).unwrap();
        assert_eq!(student.depth(), keep.len());
        for (i, &l) in keep.iter().enumerate() {
            let k = oracle_cluster(l, &removed, depth);
            if k == 0 {
                let a = student.blocks[i].streams();
                let b = teacher.blocks[l].streams();
                for ((_, x), (_, y)) in a.iter().zip(&b) {
                    for (p, q) in x.arrays().iter().zip(y.arrays()) {
                        assert!(p.bit_eq(q), "case {case}: k=0 block {l} altered");
                    }
                }
                continue;
            }
            let err = mean_oracle_error(&student, i, &teacher, l, k);
            assert!(err <= 1e-6, "case {case} layer {l}: {err}");
            assert_eq!(layer_arrays(&student, i).len(), layer_arrays(&teacher, l).len());
        }
        for (a, b) in student.embed.arrays().iter().zip(teacher.embed.arrays()) {
            assert!(a.bit_eq(b));
        }
    }
}

#[test]
fn hybrid_conversion_copies_image_stream() {
    let cfg = tiny_config(StreamLayout::all_dual(6));
    let teacher = live_model(&cfg, 1, 0.1);
    let plan = HybridPlan::new(6, 2).unwrap();
    for mlp in [MlpInit::CopyImage, MlpInit::Fresh(9)] {
        let hybrid = convert_hybrid(&teacher, &plan, mlp).unwrap();
        let kinds = hybrid.config.layout.kinds().to_vec();
        let mut expect = vec![BlockKind::Dual; 2];
        expect.extend([BlockKind::Single; 4]);
        assert_eq!(kinds, expect);
        for l in 2..6 {
            let (Block::Single { shared }, Block::Dual { image, .. }) = (&hybrid.blocks[l], &teacher.blocks[l]) else {
                panic!("layer {l} has the wrong kind");
            };
            for (a, b) in shared.projections().iter().zip(image.projections()) {
                assert!(a.bit_eq(b), "layer {l} projection differs");
            }
            assert!(shared.ada_w.bit_eq(&image.ada_w));
            let mlp_equal = shared.w1.bit_eq(&image.w1) && shared.w2.bit_eq(&image.w2);
            assert_eq!(mlp_equal, mlp == MlpInit::CopyImage);
        }
        for l in 0..2 {
            assert_eq!(hybrid.blocks[l], teacher.blocks[l]);
        }
    }
}

#[test]
fn hybrid_parameter_identity() {
    for (depth, n_dual) in [(6, 2), (12, 4), (30, 10)] {
        let pruned = tiny_config(StreamLayout::all_dual(depth));
        let hybrid = pruned.with_layout(StreamLayout::hybrid(n_dual, depth - n_dual));
        let (p, h) = (ParamCount::for_config(&pruned), ParamCount::for_config(&hybrid));
        let text_stream = StreamWeights::count(&pruned);
        assert_eq!(h.total, p.total - (depth - n_dual) * text_stream);
        assert!(h.total < p.total);
    }
    let cfg = tiny_config(StreamLayout::all_dual(6));
    let teacher = live_model(&cfg, 2, 0.1);
    let hybrid = convert_hybrid(&teacher, &HybridPlan::new(6, 2).unwrap(), MlpInit::CopyImage).unwrap();
    let numel = |m: &Model| m.named_params().iter().map(|(_, a)| a.numel()).sum::<usize>();
    assert_eq!(numel(&hybrid), hybrid.parameter_count().total);
    assert_eq!(numel(&teacher) - numel(&hybrid), 4 * StreamWeights::count(&cfg));
}
