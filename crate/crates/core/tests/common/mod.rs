//! Small models with every weight (gates included) perturbed away from the
//! zero-gate init, so every block contributes.

#![allow(dead_code)]

use std::collections::BTreeSet;

use mmdc_core::dataset::{Item, Prompt};
use mmdc_core::diffusion::NoiseSchedule;
use mmdc_core::importance::probe_noise;
use mmdc_core::{AblationMask, BlockKind, Model, ModelConfig, ModelInput, StreamLayout};
use mmdc_tensor::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(layout: StreamLayout) -> ModelConfig {
    ModelConfig {
        depth: layout.len(),
        d_model: 16,
        n_heads: 2,
        mlp_hidden: 32,
        timestep_dim: 16,
        layout,
        ..Default::default()
    }
}

/// Seeded init plus Gaussian noise of `std` on every parameter.
pub fn live_model(cfg: &ModelConfig, seed: u64, std: f64) -> Model {
    let mut m = Model::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for (_, p) in m.named_params_mut() {
        let noise = NdArray::randn(p.shape(), std, &mut rng);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    m
}

pub fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = NdArray::randn(&[batch, cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut rng);
    let t = (0..batch).map(|_| rng.random_range(1..=cfg.timesteps)).collect();
    let tokens = (0..batch)
        .flat_map(|_| Prompt::from_index(rng.random_range(0..Prompt::COUNT)).tokens())
        .collect();
    ModelInput { z_t, t, tokens }
}

pub fn max_diff(a: &NdArray, b: &NdArray) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// `model` with block `layer` physically deleted.
pub fn without_layer(model: &Model, layer: usize) -> Model {
    let mut blocks = model.blocks.clone();
    blocks.remove(layer);
    let kinds: Vec<BlockKind> = blocks.iter().map(|b| b.kind()).collect();
    let cfg = model.config.with_layout(StreamLayout::new(kinds).unwrap());
    Model::from_parts(cfg, model.embed.clone(), blocks, model.head.clone()).unwrap()
}

/// Cluster size of kept layer `l`, by walking forward one layer at a time.
pub fn oracle_cluster(l: usize, removed: &BTreeSet<usize>, depth: usize) -> usize {
    let mut k = 0;
    let mut j = l + 1;
    while j < depth && removed.contains(&j) {
        k += 1;
        j += 1;
    }
    k
}

/// Teacher arrays of layer `l`, stream by stream, in canonical order.
pub fn layer_arrays(model: &Model, l: usize) -> Vec<Vec<f32>> {
    model.blocks[l]
        .streams()
        .iter()
        .flat_map(|(_, s)| s.arrays().into_iter().map(|a| a.data().to_vec()).collect::<Vec<_>>())
        .collect()
}

/// Largest deviation of `student` layer `i` from the f64 mean of teacher
/// layers `l..=l+k`.
pub fn mean_oracle_error(student: &Model, i: usize, teacher: &Model, l: usize, k: usize) -> f64 {
    let got = layer_arrays(student, i);
    let members: Vec<Vec<Vec<f32>>> = (l..=l + k).map(|j| layer_arrays(teacher, j)).collect();
    let mut worst = 0.0f64;
    for (a, arr) in got.iter().enumerate() {
        for (e, &v) in arr.iter().enumerate() {
            let mean = members.iter().map(|m| m[a][e] as f64).sum::<f64>() / (k + 1) as f64;
            worst = worst.max((v as f64 - mean).abs());
        }
    }
    worst
}

/// Layer scores by direct enumeration: for each probe, the weighted mean over
/// `timesteps` of the squared prediction change when layer `l` is skipped,
/// then the mean over probes. `z_t` is assembled here from the probe noise.
pub fn brute_force_scores(
    model: &Model,
    probes: &[Item],
    timesteps: &[usize],
    weight: impl Fn(usize) -> f64,
    schedule: &NoiseSchedule,
    seed: u64,
    layers: &[usize],
) -> Vec<f64> {
    let cfg = &model.config;
    layers
        .iter()
        .map(|&l| {
            let mut per_probe = Vec::new();
            for (p, item) in probes.iter().enumerate() {
                let (mut num, mut den) = (0.0, 0.0);
                for &t in timesteps {
                    let w = weight(t);
                    let shape = [1, cfg.image_size, cfg.image_size, cfg.channels];
                    let eps = probe_noise(seed, p, t, &shape);
                    let ab = schedule.alpha_bar(t);
                    let z: Vec<f32> = item
                        .image
                        .data()
                        .iter()
                        .zip(eps.data())
                        .map(|(&x, &e)| (ab.sqrt() as f32) * x + ((1.0 - ab).sqrt() as f32) * e)
                        .collect();
                    let input = ModelInput {
                        z_t: NdArray::new(shape.to_vec(), z).unwrap(),
                        t: vec![t],
                        tokens: item.prompt.tokens().to_vec(),
                    };
                    let (full, _) = model.forward(&input, None, false).unwrap();
                    let mask = AblationMask::single(model.depth(), l);
                    let (abl, _) = model.forward(&input, Some(&mask), false).unwrap();
                    let d: f64 = full
                        .data()
                        .iter()
                        .zip(abl.data())
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum();
                    num += w * d;
                    den += w;
                }
                per_probe.push(num / den);
            }
            per_probe.iter().sum::<f64>() / per_probe.len() as f64
        })
        .collect()
}

/// Parameters whose name does not mention any of `trained` blocks, as bits.
pub fn frozen_params(m: &Model, trained: &[usize]) -> Vec<(String, Vec<u32>)> {
    m.named_params()
        .into_iter()
        .filter(|(n, _)| !trained.iter().any(|l| n.starts_with(&format!("blocks.{l}."))))
        .map(|(n, a)| (n, a.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
