//! Fixed-noise validation loss, teacher-student output gap and the
//! nearest-canonical prompt-match probe.

use mmdc_tensor::NdArray;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{classify, Dataset, Prompt};
use crate::diffusion::{mse, sample, DiffusionBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::forward::AblationMask;
use crate::model::{Model, ParamCount};

/// Evaluation chunk size; results do not depend on it.
const EVAL_CHUNK: usize = 64;

/// `(t, eps)` for item `index`, derived from `seed` alone so every model is
/// scored on identical noised inputs.
fn fixed_noise(schedule: &NoiseSchedule, seed: u64, index: usize, shape: &[usize]) -> (usize, NdArray) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let t = rng.random_range(1..=schedule.timesteps());
    (t, NdArray::randn(shape, 1.0, &mut rng))
}

/// The evaluation set as fixed-noise batches.
pub fn fixed_batches(data: &Dataset, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<DiffusionBatch>> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let mut out = Vec::new();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x0, tokens) = data.batch(&idx);
        let per: Vec<usize> = x0.shape()[1..].to_vec();
        let mut t = Vec::with_capacity(idx.len());
        let mut eps = Vec::with_capacity(x0.numel());
        for &i in &idx {
            let (ti, e) = fixed_noise(schedule, seed, i, &per);
            t.push(ti);
            eps.extend_from_slice(e.data());
        }
        let eps = NdArray::new(x0.shape().to_vec(), eps)?;
        out.push(DiffusionBatch::with_noise(schedule, x0, tokens, t, eps)?);
    }
    Ok(out)
}

fn weighted_mean(parts: &[(f64, usize)]) -> f64 {
    let n: usize = parts.iter().map(|p| p.1).sum();
    parts.iter().map(|(v, k)| v * *k as f64).sum::<f64>() / n as f64
}

/// Mean noise-prediction MSE over `data`, optionally with an ablation mask.
pub fn val_loss_masked(
    model: &Model,
    data: &Dataset,
    schedule: &NoiseSchedule,
    seed: u64,
    mask: Option<&AblationMask>,
) -> Result<f64> {
    let mut parts = Vec::new();
    for b in fixed_batches(data, schedule, seed)? {
        let (pred, _) = model.forward(&b.input(), mask, false)?;
        parts.push((mse(&pred, &b.eps)?, b.len()));
    }
    Ok(weighted_mean(&parts))
}

pub fn val_loss(model: &Model, data: &Dataset, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    val_loss_masked(model, data, schedule, seed, None)
}

/// Mean squared difference of the two models' noise predictions on identical inputs.
pub fn teacher_gap(
    student: &Model,
    teacher: &Model,
    data: &Dataset,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let (a, b) = (&student.config, &teacher.config);
    if (a.image_size, a.patch_size, a.channels, a.text_len, a.text_vocab)
        != (b.image_size, b.patch_size, b.channels, b.text_len, b.text_vocab)
    {
        return Err(Error::invalid(
            "teacher_gap needs models with the same input and output spaces",
        ));
    }
    let mut parts = Vec::new();
    for batch in fixed_batches(data, schedule, seed)? {
        let input = batch.input();
        let (ps, _) = student.forward(&input, None, false)?;
        let (pt, _) = teacher.forward(&input, None, false)?;
        parts.push((mse(&ps, &pt)?, batch.len()));
    }
    Ok(weighted_mean(&parts))
}

/// Samples one image per grammar prompt.
pub fn sample_all_prompts(
    model: &Model,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<(Vec<Prompt>, NdArray)> {
    let prompts = Prompt::all();
    let tokens: Vec<usize> = prompts.iter().flat_map(|p| p.tokens()).collect();
    let images = sample(model, &tokens, schedule, steps, seed)?;
    Ok((prompts, images))
}

/// Fraction of `images` (`[N, H, W, C]`) whose nearest canonical render is `prompts[i]`.
pub fn match_accuracy(prompts: &[Prompt], images: &NdArray) -> f64 {
    let per = images.numel() / prompts.len().max(1);
    let hits = prompts
        .iter()
        .enumerate()
        .filter(|(i, p)| classify(&images.data()[i * per..(i + 1) * per]) == **p)
        .count();
    hits as f64 / prompts.len().max(1) as f64
}

/// Samples every prompt once and scores with the nearest-canonical classifier.
pub fn prompt_match(model: &Model, schedule: &NoiseSchedule, steps: usize, seed: u64) -> Result<f64> {
    let (prompts, images) = sample_all_prompts(model, schedule, steps, seed)?;
    Ok(match_accuracy(&prompts, &images))
}

/// Validation loss with each layer ablated in turn, minus the unablated loss.
pub fn ablation_deltas(model: &Model, data: &Dataset, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<f64>> {
    let base = val_loss(model, data, schedule, seed)?;
    (0..model.depth())
        .map(|l| {
            let mask = AblationMask::single(model.depth(), l);
            Ok(val_loss_masked(model, data, schedule, seed, Some(&mask))? - base)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub model_hash: String,
    pub layout: String,
    pub val_loss: f64,
    pub teacher_gap: Option<f64>,
    pub prompt_match: Option<f64>,
    pub ablation_delta: Vec<f64>,
    pub params: ParamCount,
    pub wall_clock_s: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self.val_loss.is_finite()
            && self.teacher_gap.is_none_or(f64::is_finite)
            && self.ablation_delta.iter().all(|v| v.is_finite());
        if !finite || self.val_loss < 0.0 {
            return Err(Error::invalid("evaluation produced a non-finite or negative metric"));
        }
        if self.prompt_match.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::invalid("prompt-match accuracy outside [0, 1]"));
        }
        Ok(())
    }
}
