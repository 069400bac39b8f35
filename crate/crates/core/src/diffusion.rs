//! Cosine noise schedule, forward noising, the noise-prediction objective and
//! a deterministic DDIM sampler.

use mmdc_tensor::{NdArray, Scalar, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::forward::{patchify, ModelInput};
use crate::model::{Model, Trainable};

const COSINE_OFFSET: f64 = 0.008;
const CLIP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule `abar(t) = f(t)/f(0)`, `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
    /// `s = 0.008`, clipped to `[1e-5, 1 - 1e-5]`, for `t = 1..=T`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::config("schedule.timesteps", ">= 2", steps));
        }
        let f = |t: f64| {
            let a = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_bar = (1..=steps)
            .map(|t| (f(t as f64) / f0).clamp(CLIP, 1.0 - CLIP))
            .collect();
        Ok(Self { alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Cumulative signal coefficient at `t` (1-based). `t = 0` is the clean image.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// `z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` per sample, images `[B, ...]`.
    pub fn add_noise(&self, x0: &NdArray, t: &[usize], eps: &NdArray) -> Result<NdArray> {
        if x0.shape() != eps.shape() {
            return Err(Error::invalid(format!(
                "x0 shape {:?} differs from noise shape {:?}",
                x0.shape(),
                eps.shape()
            )));
        }
        if x0.shape().first() != Some(&t.len()) {
            return Err(Error::invalid(format!(
                "{} timesteps for a batch of shape {:?}",
                t.len(),
                x0.shape()
            )));
        }
        let per = x0.numel() / t.len().max(1);
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check_t(ti)?;
            let ab = self.alpha_bar(ti);
            let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let range = i * per..(i + 1) * per;
            out.extend(
                x0.data()[range.clone()]
                    .iter()
                    .zip(&eps.data()[range])
                    .map(|(&x, &e)| a * x + s * e),
            );
        }
        Ok(NdArray::new(x0.shape().to_vec(), out)?)
    }
}

/// Timestep in `1..=total` with density proportional to `t^power`
/// (`power = 0` is uniform), by inverse transform: `ceil(total * u^(1/(1+power)))`.
pub fn draw_timestep<R: Rng + ?Sized>(total: usize, power: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    ((total as f64 * u.powf(1.0 / (1.0 + power))).ceil() as usize).clamp(1, total)
}

/// A noised training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionBatch {
    pub x0: NdArray,
    pub tokens: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: NdArray,
    pub z_t: NdArray,
}

impl DiffusionBatch {
    /// Draws one timestep per sample with [`draw_timestep`] and unit Gaussian noise.
    pub fn sample<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        x0: NdArray,
        tokens: Vec<usize>,
        timestep_power: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let b = x0.shape()[0];
        let t: Vec<usize> = (0..b)
            .map(|_| draw_timestep(schedule.timesteps(), timestep_power, rng))
            .collect();
        let eps = NdArray::randn(x0.shape(), 1.0, rng);
        Self::with_noise(schedule, x0, tokens, t, eps)
    }

    pub fn with_noise(
        schedule: &NoiseSchedule,
        x0: NdArray,
        tokens: Vec<usize>,
        t: Vec<usize>,
        eps: NdArray,
    ) -> Result<Self> {
        let z_t = schedule.add_noise(&x0, &t, &eps)?;
        Ok(Self {
            x0,
            tokens,
            t,
            eps,
            z_t,
        })
    }

    pub fn input(&self) -> ModelInput {
        ModelInput {
            z_t: self.z_t.clone(),
            t: self.t.clone(),
            tokens: self.tokens.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Records the noise-prediction MSE on `tape` and returns the scalar loss node.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model,
    batch: &DiffusionBatch,
    trainable: &Trainable,
) -> Result<Var> {
    let pass = model.forward_tape(tape, &batch.input(), None, trainable)?;
    let target = tape.constant(patchify(&model.config, &batch.eps)?.cast());
    Ok(tape.mse(pass.eps, target)?)
}

/// Mean squared error between predicted and true noise, over batch and pixels.
pub fn diffusion_loss(model: &Model, batch: &DiffusionBatch) -> Result<f64> {
    let (pred, _) = model.forward(&batch.input(), None, false)?;
    mse(&pred, &batch.eps)
}

pub(crate) fn mse(a: &NdArray, b: &NdArray) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "mse of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Evenly spaced descending timesteps from `T` towards 1.
fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| {
            let frac = i as f64 / steps as f64;
            (total as f64 - frac * total as f64).round().max(1.0) as usize
        })
        .collect()
}

/// Deterministic DDIM (eta = 0) generation for `tokens` (`B * text_len` ids),
/// starting from seeded Gaussian noise. Output is clipped to `[-1, 1]`.
pub fn sample(model: &Model, tokens: &[usize], schedule: &NoiseSchedule, steps: usize, seed: u64) -> Result<NdArray> {
    let cfg = &model.config;
    let b = tokens.len() / cfg.text_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = NdArray::randn(&[b, cfg.image_size, cfg.image_size, cfg.channels], 1.0, &mut rng);
    sample_from(model, tokens, schedule, steps, z)
}

/// [`sample`] from a given initial latent; no randomness after the start.
pub fn sample_from(
    model: &Model,
    tokens: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    z_start: NdArray,
) -> Result<NdArray> {
    let total = schedule.timesteps();
    if steps < 1 || steps > total {
        return Err(Error::invalid(format!("sampling steps {steps} outside [1, {total}]")));
    }
    let b = z_start.shape()[0];
    let ts = ddim_timesteps(total, steps);
    let mut z = z_start;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let input = ModelInput {
            z_t: z.clone(),
            t: vec![t; b],
            tokens: tokens.to_vec(),
        };
        let (eps, _) = model.forward(&input, None, false)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let next: Vec<f32> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zt, &e)| {
                // Predicted clean image, clipped to the data range.
                let x0 = ((zt as f64 - sn * e as f64) / sa).clamp(-1.0, 1.0);
                (pa * x0 + pn * e as f64) as f32
            })
            .collect();
        z = NdArray::new(z.shape().to_vec(), next)?;
    }
    let clipped = z.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    Ok(NdArray::new(z.shape().to_vec(), clipped)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::cosine(100).unwrap();
        for t in 1..100 {
            assert!(s.alpha_bar(t) > s.alpha_bar(t + 1), "t={t}");
        }
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar(100) < 1e-3);
    }

    #[test]
    fn cosine_midpoint_matches_direct_formula() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let f = |x: f64| (((x + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        let expect = f(0.5) / f(0.0);
        assert!((s.alpha_bar(50) - expect).abs() < 1e-12);
    }

    #[test]
    fn two_step_schedule() {
        let s = NoiseSchedule::cosine(2).unwrap();
        assert_eq!(s.timesteps(), 2);
        assert!(s.alpha_bar(1) > s.alpha_bar(2));
        assert!(s.alpha_bar(2) >= 1e-5);
        assert!(NoiseSchedule::cosine(1).is_err());
    }

    #[test]
    fn noising_limits() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = NdArray::from_fn(&[1, 4, 4, 3], |i| ((i % 7) as f32 / 3.5) - 1.0);
        let eps = NdArray::randn(&[1, 4, 4, 3], 1.0, &mut rng);
        // With T = 10000 the first step sits at the upper clip 1 - 1e-5.
        let fine = NoiseSchedule::cosine(10_000).unwrap();
        assert_eq!(fine.alpha_bar(1), 1.0 - 1e-5);
        let near = fine.add_noise(&x0, &[1], &eps).unwrap();
        assert!(near.max_abs_diff(&x0).unwrap() < 0.02);
        let far = s.add_noise(&x0, &[100], &eps).unwrap();
        assert!(far.max_abs_diff(&eps).unwrap() < 0.01);
        assert!(s.add_noise(&x0, &[0], &eps).is_err());
        assert!(s.add_noise(&x0, &[101], &eps).is_err());
    }

    #[test]
    fn timestep_draws_follow_the_power_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for power in [0.0, 3.0] {
            let n = 20_000;
            let draws: Vec<usize> = (0..n).map(|_| draw_timestep(100, power, &mut rng)).collect();
            assert!(draws.iter().all(|&t| (1..=100).contains(&t)));
            // E[u^(1/(1+p))] = (1+p)/(2+p); the ceiling adds about half a step.
            let mean = draws.iter().sum::<usize>() as f64 / n as f64 / 100.0;
            let expect = (1.0 + power) / (2.0 + power) + 0.005;
            assert!((mean - expect).abs() < 0.01, "power {power}: {mean} vs {expect}");
        }
    }

    #[test]
    fn ddim_timesteps_descend_from_top() {
        assert_eq!(ddim_timesteps(100, 1), vec![100]);
        let ts = ddim_timesteps(100, 50);
        assert_eq!(ts[0], 100);
        assert_eq!(*ts.last().unwrap(), 2);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(100, 100).last(), Some(&1));
    }
}
