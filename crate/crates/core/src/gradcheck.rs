//! Finite-difference check of the full model's noise-prediction loss.
//!
//! The loss is evaluated on an `f64` tape. Parameters are stored in `f32`, so
//! a coordinate is perturbed in `f32` and only used when `x ± h` and `x ± 2h`
//! are all exactly representable; the stencil then sees exact offsets.

use mmdc_tensor::{FdOptions, FdReport, FdSample, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{loss_on_tape, DiffusionBatch};
use crate::error::{Error, Result};
use crate::model::{Model, Trainable};

fn loss_f64(model: &Model, batch: &DiffusionBatch) -> Result<f64> {
    let mut tape = Tape::<f64>::no_grad();
    let loss = loss_on_tape(&mut tape, model, batch, &Trainable::frozen())?;
    Ok(tape.value(loss).item()?)
}

/// Compares tape gradients of the diffusion loss against the fourth-order
/// central difference at `opts.coords` random coordinates over all
/// parameters. `opts.step` is rounded down to a power of two.
pub fn model_grad_check(model: &Model, batch: &DiffusionBatch, opts: FdOptions) -> Result<FdReport> {
    let h = 2f64.powi(opts.step.log2().floor() as i32);
    let mut tape = Tape::<f64>::new();
    let loss = loss_on_tape(&mut tape, model, batch, &Trainable::all(model.depth()))?;
    let mut grads = tape.backward(loss)?;
    drop(tape);

    let names: Vec<(String, usize)> = model.named_params().into_iter().map(|(n, a)| (n, a.numel())).collect();
    let total: usize = names.iter().map(|n| n.1).sum();
    let analytic: Vec<Vec<f64>> = names
        .iter()
        .map(|(n, len)| grads.take_named(n).unwrap_or_else(|| vec![0.0; *len]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = model.clone();
    let mut samples = Vec::with_capacity(opts.coords);
    let mut attempts = 0;
    while samples.len() < opts.coords {
        attempts += 1;
        if attempts > 100 * opts.coords.max(1) {
            return Err(Error::invalid("too few coordinates admit exact f32 perturbations"));
        }
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= names[pi].1 {
            flat -= names[pi].1;
            pi += 1;
        }
        let orig = work.named_params()[pi].1.data()[flat];
        let shifted: Vec<f32> = [h, -h, 2.0 * h, -2.0 * h]
            .iter()
            .map(|&o| (orig as f64 + o) as f32)
            .collect();
        let exact = shifted
            .iter()
            .zip([h, -h, 2.0 * h, -2.0 * h])
            .all(|(&s, o)| s as f64 - orig as f64 == o);
        if !exact {
            continue;
        }
        let mut at = |v: f32| -> Result<f64> {
            work.named_params_mut()[pi].1.data_mut()[flat] = v;
            loss_f64(&work, batch)
        };
        let (p1, m1, p2, m2) = (at(shifted[0])?, at(shifted[1])?, at(shifted[2])?, at(shifted[3])?);
        work.named_params_mut()[pi].1.data_mut()[flat] = orig;
        let central = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let autodiff = analytic[pi][flat];
        samples.push(FdSample {
            param: pi,
            index: flat,
            autodiff,
            central,
            rel_error: (autodiff - central).abs() / (central.abs() + 1e-8),
        });
    }
    Ok(FdReport {
        max_rel_error: samples.iter().map(|s| s.rel_error).fold(0.0, f64::max),
        samples,
    })
}
