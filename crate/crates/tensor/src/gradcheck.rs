//! Central finite-difference check of tape gradients.
//!
//! The objective is evaluated in `f64` on both sides of the comparison: the
//! backward rules under test are the same generic code that runs in `f32`,
//! while float32 central differences would drown small derivatives in
//! rounding noise. The stencil is the fourth-order central one,
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`; the two-point stencil's
//! O(h^2) error alone exceeds 1e-4 relative where curvature is large and the
//! slope small (GELU tails, saturated softmax).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::NdArray;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// A scalar-valued function of a list of parameter tensors.
pub trait Objective {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    /// Number of sampled coordinates; `0` checks every coordinate.
    pub coords: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            coords: 32,
            step: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdSample {
    pub param: usize,
    pub index: usize,
    pub autodiff: f64,
    pub central: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub samples: Vec<FdSample>,
}

fn eval_value<F: Objective>(f: &F, params: &[NdArray<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::no_grad();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Max over sampled coordinates of
/// `|autodiff - central| / (|central| + 1e-8)`.
pub fn finite_diff_check<F: Objective>(f: &F, params: &[NdArray<f32>], opts: FdOptions) -> Result<FdReport> {
    let mut p64: Vec<NdArray<f64>> = params.iter().map(|p| p.cast()).collect();

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = p64.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f.eval(&mut tape, &vars)?;
    let first = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| grads.take(v)).collect();
    drop(tape);

    let second = eval_value(f, &p64)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let total: usize = p64.iter().map(|p| p.numel()).sum();
    let coords: Vec<(usize, usize)> = if opts.coords == 0 || opts.coords >= total {
        p64.iter()
            .enumerate()
            .flat_map(|(pi, p)| (0..p.numel()).map(move |i| (pi, i)))
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        (0..opts.coords)
            .map(|_| {
                let mut flat = rng.random_range(0..total);
                let mut pi = 0;
                while flat >= p64[pi].numel() {
                    flat -= p64[pi].numel();
                    pi += 1;
                }
                (pi, flat)
            })
            .collect()
    };

    let h = opts.step;
    let mut samples = Vec::with_capacity(coords.len());
    for (pi, idx) in coords {
        let orig = p64[pi].data()[idx];
        let mut at = |offset: f64| -> Result<f64> {
            p64[pi].data_mut()[idx] = orig + offset;
            eval_value(f, &p64)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        p64[pi].data_mut()[idx] = orig;
        let central = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        let autodiff = analytic[pi].as_ref().map_or(0.0, |g| g[idx]);
        let rel_error = (autodiff - central).abs() / (central.abs() + 1e-8);
        samples.push(FdSample {
            param: pi,
            index: idx,
            autodiff,
            central,
            rel_error,
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(FdReport { max_rel_error, samples })
}
