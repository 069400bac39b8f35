//! Training loops shared by teacher training and the fine-tuning stages.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use mmdc_tensor::{AdamW, AdamWConfig, Gradients, NdArray, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::diffusion::{loss_on_tape, DiffusionBatch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::val_loss;
use crate::model::{Model, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Record the training loss every this many steps.
    pub log_every: usize,
    /// Evaluate validation loss every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Training timesteps are drawn with density proportional to
    /// `t^timestep_power`; 0 is uniform. Prompt layout is only learnable at
    /// high noise, where the noise-prediction loss is nearly flat.
    pub timestep_power: f64,
    /// Blocks that never receive updates.
    pub frozen: BTreeSet<usize>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            log_every: 10,
            eval_every: 250,
            timestep_power: 3.0,
            frozen: BTreeSet::new(),
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{name}.batch_size"), ">= 1", 0));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("{name}.lr"), "finite and > 0", self.lr));
        }
        if !(self.timestep_power >= 0.0 && self.timestep_power.is_finite()) {
            return Err(Error::config(
                format!("{name}.timestep_power"),
                "finite and >= 0",
                self.timestep_power,
            ));
        }
        if self.log_every == 0 {
            return Err(Error::config(format!("{name}.log_every"), ">= 1", 0));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        })
    }
}

/// One logged row: named loss terms and, when evaluated, the validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub terms: Vec<(String, f64)>,
    pub val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub rows: Vec<LogRow>,
}

impl LossCurve {
    pub fn push(&mut self, step: usize, terms: Vec<(String, f64)>, val: Option<f64>) {
        self.rows.push(LogRow { step, terms, val });
    }

    pub fn first_term(&self, name: &str) -> Option<f64> {
        self.rows.iter().find_map(|r| term(r, name))
    }

    pub fn last_term(&self, name: &str) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| term(r, name))
    }

    pub fn val_points(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.val.map(|v| (r.step, v))).collect()
    }

    /// `step,<term>...,val` with empty cells for missing values.
    pub fn to_csv(&self) -> String {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            for (n, _) in &r.terms {
                if !names.contains(&n.as_str()) {
                    names.push(n);
                }
            }
        }
        let mut out = String::from("step");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",val\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.step);
            for n in &names {
                out.push(',');
                if let Some(v) = term(r, n) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push(',');
            if let Some(v) = r.val {
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn term(r: &LogRow, name: &str) -> Option<f64> {
    r.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
}

/// Copies gradients for the selected parameters into the model and takes one
/// optimizer step. Selected parameters the loss does not reach get a zero
/// gradient.
pub fn apply_gradients(
    model: &mut Model,
    opt: &mut AdamW,
    grads: &mut Gradients<f32>,
    trainable: &Trainable,
) -> Result<()> {
    let mut params: Vec<(String, &mut NdArray)> = model
        .named_params_mut()
        .into_iter()
        .filter(|(n, _)| trainable.selects(n))
        .collect();
    for (name, p) in params.iter_mut() {
        let g = grads.take_named(name).unwrap_or_else(|| vec![0.0; p.numel()]);
        p.set_grad(g)?;
    }
    opt.step(params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)))?;
    Ok(())
}

/// Epoch-shuffled minibatch indices.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Result of a fine-tuning run.
pub struct FinetuneOutcome {
    /// Weights with the lowest validation loss seen (the input counts as step 0).
    pub model: Model,
    pub best_step: usize,
    pub best_val: f64,
    pub initial_val: f64,
    pub curve: LossCurve,
}

/// Full-parameter training on the noise-prediction loss (minus `cfg.frozen`),
/// with validation every `cfg.eval_every` steps and best-validation retention.
pub fn global_finetune(
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &TrainRunConfig,
    val_seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.validate("finetune")?;
    let trainable = Trainable::all_except(model.depth(), &cfg.frozen);
    let initial_val = val_loss(model, val, schedule, val_seed)?;
    let mut curve = LossCurve::default();
    curve.push(0, vec![], Some(initial_val));
    let mut best = (model.clone(), 0, initial_val);
    if cfg.steps == 0 {
        return Ok(FinetuneOutcome {
            model: best.0,
            best_step: 0,
            best_val: initial_val,
            initial_val,
            curve,
        });
    }
    let mut current = model.clone();
    let mut opt = cfg.optimizer();
    let mut sampler = BatchSampler::new(train.len(), cfg.seed);
    for step in 1..=cfg.steps {
        let idx = sampler.next(cfg.batch_size);
        let (x0, tokens) = train.batch(&idx);
        let batch = DiffusionBatch::sample(schedule, x0, tokens, cfg.timestep_power, sampler.rng())?;
        let mut tape = Tape::<f32>::new();
        let loss = loss_on_tape(&mut tape, &current, &batch, &trainable)?;
        let loss_value = tape.value(loss).item()? as f64;
        let mut grads = tape.backward(loss)?;
        drop(tape);
        apply_gradients(&mut current, &mut opt, &mut grads, &trainable)?;

        let evaluate = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let val = if evaluate {
            let v = val_loss(&current, val, schedule, val_seed)?;
            if v < best.2 {
                best = (current.clone(), step, v);
            }
            log::info!("step {step}: train {loss_value:.4} val {v:.4}");
            Some(v)
        } else {
            None
        };
        if val.is_some() || step % cfg.log_every == 0 || step == 1 {
            curve.push(step, vec![("loss".into(), loss_value)], val);
        }
    }
    Ok(FinetuneOutcome {
        model: best.0,
        best_step: best.1,
        best_val: best.2,
        initial_val,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = s.next(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next(25).len(), 25);
    }

    #[test]
    fn csv_has_header_and_blank_cells() {
        let mut c = LossCurve::default();
        c.push(0, vec![], Some(1.0));
        c.push(1, vec![("loss".into(), 0.5)], None);
        assert_eq!(c.to_csv(), "step,loss,val\n0,,1\n1,0.5,\n");
        assert_eq!(c.first_term("loss"), Some(0.5));
    }

    #[test]
    fn selects_by_parameter_name() {
        let t = Trainable::blocks([2]);
        assert!(t.selects("blocks.2.img.attn.wq"));
        assert!(!t.selects("blocks.12.img.attn.wq"));
        assert!(!t.selects("embed.token"));
        assert!(Trainable::all(3).selects("head.w"));
    }
}
