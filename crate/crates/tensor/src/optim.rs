//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::array::NdArray;
use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. All parameters must carry a
    /// gradient; nothing is modified if any is missing.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut NdArray<f32>)>,
    {
        let params: Vec<(&str, &mut NdArray<f32>)> = params.into_iter().collect();
        for (name, p) in &params {
            match &p.grad {
                None => return Err(TensorError::MissingGrad(name.to_string())),
                Some(g) if g.len() != p.numel() => {
                    return Err(TensorError::StateMismatch {
                        name: name.to_string(),
                        state: g.len(),
                        param: p.numel(),
                    })
                }
                Some(_) => {}
            }
            if let Some(m) = self.moments.get(*name) {
                if m.m.len() != p.numel() {
                    return Err(TensorError::StateMismatch {
                        name: name.to_string(),
                        state: m.m.len(),
                        param: p.numel(),
                    });
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = (1.0 - c.lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;

        for (name, p) in params {
            let grad = p.grad.take().expect("checked above");
            let n = p.numel();
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *w *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
