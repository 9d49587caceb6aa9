use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::TinyTransformer;

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Keeps an `f64` master copy of the parameters; the model's `f32` tensors are
/// rounded from it after every step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    master: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: Vec<(usize, Range<usize>)>,
}

impl AdamW {
    pub fn new(
        model: &TinyTransformer,
        lr: f64,
        (beta1, beta2): (f64, f64),
        weight_decay: f64,
        frozen: Vec<(usize, Range<usize>)>,
    ) -> Result<Self> {
        let ok = lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2);
        if !ok || !(weight_decay >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "optimizer settings lr={lr} betas=({beta1}, {beta2}) weight_decay={weight_decay}"
            )));
        }
        let master: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|t| t.data.iter().map(|&x| x as f64).collect())
            .collect();
        let zeros: Vec<Vec<f64>> = master.iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            master,
            m: zeros.clone(),
            v: zeros,
            frozen,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut TinyTransformer, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (ti, g) in grads.iter().enumerate() {
            let frozen: Vec<&Range<usize>> = self.frozen.iter().filter(|(f, _)| *f == ti).map(|(_, r)| r).collect();
            for (i, &gi) in g.iter().enumerate() {
                if frozen.iter().any(|r| r.contains(&i)) {
                    continue;
                }
                let m = &mut self.m[ti][i];
                let v = &mut self.v[ti][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                let w = &mut self.master[ti][i];
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        let master = &self.master;
        model.update_params(|params| {
            for (t, src) in params.iter_mut().zip(master) {
                for (dst, &s) in t.data.iter_mut().zip(src) {
                    *dst = s as f32;
                }
            }
        });
    }
}
