//! Adam with bias correction, optional decoupled weight decay, and global
//! gradient-norm clipping.

use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};
use super::Scalar;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, grad_clip: 0.0 }
    }
}

pub struct Adam<F: Scalar> {
    cfg: AdamConfig,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, cfg: AdamConfig) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` are `(param, grad)` pairs from a backward
    /// pass. Returns the pre-clip global gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        mut grads: Vec<(ParamId, ArrayD<F>)>,
        lr: f64,
    ) -> f64 {
        self.step += 1;
        let norm = global_grad_norm(grads.iter().map(|(_, g)| g));
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let scale = F::of(self.cfg.grad_clip / norm);
            for (_, g) in grads.iter_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }

        let b1 = F::of(self.cfg.beta1);
        let b2 = F::of(self.cfg.beta2);
        let one = F::one();
        let eps = F::of(self.cfg.eps);
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let alpha = F::of(lr * bc2.sqrt() / bc1);
        let decay = F::of(lr * self.cfg.weight_decay);

        for (id, g) in grads {
            let i = idx(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (one - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let p = store.value_mut(id);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p - alpha * m / (v.sqrt() + eps);
            });
            if self.cfg.weight_decay > 0.0 {
                p.mapv_inplace(|w| w - decay * w);
            }
        }
        norm
    }
}

fn idx(id: ParamId) -> usize {
    id.index()
}

/// L2 norm over a set of gradient arrays.
pub fn global_grad_norm<'a, F: Scalar + 'a>(
    grads: impl Iterator<Item = &'a ArrayD<F>>,
) -> f64 {
    let mut acc = 0.0f64;
    for g in grads {
        for &v in g.iter() {
            let v = v.to_f64_lossy();
            acc += v * v;
        }
    }
    acc.sqrt()
}
