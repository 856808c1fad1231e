use serde::{Deserialize, Serialize};

use super::param::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Elementwise clamp applied to gradients before the update; `None` disables.
    pub grad_clip: Option<f64>,
    /// Linear warmup length in optimizer steps.
    pub warmup: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(0.5),
            warmup: 0,
        }
    }
}

/// AdamW over the trainable parameters of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.value(id).len()])
            .collect::<Vec<_>>();
        AdamW {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let warm = self.config.warmup;
        if warm == 0 || self.step >= warm {
            self.config.lr
        } else {
            self.config.lr * (self.step + 1) as f64 / warm as f64
        }
    }

    /// Applies one update from the gradients stored in `store`, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let grads = p.gradient.data().to_vec();
            for (i, (w, g)) in p.tensor.data_mut().iter_mut().zip(grads).enumerate() {
                let g = match self.config.grad_clip {
                    Some(c) => g.clamp(-c, c),
                    None => g,
                };
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.config.eps) + self.config.weight_decay * *w);
            }
        }
        store.zero_grad();
    }
}
