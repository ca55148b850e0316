//! Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-15 }
    }
}

/// Adam state. Bias correction uses one step counter shared by all entries,
/// so entries appended later start with zero moments and full correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Descends: `params -= lr · m̂ / (sqrt(v̂) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, |_| lr);
    }

    /// [`Adam::step`] with a learning rate per entry.
    pub fn step_with_lr(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.steps.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr(i) * mh / (vh.sqrt() + eps);
        }
    }

    /// Rebuilds the moments block by block (`block` entries each): new block
    /// `i` copies old block `sources[i]`, or starts at zero for `None`.
    pub fn remap_blocks(&mut self, sources: &[Option<usize>], block: usize) {
        let remap = |xs: &Vec<f64>| {
            let mut out = Vec::with_capacity(sources.len() * block);
            for src in sources {
                match src {
                    Some(j) => out.extend_from_slice(&xs[j * block..(j + 1) * block]),
                    None => out.resize(out.len() + block, 0.0),
                }
            }
            out
        };
        self.m = remap(&self.m);
        self.v = remap(&self.v);
    }
}
