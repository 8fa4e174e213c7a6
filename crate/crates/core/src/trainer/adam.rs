use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment buffers for one flat parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update at step `t` (1-based) with per-entry learning rates given
    /// by `lr(i)`.
    pub fn step(&mut self, p: &AdamParams, t: u64, params: &mut [f64], grad: &[f64], lr: impl Fn(usize) -> f64) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        let bc1 = 1.0 - p.beta1.powf(t as f64);
        let bc2 = 1.0 - p.beta2.powf(t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            let m = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            let v = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let mh = m / bc1;
            let vh = v / bc2;
            params[i] -= lr(i) * mh / (vh.sqrt() + p.eps);
        }
    }

    /// [`Moments::step`] on the entries `offset..offset + params.len()`
    /// with one learning rate.
    pub fn step_range(&mut self, p: &AdamParams, t: u64, offset: usize, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        let bc1 = 1.0 - p.beta1.powf(t as f64);
        let bc2 = 1.0 - p.beta2.powf(t as f64);
        let m = &mut self.m[offset..offset + params.len()];
        let v = &mut self.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grad[i];
            m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g;
            v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g * g;
            params[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + p.eps);
        }
    }

    /// Keeps the entries of blocks of `block` values whose mask bit is set.
    pub fn retain_blocks(&mut self, block: usize, keep: &[bool]) {
        let filter = |v: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(v.len());
            for (chunk, &k) in v.chunks(block).zip(keep) {
                if k {
                    out.extend_from_slice(chunk);
                }
            }
            *v = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }
}
