//! Deterministic first-order optimizers for the toy training loops.

use super::tensor::Tensor;

/// Adam with bias correction. State is keyed by parameter order, so callers
/// must pass parameters in a stable order across steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update. `grads[i]` must match `params[i]` in shape.
    /// `scale` multiplies every gradient before the moment update (used for
    /// adaptive gradient clipping).
    pub fn step_scaled(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], scale: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        assert_eq!(params.len(), self.m.len(), "parameter count changed mid-run");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            let dst = p.data_mut();
            for j in 0..dst.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                dst[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step_scaled(params, grads, 1.0);
    }
}

/// Plain gradient descent step.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        let dst = p.data_mut();
        for (x, &gj) in dst.iter_mut().zip(g.data()) {
            *x -= lr * gj;
        }
    }
}
