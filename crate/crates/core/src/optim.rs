//! SGD with momentum and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::Result;
use crate::nn::ParamStore;

/// `lr(step)`: linear warmup over `warmup` steps then cosine decay to zero
/// at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup.min(total)).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Heavy-ball SGD with coupled L2 weight decay, as in
/// PyTorch: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamStore,
    initialized: bool,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: params.zeros_like(), initialized: false }
    }

    pub fn from_velocity(velocity: ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity, initialized: true }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        params.check_layout(grads)?;
        params.check_layout(&self.velocity)?;
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let first = !self.initialized;
        for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(self.velocity.tensors_mut()) {
            for ((pv, &gv), vv) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                let d = gv + wd * *pv;
                *vv = if first { d } else { mu * *vv + d };
                *pv -= lr * *vv;
            }
        }
        self.initialized = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_lr(0.06, 0, 100, 0), 0.06);
        assert!((cosine_lr(0.06, 50, 100, 0) - 0.03).abs() < 1e-12);
        assert!(cosine_lr(0.06, 100, 100, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 4, 100, 10) - 0.5).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 100, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_matches_hand_computation() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::filled(&[1], 1.0));
        let mut g = p.zeros_like();
        g.tensors_mut()[0].data[0] = 0.5;
        let mut opt = Sgd::new(&p, 0.9, 0.1);
        opt.step(&mut p, &g, 0.1).unwrap();
        // v = 0.5 + 0.1 = 0.6, p = 1 - 0.06
        assert!((p.tensors()[0].data[0] - 0.94).abs() < 1e-6);
        opt.step(&mut p, &g, 0.1).unwrap();
        // v = 0.9 * 0.6 + 0.5 + 0.094 = 1.134
        assert!((p.tensors()[0].data[0] - (0.94 - 0.1134)).abs() < 1e-6);
    }
}
