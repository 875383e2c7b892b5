//! First-order optimizers over flat parameter lists.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and coupled weight decay:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || v.len() != p.numel() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *x;
                *x -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam over one flat vector, with optional per-element freezing.
///
/// Frozen elements keep their value and moment state untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64], frozen: Option<&[bool]>) {
        assert_eq!(x.len(), self.m.len(), "adam state length");
        assert_eq!(grad.len(), self.m.len(), "adam grad length");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_matches_hand_recurrence() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.9, 0.01);
        let g = Tensor::new(vec![1], vec![0.5]).unwrap();
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        // v1 = 0.5 + 0.01, x1 = 1 - 0.051
        assert!((p.data()[0] - 0.949).abs() < 1e-15);
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        let v2 = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((p.data()[0] - (0.949 - 0.1 * v2)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_and_respects_freeze() {
        let mut x = vec![0.0, 0.0];
        let mut opt = Adam::new(2, 1e-3, 0.5, 0.99, 1e-8);
        opt.step(&mut x, &[2.0, -3.0], Some(&[false, true]));
        assert!((x[0] + 1e-3).abs() < 1e-10);
        assert_eq!(x[1], 0.0);
    }
}
