//! First-order optimizers operating on parameter lists in place.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

pub trait Optimizer {
    /// Applies one update. `grads[i]` must have the shape of `params[i]`.
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]);
}

/// Adaptive-moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for ((w, &gi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.velocity[k].iter_mut())
            {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
    }
}

/// Serializable optimizer choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { lr: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl OptimizerConfig {
    pub fn build(&self) -> Box<dyn Optimizer + Send> {
        match *self {
            OptimizerConfig::Adam { lr } => Box::new(Adam::new(lr)),
            OptimizerConfig::Sgd { lr, momentum } => Box::new(Sgd::new(lr, momentum)),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let g = vec![Tensor::vector(vec![0.5, -1.0])];
        Sgd::new(0.1, 0.0).step(&mut p, &g);
        assert_eq!(p[0].data(), &[0.95, 2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
        let g = vec![Tensor::vector(vec![3.0, -0.01])];
        Adam::new(1e-3).step(&mut p, &g);
        assert!((p[0].data()[0] + 1e-3).abs() < 1e-9);
        assert!((p[0].data()[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = vec![Tensor::vector(vec![5.0])];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![Tensor::vector(vec![2.0 * p[0].data()[0]])];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }
}
