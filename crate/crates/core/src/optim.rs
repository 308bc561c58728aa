//! SGD with momentum and a linearly decaying learning rate.

use crate::params::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDecay {
    pub initial: f64,
    pub final_lr: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.initial;
        }
        let p = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        self.initial + (self.final_lr - self.initial) * p
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<P> {
    pub momentum: f64,
    velocity: Option<P>,
}

impl<P: Parameterized + Clone> Sgd<P> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: None,
        }
    }

    /// `v = momentum * v + g; params -= lr * v`.
    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) {
        let v = self.velocity.get_or_insert_with(|| {
            let mut z = grads.clone();
            z.fill(0.0);
            z
        });
        v.scale(self.momentum);
        v.axpy(1.0, grads);
        params.axpy(-lr, v);
    }
}
