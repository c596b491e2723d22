use std::collections::HashMap;

use super::params::{LrGroup, ParamId, ParamStore};

/// Stochastic gradient descent with per-group learning rates and optional
/// heavy-ball momentum (off by default).
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Sgd::default()
    }

    pub fn with_momentum(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    /// `p -= lr(group) * grad` for every parameter whose group has a rate.
    /// Groups mapped to `None` are frozen. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(LrGroup) -> Option<f64>) {
        for (id, p) in store.iter_mut() {
            let Some(rate) = lr(p.group) else { continue };
            if self.momentum == 0.0 {
                for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                    *v -= rate * g;
                }
            } else {
                let vel = self
                    .velocity
                    .entry(id)
                    .or_insert_with(|| vec![0.0; p.grad.len()]);
                for ((v, g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel) {
                    *m = self.momentum * *m + g;
                    *v -= rate * *m;
                }
            }
        }
    }
}
