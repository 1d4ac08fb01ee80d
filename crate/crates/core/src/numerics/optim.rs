use super::ParamStore;
use crate::error::{Error, Result};

/// Plain gradient descent: `p <- p - lr * grad(p)` for every trainable parameter,
/// then clear all gradients.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    check_grads(store)?;
    for p in store.iter_mut().filter(|p| p.trainable) {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        p.tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .for_each(|(w, g)| *w -= lr * g);
    }
    store.zero_grads();
    Ok(())
}

fn check_grads(store: &ParamStore) -> Result<()> {
    if let Some(p) = store
        .iter()
        .find(|p| p.trainable && p.tensor.grad().is_none())
    {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    Ok(())
}

/// Learning rate that is multiplied by `gamma` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub gamma: f64,
    pub step_size: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.step_size == 0 {
            return self.base_lr;
        }
        self.base_lr * self.gamma.powi((epoch / self.step_size) as i32)
    }
}

/// SGD with optional heavy-ball momentum. With `momentum == 0` every step is
/// exactly [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Apply one update scaled by `lr`, then clear gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(store, lr);
        }
        check_grads(store)?;
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        }
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad().expect("checked above").to_vec();
            for ((w, v), g) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(vel.iter_mut())
                .zip(&grad)
            {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
        store.zero_grads();
        Ok(())
    }
}
