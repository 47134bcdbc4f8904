//! Adaptive per-parameter optimizer with decoupled weight decay.
//!
//! Only tensors that appear in the gradient map are touched, so frozen
//! tensors (which the tape never emits gradients for) are structurally
//! immune to updates, including weight decay. A fresh optimizer is used
//! per training stage; epoch loops reset `lr` from [`epoch_lr`].

use crate::autodiff::{Grads, Params};

/// Per-epoch learning rate: a short linear warmup into the base rate,
/// then cosine decay to 5% of it by the final epoch. Pure in its inputs,
/// so interrupted runs that replay a stage reproduce the same schedule.
pub fn epoch_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    assert!(
        total_epochs > 0 && epoch < total_epochs,
        "epoch {epoch} outside schedule of {total_epochs}"
    );
    let warmup = (total_epochs / 8).clamp(1, 3);
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let floor = base / 20.0;
    let span = (total_epochs - warmup).max(1) as f64;
    let progress = (epoch - warmup) as f64 / span;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u64,
    /// First/second moment per parameter id, allocated on first sight.
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Applies one update. Decay is decoupled: it scales the parameter
    /// directly instead of entering the gradient moments.
    pub fn step(&mut self, params: &mut Params, grads: &Grads) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads.iter() {
            debug_assert!(params.requires_grad(id), "gradient for a frozen tensor");
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            let data = params.data_mut(id);
            assert_eq!(data.len(), grad.len(), "gradient length mismatch");
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}
