//! SGD with momentum and weight decay.

use super::Parameter;

/// One SGD step over a parameter group:
/// `v <- momentum * v + grad + weight_decay * w; w <- w - lr * v`.
/// Gradients are zeroed afterwards. Panics if any parameter has no gradient.
pub fn sgd_step(params: &[&Parameter], lr: f32, momentum: f32, weight_decay: f32) {
    for p in params {
        let grad = p
            .tensor()
            .grad()
            .unwrap_or_else(|| panic!("sgd_step: parameter '{}' has no gradient", p.name()));
        let mut v = p.momentum_mut();
        let mut w = p.tensor().data_mut();
        for i in 0..w.len() {
            v[i] = momentum * v[i] + grad[i] + weight_decay * w[i];
            w[i] -= lr * v[i];
        }
        drop(w);
        drop(v);
        p.tensor().zero_grad();
    }
}
