//! Scalar loss functions with exact gradients.
//!
//! Probabilities are clamped to `[LOG_EPS, 1 - LOG_EPS]` before every
//! logarithm; inside the clamped (flat) region the gradient is exactly zero,
//! which is the true derivative of the clamped expression.

use super::{GradFn, Shape, Tensor};

/// Clamp bound applied to probabilities before logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

fn row_softmax(logits: &[f32], classes: usize, row: usize, out: &mut [f64]) {
    let base = row * classes;
    let mut m = f64::NEG_INFINITY;
    for c in 0..classes {
        m = m.max(logits[base + c] as f64);
    }
    let mut z = 0.0f64;
    for c in 0..classes {
        let e = ((logits[base + c] as f64) - m).exp();
        out[c] = e;
        z += e;
    }
    for c in 0..classes {
        out[c] /= z;
    }
}

struct SoftmaxCrossEntropyBackward {
    targets: Vec<usize>,
    weights: Option<Vec<f32>>,
    denom: f64,
}

/// Cross-entropy over the channel axis with one class index per (n, y, x)
/// location, averaged over all locations.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Tensor {
    let rows = logits.shape().n * logits.shape().h * logits.shape().w;
    softmax_cross_entropy_weighted(logits, targets, None, rows as f64)
}

/// Weighted variant: `sum_r w_r * ce_r / denom`. `weights == None` means
/// all-ones. Locations are rows in (n, y, x) order; the channel axis holds
/// the class logits.
pub fn softmax_cross_entropy_weighted(
    logits: &Tensor,
    targets: &[usize],
    weights: Option<&[f32]>,
    denom: f64,
) -> Tensor {
    let shape = logits.shape();
    let classes = shape.c;
    let rows = shape.n * shape.h * shape.w;
    assert_eq!(targets.len(), rows, "softmax_cross_entropy: {} targets for {} locations", targets.len(), rows);
    if let Some(w) = weights {
        assert_eq!(w.len(), rows);
    }
    assert!(denom > 0.0);
    for (i, &t) in targets.iter().enumerate() {
        assert!(
            t < classes,
            "softmax_cross_entropy: target {t} at row {i} outside class range 0..{classes}"
        );
    }

    // Rows are (n, y, x) with the channel axis gathered per row.
    let data = logits.data();
    let plane = shape.h * shape.w;
    let gather = |row: usize, c: usize| data[((row / plane) * classes + c) * plane + row % plane];

    let mut probs = vec![0.0f64; classes];
    let mut total = 0.0f64;
    let mut row_logits = vec![0.0f32; classes];
    for r in 0..rows {
        for c in 0..classes {
            row_logits[c] = gather(r, c);
        }
        row_softmax(&row_logits, classes, 0, &mut probs);
        let w = weights.map_or(1.0, |ws| ws[r] as f64);
        if w != 0.0 {
            total += w * -clamped_ln(probs[targets[r]]);
        }
    }
    drop(data);
    Tensor::from_op(
        Shape::scalar(),
        vec![(total / denom) as f32],
        vec![logits.clone()],
        Box::new(SoftmaxCrossEntropyBackward {
            targets: targets.to_vec(),
            weights: weights.map(|w| w.to_vec()),
            denom,
        }),
        "softmax_cross_entropy",
    )
}

impl GradFn for SoftmaxCrossEntropyBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go = out.inner.grad.borrow().as_ref().unwrap()[0] as f64;
        let logits = &parents[0];
        let shape = logits.shape();
        let classes = shape.c;
        let plane = shape.h * shape.w;
        let rows = shape.n * plane;
        let data = logits.data();
        let mut gi = vec![0.0f32; shape.count()];
        let mut probs = vec![0.0f64; classes];
        let mut row_logits = vec![0.0f32; classes];
        for r in 0..rows {
            let w = self.weights.as_ref().map_or(1.0, |ws| ws[r] as f64);
            if w == 0.0 {
                continue;
            }
            for c in 0..classes {
                row_logits[c] = data[((r / plane) * classes + c) * plane + r % plane];
            }
            row_softmax(&row_logits, classes, 0, &mut probs);
            let pt = probs[self.targets[r]];
            if !(LOG_EPS..=1.0 - LOG_EPS).contains(&pt) {
                continue; // flat region of the clamped loss
            }
            let factor = go * w / self.denom;
            for c in 0..classes {
                let delta = if c == self.targets[r] { 1.0 } else { 0.0 };
                gi[((r / plane) * classes + c) * plane + r % plane] +=
                    (factor * (probs[c] - delta)) as f32;
            }
        }
        drop(data);
        logits.accumulate_grad(&gi);
    }
}

struct BinaryCrossEntropyBackward {
    label: f64,
}

/// Mean binary cross-entropy of a probability tensor against a constant
/// label in [0, 1].
pub fn binary_cross_entropy(prob: &Tensor, label: f32) -> Tensor {
    assert!(
        (0.0..=1.0).contains(&label),
        "binary_cross_entropy: label {label} outside [0, 1]"
    );
    let y = label as f64;
    let d = prob.data();
    let mut total = 0.0f64;
    for &p in d.iter() {
        let p = p as f64;
        total -= y * clamped_ln(p) + (1.0 - y) * clamped_ln(1.0 - p);
    }
    let count = d.len() as f64;
    drop(d);
    Tensor::from_op(
        Shape::scalar(),
        vec![(total / count) as f32],
        vec![prob.clone()],
        Box::new(BinaryCrossEntropyBackward { label: y }),
        "binary_cross_entropy",
    )
}

impl GradFn for BinaryCrossEntropyBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go = out.inner.grad.borrow().as_ref().unwrap()[0] as f64;
        let prob = &parents[0];
        let count = prob.shape().count() as f64;
        let y = self.label;
        let d = prob.data();
        let gi: Vec<f32> = d
            .iter()
            .map(|&p| {
                let p = p as f64;
                if !(LOG_EPS..=1.0 - LOG_EPS).contains(&p) {
                    return 0.0;
                }
                ((go / count) * (-y / p + (1.0 - y) / (1.0 - p))) as f32
            })
            .collect();
        drop(d);
        prob.accumulate_grad(&gi);
    }
}

struct SmoothL1Backward {
    denom: f64,
}

/// Mean smooth-L1 (Huber with delta 1) over all elements.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Tensor {
    smooth_l1_sum(pred, target, pred.shape().count() as f64)
}

/// Smooth-L1 summed over all elements and divided by `denom`; the detector
/// uses the positive-anchor count as the denominator.
pub fn smooth_l1_sum(pred: &Tensor, target: &Tensor, denom: f64) -> Tensor {
    assert_eq!(
        pred.shape(),
        target.shape(),
        "smooth_l1: shape mismatch {} vs {}",
        pred.shape(),
        target.shape()
    );
    assert!(denom > 0.0);
    let mut total = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let r = (p - t) as f64;
        total += if r.abs() < 1.0 {
            0.5 * r * r
        } else {
            r.abs() - 0.5
        };
    }
    Tensor::from_op(
        Shape::scalar(),
        vec![(total / denom) as f32],
        vec![pred.clone(), target.clone()],
        Box::new(SmoothL1Backward { denom }),
        "smooth_l1",
    )
}

impl GradFn for SmoothL1Backward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go = out.inner.grad.borrow().as_ref().unwrap()[0] as f64;
        let (pred, target) = (&parents[0], &parents[1]);
        let d: Vec<f32> = pred
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(&p, &t)| {
                let r = (p - t) as f64;
                let slope = if r.abs() < 1.0 { r } else { r.signum() };
                ((go / self.denom) * slope) as f32
            })
            .collect();
        if pred.requires_grad() {
            pred.accumulate_grad(&d);
        }
        if target.requires_grad() {
            let neg: Vec<f32> = d.iter().map(|&x| -x).collect();
            target.accumulate_grad(&neg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_half_is_ln2() {
        let p = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.5; 4]);
        for label in [0.0, 1.0, 0.3] {
            let l = binary_cross_entropy(&p, label);
            assert!((l.item() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn smooth_l1_zero_residual() {
        let p = Tensor::var(Shape::new(1, 1, 1, 4), vec![0.3, -1.0, 2.0, 0.0]);
        let t = p.detach();
        assert_eq!(smooth_l1(&p, &t).item(), 0.0);
    }

    #[test]
    fn smooth_l1_piecewise_values() {
        // residual 2.0 -> |2| - 0.5 = 1.5 per element; residual 0.5 -> 0.125
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]);
        let t = Tensor::zeros(Shape::new(1, 1, 1, 1));
        assert!((smooth_l1(&p, &t).item() - 1.5).abs() < 1e-7);
        let p = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.5]);
        assert!((smooth_l1(&p, &t).item() - 0.125).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::var(Shape::new(1, 2, 2, 2), vec![0.0; 8]);
        let loss = softmax_cross_entropy(&logits, &[0, 1, 0, 1]);
        assert!((loss.item() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "outside class range")]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::var(Shape::new(1, 2, 1, 1), vec![0.0; 2]);
        softmax_cross_entropy(&logits, &[2]);
    }
}
