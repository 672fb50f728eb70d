//! Straight-line f64 reference implementations for test oracles.
//!
//! Everything here is written from the mathematical definitions with plain
//! nested loops and no dependency on the production crate, so tests can
//! compare two genuinely independent routes. Used only as a dev-dependency.

/// Dimensions of a dense NCHW buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Dims {
        Dims { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

/// Direct-summation dilated convolution.
pub fn conv2d(
    input: &[f64],
    id: Dims,
    weight: &[f64],
    wd: Dims, // (cout, cin, k, k)
    bias: &[f64],
    stride: usize,
    padding: usize,
    dilation: usize,
) -> (Vec<f64>, Dims) {
    let k = wd.h;
    let span = dilation * (k - 1) + 1;
    let oh = (id.h + 2 * padding - span) / stride + 1;
    let ow = (id.w + 2 * padding - span) / stride + 1;
    let od = Dims::new(id.n, wd.n, oh, ow);
    let mut out = vec![0.0; od.count()];
    for n in 0..id.n {
        for co in 0..wd.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..id.c {
                        for kh in 0..k {
                            for kw in 0..k {
                                let iy = oy as isize * stride as isize + kh as isize * dilation as isize
                                    - padding as isize;
                                let ix = ox as isize * stride as isize + kw as isize * dilation as isize
                                    - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < id.h && (ix as usize) < id.w {
                                    acc += weight[wd.at(co, ci, kh, kw)]
                                        * input[id.at(n, ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                    }
                    out[od.at(n, co, oy, ox)] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Adaptive average pooling with floor bin edges.
pub fn adaptive_avg_pool(input: &[f64], id: Dims, bins: usize) -> (Vec<f64>, Dims) {
    let od = Dims::new(id.n, id.c, bins, bins);
    let mut out = vec![0.0; od.count()];
    for n in 0..id.n {
        for c in 0..id.c {
            for by in 0..bins {
                let (y0, y1) = (by * id.h / bins, (by + 1) * id.h / bins);
                for bx in 0..bins {
                    let (x0, x1) = (bx * id.w / bins, (bx + 1) * id.w / bins);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += input[id.at(n, c, y, x)];
                        }
                    }
                    out[od.at(n, c, by, bx)] = sum / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    (out, od)
}

pub fn upsample_nearest(input: &[f64], id: Dims, oh: usize, ow: usize) -> (Vec<f64>, Dims) {
    let od = Dims::new(id.n, id.c, oh, ow);
    let mut out = vec![0.0; od.count()];
    for n in 0..id.n {
        for c in 0..id.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[od.at(n, c, oy, ox)] = input[id.at(n, c, oy * id.h / oh, ox * id.w / ow)];
                }
            }
        }
    }
    (out, od)
}

pub fn relu(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| x.max(0.0)).collect()
}

pub fn sigmoid(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
}

pub fn softmax_channels(input: &[f64], id: Dims) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    let plane = id.h * id.w;
    for n in 0..id.n {
        for p in 0..plane {
            let m = (0..id.c)
                .map(|c| input[(n * id.c + c) * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..id.c)
                .map(|c| (input[(n * id.c + c) * plane + p] - m).exp())
                .sum();
            for c in 0..id.c {
                out[(n * id.c + c) * plane + p] =
                    (input[(n * id.c + c) * plane + p] - m).exp() / z;
            }
        }
    }
    out
}

pub const LOG_EPS: f64 = 1e-7;

fn clamped_ln(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

/// Channel-axis softmax cross-entropy, weighted sum over locations / denom.
pub fn softmax_cross_entropy(
    logits: &[f64],
    id: Dims,
    targets: &[usize],
    weights: Option<&[f64]>,
    denom: f64,
) -> f64 {
    let probs = softmax_channels(logits, id);
    let plane = id.h * id.w;
    let mut total = 0.0;
    for n in 0..id.n {
        for p in 0..plane {
            let r = n * plane + p;
            let w = weights.map_or(1.0, |ws| ws[r]);
            total += w * -clamped_ln(probs[(n * id.c + targets[r]) * plane + p]);
        }
    }
    total / denom
}

pub fn binary_cross_entropy(prob: &[f64], label: f64) -> f64 {
    let total: f64 = prob
        .iter()
        .map(|&p| -(label * clamped_ln(p) + (1.0 - label) * clamped_ln(1.0 - p)))
        .sum();
    total / prob.len() as f64
}

pub fn smooth_l1(pred: &[f64], target: &[f64], denom: f64) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let r = p - t;
            if r.abs() < 1.0 {
                0.5 * r * r
            } else {
                r.abs() - 0.5
            }
        })
        .sum();
    total / denom
}

/// Central finite differences of `f` at `x` with the given step.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], step: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Relative infinity-norm error between an analytic and a reference
/// gradient, normalized by the reference magnitude.
pub fn rel_error(analytic: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut max_abs = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &r) in analytic.iter().zip(reference) {
        max_abs = max_abs.max((a as f64 - r).abs());
        scale = scale.max(r.abs());
    }
    max_abs / scale.max(1.0)
}

/// Axis-aligned IoU from raw area arithmetic.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (area_a + area_b - inter)
}

/// Reference greedy NMS by repeated max-scan: keep the highest-scoring box
/// (ties to the lower index), drop every box overlapping it above the
/// threshold, repeat. Returns kept indices.
pub fn brute_force_nms(boxes: &[[f64; 4]], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && iou(boxes[i], boxes[best]) <= iou_thresh);
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_all_ones_3x3() {
        let input = vec![1.0; 9];
        let weight = vec![1.0; 9];
        let (out, od) = conv2d(
            &input,
            Dims::new(1, 1, 3, 3),
            &weight,
            Dims::new(1, 1, 3, 3),
            &[0.0],
            1,
            0,
            1,
        );
        assert_eq!(od, Dims::new(1, 1, 1, 1));
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn pool_quadrants_of_ramp() {
        let input: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (out, _) = adaptive_avg_pool(&input, Dims::new(1, 1, 4, 4), 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn iou_known_value() {
        let v = iou([0.2, 0.2, 0.6, 0.6], [0.4, 0.4, 0.8, 0.8]);
        assert!((v - 4.0 / 28.0).abs() < 1e-12);
    }

    #[test]
    fn central_diff_of_square() {
        let x = vec![1.5, -2.0];
        let g = central_diff(&x, 1e-5, |v| v.iter().map(|&a| a * a).sum());
        assert!((g[0] - 3.0).abs() < 1e-6);
        assert!((g[1] + 4.0).abs() < 1e-6);
    }
}
