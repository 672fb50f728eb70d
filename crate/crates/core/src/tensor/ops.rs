//! Forward kernels and their backward rules.
//!
//! Convolutions and every reduction accumulate in `f64` with a fixed
//! iteration order, then round once to `f32`. Long dot products use four
//! interleaved accumulators (summed in a fixed order at the end) so the
//! compiler can vectorize them without changing results between runs.

use super::{GradFn, Shape, Tensor};
use crate::parallel::for_each_chunk;

/// Valid output range such that `out*stride + offset` lands in `[0, in_len)`.
#[inline]
fn valid_span(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let start = if offset >= 0 {
        0
    } else {
        ((-offset) as usize + stride - 1) / stride
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let end = (last as usize / stride + 1).min(out_len);
    (start.min(end), end)
}

/// Dot product with four interleaved f64 accumulators; `bs` is read with
/// the given stride. The lane split is fixed, so the result is deterministic.
#[inline]
fn dot_strided(a: &[f32], b: &[f32], stride: usize, len: usize) -> f64 {
    let mut acc = [0.0f64; 4];
    let quads = len / 4;
    for q in 0..quads {
        let i = q * 4;
        acc[0] += a[i] as f64 * b[i * stride] as f64;
        acc[1] += a[i + 1] as f64 * b[(i + 1) * stride] as f64;
        acc[2] += a[i + 2] as f64 * b[(i + 2) * stride] as f64;
        acc[3] += a[i + 3] as f64 * b[(i + 3) * stride] as f64;
    }
    for i in quads * 4..len {
        acc[0] += a[i] as f64 * b[i * stride] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

fn round_to_f32(acc: &[f64]) -> Vec<f32> {
    acc.iter().map(|&v| v as f32).collect()
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

struct Conv2dBackward {
    stride: usize,
    padding: usize,
    dilation: usize,
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor {
    let is = input.shape();
    let ws = weight.shape();
    assert!(stride >= 1 && dilation >= 1, "conv2d: stride and dilation must be >= 1");
    assert_eq!(
        ws.h, ws.w,
        "conv2d: kernel must be square, got weight shape {ws}"
    );
    assert_eq!(
        is.c, ws.c,
        "conv2d: input channels do not match weight: input {is} vs weight {ws}"
    );
    let bs = bias.shape();
    assert!(
        bs.n == 1 && bs.c == ws.n && bs.h == 1 && bs.w == 1,
        "conv2d: bias shape {bs} does not match {} output channels",
        ws.n
    );
    let k = ws.h;
    let span = dilation * (k - 1) + 1;
    assert!(
        is.h + 2 * padding >= span && is.w + 2 * padding >= span,
        "conv2d: kernel span {span} exceeds padded input {is} (padding {padding})"
    );
    let oh = (is.h + 2 * padding - span) / stride + 1;
    let ow = (is.w + 2 * padding - span) / stride + 1;
    let out_shape = Shape::new(is.n, ws.n, oh, ow);

    let x_guard = input.data();
    let w_guard = weight.data();
    let b_guard = bias.data();
    let (x, w, b): (&[f32], &[f32], &[f32]) = (&x_guard, &w_guard, &b_guard);
    let mut acc = vec![0.0f64; out_shape.count()];
    for_each_chunk(&mut acc, is.n * ws.n, |task, plane| {
        let n = task / ws.n;
        let co = task % ws.n;
        plane.fill(b[co] as f64);
        for ci in 0..is.c {
            let in_plane = &x[is.at(n, ci, 0, 0)..is.at(n, ci, 0, 0) + is.h * is.w];
            for kh in 0..k {
                let oy_off = kh as isize * dilation as isize - padding as isize;
                let (oy0, oy1) = valid_span(oh, is.h, stride, oy_off);
                for kw in 0..k {
                    let wv = w[ws.at(co, ci, kh, kw)] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    let ox_off = kw as isize * dilation as isize - padding as isize;
                    let (ox0, ox1) = valid_span(ow, is.w, stride, ox_off);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = (oy as isize * stride as isize + oy_off) as usize;
                        let in_row = &in_plane[iy * is.w..(iy + 1) * is.w];
                        let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let ix0 = (ox0 as isize + ox_off) as usize;
                            let src = &in_row[ix0..ix0 + (ox1 - ox0)];
                            for (o, s) in out_row[ox0..ox1].iter_mut().zip(src) {
                                *o += wv * *s as f64;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox as isize * stride as isize + ox_off) as usize;
                                out_row[ox] += wv * in_row[ix] as f64;
                            }
                        }
                    }
                }
            }
        }
    });
    drop(x_guard);
    drop(w_guard);
    drop(b_guard);
    Tensor::from_op(
        out_shape,
        round_to_f32(&acc),
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(Conv2dBackward {
            stride,
            padding,
            dilation,
        }),
        "conv2d",
    )
}

impl GradFn for Conv2dBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
        let is = input.shape();
        let ws = weight.shape();
        let os = out.shape();
        let k = ws.h;
        let (stride, padding, dilation) = (self.stride, self.padding, self.dilation);
        let go_guard = out.inner.grad.borrow();
        let go: &[f32] = go_guard.as_ref().expect("missing output gradient");
        let (oh, ow) = (os.h, os.w);

        if input.requires_grad() {
            let w_guard = weight.data();
            let w: &[f32] = &w_guard;
            let mut acc = vec![0.0f64; is.count()];
            for_each_chunk(&mut acc, is.n * is.c, |task, plane| {
                let n = task / is.c;
                let ci = task % is.c;
                for co in 0..ws.n {
                    let go_plane = &go[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + oh * ow];
                    for kh in 0..k {
                        let oy_off = kh as isize * dilation as isize - padding as isize;
                        let (oy0, oy1) = valid_span(oh, is.h, stride, oy_off);
                        for kw in 0..k {
                            let wv = w[ws.at(co, ci, kh, kw)] as f64;
                            if wv == 0.0 {
                                continue;
                            }
                            let ox_off = kw as isize * dilation as isize - padding as isize;
                            let (ox0, ox1) = valid_span(ow, is.w, stride, ox_off);
                            if ox0 >= ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = (oy as isize * stride as isize + oy_off) as usize;
                                let go_row = &go_plane[oy * ow..oy * ow + ow];
                                let in_row = &mut plane[iy * is.w..(iy + 1) * is.w];
                                if stride == 1 {
                                    let ix0 = (ox0 as isize + ox_off) as usize;
                                    let dst = &mut in_row[ix0..ix0 + (ox1 - ox0)];
                                    for (d, g) in dst.iter_mut().zip(&go_row[ox0..ox1]) {
                                        *d += wv * *g as f64;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = (ox as isize * stride as isize + ox_off) as usize;
                                        in_row[ix] += wv * go_row[ox] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            });
            input.accumulate_grad(&round_to_f32(&acc));
        }

        if weight.requires_grad() {
            let x_guard = input.data();
            let x: &[f32] = &x_guard;
            let mut acc = vec![0.0f64; ws.count()];
            for_each_chunk(&mut acc, ws.n * ws.c, |task, taps| {
                let co = task / ws.c;
                let ci = task % ws.c;
                for kh in 0..k {
                    let oy_off = kh as isize * dilation as isize - padding as isize;
                    let (oy0, oy1) = valid_span(oh, is.h, stride, oy_off);
                    for kw in 0..k {
                        let ox_off = kw as isize * dilation as isize - padding as isize;
                        let (ox0, ox1) = valid_span(ow, is.w, stride, ox_off);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut sum = 0.0f64;
                        for n in 0..is.n {
                            let go_plane = &go[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + oh * ow];
                            let in_plane =
                                &x[is.at(n, ci, 0, 0)..is.at(n, ci, 0, 0) + is.h * is.w];
                            for oy in oy0..oy1 {
                                let iy = (oy as isize * stride as isize + oy_off) as usize;
                                let ix0 = (ox0 as isize * stride as isize + ox_off) as usize;
                                sum += dot_strided(
                                    &go_plane[oy * ow + ox0..oy * ow + ox1],
                                    &in_plane[iy * is.w + ix0..],
                                    stride,
                                    ox1 - ox0,
                                );
                            }
                        }
                        taps[kh * k + kw] = sum;
                    }
                }
            });
            weight.accumulate_grad(&round_to_f32(&acc));
        }

        if bias.requires_grad() {
            let mut acc = vec![0.0f64; ws.n];
            for co in 0..ws.n {
                let mut sum = 0.0f64;
                for n in 0..is.n {
                    let plane = &go[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + oh * ow];
                    for &g in plane {
                        sum += g as f64;
                    }
                }
                acc[co] = sum;
            }
            bias.accumulate_grad(&round_to_f32(&acc));
        }
    }
}

// ---------------------------------------------------------------------------
// gradient reversal
// ---------------------------------------------------------------------------

struct GrlBackward {
    coeff: f32,
}

/// Identity in the forward pass; multiplies the upstream gradient by
/// `-coeff` in the backward pass.
pub fn grl(input: &Tensor, coeff: f32) -> Tensor {
    assert!(coeff >= 0.0, "grl: coefficient must be non-negative");
    Tensor::from_op(
        input.shape(),
        input.data().clone(),
        vec![input.clone()],
        Box::new(GrlBackward { coeff }),
        "grl",
    )
}

impl GradFn for GrlBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let neg: Vec<f32> = go.iter().map(|&g| -self.coeff * g).collect();
        parents[0].accumulate_grad(&neg);
    }
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

/// Bin edges for adaptive pooling: bin i covers `[i*len/bins, (i+1)*len/bins)`.
#[inline]
pub fn pool_edges(len: usize, bins: usize, i: usize) -> (usize, usize) {
    (i * len / bins, (i + 1) * len / bins)
}

struct AdaptiveAvgPoolBackward {
    bins: usize,
}

pub fn adaptive_avg_pool(input: &Tensor, bins: usize) -> Tensor {
    let is = input.shape();
    assert!(
        bins >= 1 && bins <= is.h.min(is.w),
        "adaptive_avg_pool: bins {bins} exceeds spatial size {}x{}",
        is.h,
        is.w
    );
    let os = Shape::new(is.n, is.c, bins, bins);
    let x = input.data();
    let mut out = vec![0.0f32; os.count()];
    for n in 0..is.n {
        for c in 0..is.c {
            for by in 0..bins {
                let (y0, y1) = pool_edges(is.h, bins, by);
                for bx in 0..bins {
                    let (x0, x1) = pool_edges(is.w, bins, bx);
                    let mut sum = 0.0f64;
                    for y in y0..y1 {
                        for x_ in x0..x1 {
                            sum += x[is.at(n, c, y, x_)] as f64;
                        }
                    }
                    out[os.at(n, c, by, bx)] =
                        (sum / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                }
            }
        }
    }
    drop(x);
    Tensor::from_op(
        os,
        out,
        vec![input.clone()],
        Box::new(AdaptiveAvgPoolBackward { bins }),
        "adaptive_avg_pool",
    )
}

impl GradFn for AdaptiveAvgPoolBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let input = &parents[0];
        let is = input.shape();
        let os = out.shape();
        let bins = self.bins;
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let mut gi = vec![0.0f32; is.count()];
        for n in 0..is.n {
            for c in 0..is.c {
                for by in 0..bins {
                    let (y0, y1) = pool_edges(is.h, bins, by);
                    for bx in 0..bins {
                        let (x0, x1) = pool_edges(is.w, bins, bx);
                        let share = (go[os.at(n, c, by, bx)] as f64
                            / ((y1 - y0) * (x1 - x0)) as f64) as f32;
                        for y in y0..y1 {
                            for x_ in x0..x1 {
                                gi[is.at(n, c, y, x_)] += share;
                            }
                        }
                    }
                }
            }
        }
        input.accumulate_grad(&gi);
    }
}

struct UpsampleNearestBackward;

pub fn upsample_nearest(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let is = input.shape();
    assert!(
        out_h >= is.h && out_w >= is.w,
        "upsample_nearest: target {out_h}x{out_w} smaller than input {}x{}",
        is.h,
        is.w
    );
    let os = Shape::new(is.n, is.c, out_h, out_w);
    let x = input.data();
    let mut out = vec![0.0f32; os.count()];
    for n in 0..is.n {
        for c in 0..is.c {
            for oy in 0..out_h {
                let iy = oy * is.h / out_h;
                for ox in 0..out_w {
                    let ix = ox * is.w / out_w;
                    out[os.at(n, c, oy, ox)] = x[is.at(n, c, iy, ix)];
                }
            }
        }
    }
    drop(x);
    Tensor::from_op(
        os,
        out,
        vec![input.clone()],
        Box::new(UpsampleNearestBackward),
        "upsample_nearest",
    )
}

impl GradFn for UpsampleNearestBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let input = &parents[0];
        let is = input.shape();
        let os = out.shape();
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let mut acc = vec![0.0f64; is.count()];
        for n in 0..is.n {
            for c in 0..is.c {
                for oy in 0..os.h {
                    let iy = oy * is.h / os.h;
                    for ox in 0..os.w {
                        let ix = ox * is.w / os.w;
                        acc[is.at(n, c, iy, ix)] += go[os.at(n, c, oy, ox)] as f64;
                    }
                }
            }
        }
        input.accumulate_grad(&round_to_f32(&acc));
    }
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

struct MulBackward;

/// Hadamard product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "mul: shape mismatch {} vs {}",
        a.shape(),
        b.shape()
    );
    let out: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(MulBackward),
        "mul",
    )
}

impl GradFn for MulBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let (a, b) = (&parents[0], &parents[1]);
        if a.requires_grad() {
            let bd = b.data();
            let ga: Vec<f32> = go.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
            drop(bd);
            a.accumulate_grad(&ga);
        }
        if b.requires_grad() {
            let ad = a.data();
            let gb: Vec<f32> = go.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
            drop(ad);
            b.accumulate_grad(&gb);
        }
    }
}

struct AddBackward;

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "add: shape mismatch {} vs {}",
        a.shape(),
        b.shape()
    );
    let out: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(AddBackward),
        "add",
    )
}

impl GradFn for AddBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        for p in parents {
            if p.requires_grad() {
                p.accumulate_grad(go);
            }
        }
    }
}

struct ScaleBackward {
    factor: f32,
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let out: Vec<f32> = a.data().iter().map(|&x| factor * x).collect();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(ScaleBackward { factor }),
        "scale",
    )
}

impl GradFn for ScaleBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let gi: Vec<f32> = go.iter().map(|&g| self.factor * g).collect();
        parents[0].accumulate_grad(&gi);
    }
}

struct ConcatBackward {
    channels: Vec<usize>,
}

/// Concatenate along the channel axis, order preserved.
pub fn concat_channels(inputs: &[&Tensor]) -> Tensor {
    assert!(!inputs.is_empty(), "concat_channels: empty input list");
    let first = inputs[0].shape();
    let mut total_c = 0;
    for t in inputs {
        let s = t.shape();
        assert!(
            s.n == first.n && s.h == first.h && s.w == first.w,
            "concat_channels: spatial/batch mismatch {s} vs {first}"
        );
        total_c += s.c;
    }
    let os = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.h * first.w;
    let mut out = vec![0.0f32; os.count()];
    for n in 0..first.n {
        let mut c_off = 0;
        for t in inputs {
            let s = t.shape();
            let d = t.data();
            let src = &d[s.at(n, 0, 0, 0)..s.at(n, 0, 0, 0) + s.c * plane];
            let dst_start = os.at(n, c_off, 0, 0);
            out[dst_start..dst_start + s.c * plane].copy_from_slice(src);
            c_off += s.c;
        }
    }
    Tensor::from_op(
        os,
        out,
        inputs.iter().map(|t| (*t).clone()).collect(),
        Box::new(ConcatBackward {
            channels: inputs.iter().map(|t| t.shape().c).collect(),
        }),
        "concat_channels",
    )
}

impl GradFn for ConcatBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let os = out.shape();
        let plane = os.h * os.w;
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let mut c_off = 0;
        for (t, &c) in parents.iter().zip(&self.channels) {
            if t.requires_grad() {
                let s = t.shape();
                let mut gi = vec![0.0f32; s.count()];
                for n in 0..os.n {
                    let src_start = os.at(n, c_off, 0, 0);
                    let dst_start = s.at(n, 0, 0, 0);
                    gi[dst_start..dst_start + c * plane]
                        .copy_from_slice(&go[src_start..src_start + c * plane]);
                }
                t.accumulate_grad(&gi);
            }
            c_off += c;
        }
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

struct ReluBackward;

pub fn relu(input: &Tensor) -> Tensor {
    let out: Vec<f32> = input.data().iter().map(|&x| x.max(0.0)).collect();
    Tensor::from_op(
        input.shape(),
        out,
        vec![input.clone()],
        Box::new(ReluBackward),
        "relu",
    )
}

impl GradFn for ReluBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let xd = parents[0].data();
        let gi: Vec<f32> = go
            .iter()
            .zip(xd.iter())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect();
        drop(xd);
        parents[0].accumulate_grad(&gi);
    }
}

struct SigmoidBackward;

pub fn sigmoid(input: &Tensor) -> Tensor {
    let out: Vec<f32> = input
        .data()
        .iter()
        .map(|&x| (1.0 / (1.0 + (-(x as f64)).exp())) as f32)
        .collect();
    Tensor::from_op(
        input.shape(),
        out,
        vec![input.clone()],
        Box::new(SigmoidBackward),
        "sigmoid",
    )
}

impl GradFn for SigmoidBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let yd = out.data();
        let gi: Vec<f32> = go
            .iter()
            .zip(yd.iter())
            .map(|(&g, &y)| {
                let y = y as f64;
                (g as f64 * y * (1.0 - y)) as f32
            })
            .collect();
        drop(yd);
        parents[0].accumulate_grad(&gi);
    }
}

struct SoftmaxChannelsBackward;

/// Softmax across the channel axis, independently at each (n, y, x).
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let is = input.shape();
    let x = input.data();
    let mut out = vec![0.0f32; is.count()];
    let plane = is.h * is.w;
    for n in 0..is.n {
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..is.c {
                m = m.max(x[(n * is.c + c) * plane + p] as f64);
            }
            let mut z = 0.0f64;
            for c in 0..is.c {
                z += ((x[(n * is.c + c) * plane + p] as f64) - m).exp();
            }
            for c in 0..is.c {
                out[(n * is.c + c) * plane + p] =
                    (((x[(n * is.c + c) * plane + p] as f64) - m).exp() / z) as f32;
            }
        }
    }
    drop(x);
    Tensor::from_op(
        is,
        out,
        vec![input.clone()],
        Box::new(SoftmaxChannelsBackward),
        "softmax_channels",
    )
}

impl GradFn for SoftmaxChannelsBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let os = out.shape();
        let go_guard = out.inner.grad.borrow();
        let go = go_guard.as_ref().unwrap();
        let y = out.data();
        let plane = os.h * os.w;
        let mut gi = vec![0.0f32; os.count()];
        for n in 0..os.n {
            for p in 0..plane {
                let mut dot = 0.0f64;
                for c in 0..os.c {
                    let i = (n * os.c + c) * plane + p;
                    dot += go[i] as f64 * y[i] as f64;
                }
                for c in 0..os.c {
                    let i = (n * os.c + c) * plane + p;
                    gi[i] = (y[i] as f64 * (go[i] as f64 - dot)) as f32;
                }
            }
        }
        drop(y);
        parents[0].accumulate_grad(&gi);
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumAllBackward;

/// Sum of all elements as a 1x1x1x1 tensor (f64 accumulation).
pub fn sum_all(input: &Tensor) -> Tensor {
    let mut acc = [0.0f64; 4];
    let d = input.data();
    let quads = d.len() / 4;
    for q in 0..quads {
        acc[0] += d[q * 4] as f64;
        acc[1] += d[q * 4 + 1] as f64;
        acc[2] += d[q * 4 + 2] as f64;
        acc[3] += d[q * 4 + 3] as f64;
    }
    for i in quads * 4..d.len() {
        acc[0] += d[i] as f64;
    }
    let total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) as f32;
    drop(d);
    Tensor::from_op(
        Shape::scalar(),
        vec![total],
        vec![input.clone()],
        Box::new(SumAllBackward),
        "sum_all",
    )
}

impl GradFn for SumAllBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go = out.inner.grad.borrow().as_ref().unwrap()[0];
        let gi = vec![go; parents[0].shape().count()];
        parents[0].accumulate_grad(&gi);
    }
}
