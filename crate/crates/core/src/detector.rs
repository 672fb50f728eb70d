//! Miniature region-free (single-shot) detector.
//!
//! A small stack of stride-2 conv stages emits feature maps at the
//! configured strides; per-layer 3x3 heads predict class logits and box
//! offsets for a fixed grid of square anchors. Matching, loss composition
//! and decoding follow the usual single-shot recipe: forced best-match plus
//! IoU-threshold positives, hard-negative mining at 3:1, per-class greedy
//! NMS.

use serde::{Deserialize, Serialize};

use crate::boxes::{decode_box, encode_box, iou, BBox};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::rng::Rng;
use crate::tensor::{
    self, GradFn, Parameter, Shape, Tensor,
};

fn default_num_classes() -> usize {
    3
}
fn default_input_size() -> usize {
    64
}
fn default_backbone_channels() -> Vec<usize> {
    vec![16, 32, 64, 64, 64]
}
fn default_head_strides() -> Vec<usize> {
    vec![8, 32]
}
fn default_anchors_per_cell() -> usize {
    2
}
fn default_anchor_scales() -> Vec<f32> {
    // Chunked per stride in ascending order: stride 8 covers the small
    // objects, stride 32 the large ones.
    vec![0.25, 0.4, 0.6, 0.85]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_backbone_channels")]
    pub backbone_channels: Vec<usize>,
    /// Strides with detection heads; subset of {8, 32}.
    #[serde(default = "default_head_strides")]
    pub head_strides: Vec<usize>,
    #[serde(default = "default_anchors_per_cell")]
    pub anchors_per_cell: usize,
    /// `anchors_per_cell` scales per head stride, ascending, in (0, 1].
    #[serde(default = "default_anchor_scales")]
    pub anchor_scales: Vec<f32>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_classes: default_num_classes(),
            input_size: default_input_size(),
            backbone_channels: default_backbone_channels(),
            head_strides: default_head_strides(),
            anchors_per_cell: default_anchors_per_cell(),
            anchor_scales: default_anchor_scales(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.head_strides.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted != self.head_strides {
            return Err(Error::Config(
                "head_strides must be non-empty, ascending and unique".into(),
            ));
        }
        for &s in &self.head_strides {
            if !matches!(s, 8 | 32) {
                return Err(Error::Config(format!("unsupported head stride {s}")));
            }
            if self.input_size % s != 0 {
                return Err(Error::Config(format!(
                    "input_size {} not divisible by stride {s}",
                    self.input_size
                )));
            }
        }
        let max_stride = *self.head_strides.last().unwrap();
        if self.backbone_channels.len() < (max_stride as f32).log2() as usize {
            return Err(Error::Config(format!(
                "backbone_channels needs at least log2(max stride) = {} stages",
                (max_stride as f32).log2() as usize
            )));
        }
        if self.anchor_scales.len() != self.head_strides.len() * self.anchors_per_cell {
            return Err(Error::Config(format!(
                "expected {} anchor scales ({} strides x {} per cell), got {}",
                self.head_strides.len() * self.anchors_per_cell,
                self.head_strides.len(),
                self.anchors_per_cell,
                self.anchor_scales.len()
            )));
        }
        let increasing = self
            .anchor_scales
            .windows(2)
            .all(|w| w[0] < w[1]);
        if !increasing || self.anchor_scales.iter().any(|&s| s <= 0.0 || s > 1.0) {
            return Err(Error::Config(
                "anchor_scales must be strictly increasing in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Classes plus background.
    pub fn cls_fields(&self) -> usize {
        self.num_classes + 1
    }

    /// Grid side at a given stride.
    pub fn grid(&self, stride: usize) -> usize {
        self.input_size / stride
    }

    /// Scales for a head layer (index into `head_strides`).
    pub fn layer_scales(&self, layer: usize) -> &[f32] {
        let a = self.anchors_per_cell;
        &self.anchor_scales[layer * a..(layer + 1) * a]
    }
}

// ---------------------------------------------------------------------------
// anchors
// ---------------------------------------------------------------------------

/// Per-layer prior boxes in (cell row-major, scale) order, layers ascending
/// by stride. Deterministic for a given config; clipped to the unit square.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub anchors: Vec<BBox>,
    /// (stride, start index, count) per head layer.
    pub layers: Vec<(usize, usize, usize)>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn generate_anchors(config: &DetectorConfig) -> AnchorSet {
    let mut anchors = Vec::new();
    let mut layers = Vec::new();
    for (li, &stride) in config.head_strides.iter().enumerate() {
        let grid = config.grid(stride);
        let start = anchors.len();
        for y in 0..grid {
            for x in 0..grid {
                let cx = (x as f32 + 0.5) / grid as f32;
                let cy = (y as f32 + 0.5) / grid as f32;
                for &scale in config.layer_scales(li) {
                    let half = 0.5 * scale;
                    anchors.push(
                        BBox {
                            xmin: cx - half,
                            ymin: cy - half,
                            xmax: cx + half,
                            ymax: cy + half,
                        }
                        .clip_unit(),
                    );
                }
            }
        }
        layers.push((stride, start, anchors.len() - start));
    }
    AnchorSet { anchors, layers }
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

struct Head {
    stride: usize,
    cls: Conv2d,
    loc: Conv2d,
}

/// Backbone plus per-stride detection heads.
pub struct Detector {
    pub config: DetectorConfig,
    stages: Vec<Conv2d>,
    heads: Vec<Head>,
}

/// Raw forward outputs: tapped features and head tensors per layer,
/// ascending stride order.
pub struct DetectorOutput {
    /// (stride, feature map) for each head layer.
    pub features: Vec<(usize, Tensor)>,
    pub cls: Vec<Tensor>,
    pub loc: Vec<Tensor>,
}

impl Detector {
    pub fn new(config: &DetectorConfig, rng: &mut Rng) -> Detector {
        config.validate().expect("invalid detector config");
        let max_stride = *config.head_strides.last().unwrap();
        let num_stages = (max_stride as f32).log2() as usize;
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..num_stages {
            let cout = config.backbone_channels[i];
            stages.push(Conv2d::new(
                rng,
                &format!("backbone.stage{}", i + 1),
                cin,
                cout,
                3,
                2,
                1,
                1,
            ));
            cin = cout;
        }
        let mut heads = Vec::new();
        for &stride in &config.head_strides {
            let stage = (stride as f32).log2() as usize;
            let ch = config.backbone_channels[stage - 1];
            heads.push(Head {
                stride,
                cls: Conv2d::new(
                    rng,
                    &format!("head{stride}.cls"),
                    ch,
                    config.anchors_per_cell * config.cls_fields(),
                    3,
                    1,
                    1,
                    1,
                ),
                loc: Conv2d::new(
                    rng,
                    &format!("head{stride}.loc"),
                    ch,
                    config.anchors_per_cell * 4,
                    3,
                    1,
                    1,
                    1,
                ),
            });
        }
        Detector {
            config: config.clone(),
            stages,
            heads,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend(s.params());
        }
        for h in &self.heads {
            out.extend(h.cls.params());
            out.extend(h.loc.params());
        }
        out
    }

    /// Forward through the backbone, tapping the configured strides.
    pub fn backbone_forward(&self, images: &Tensor) -> Vec<(usize, Tensor)> {
        let s = images.shape();
        assert!(
            s.c == 3 && s.h == self.config.input_size && s.w == self.config.input_size,
            "expected Nx3x{0}x{0} input, got {s}",
            self.config.input_size
        );
        let mut taps = Vec::new();
        let mut x = images.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward_relu(&x);
            let stride = 1usize << (i + 1);
            if self.config.head_strides.contains(&stride) {
                taps.push((stride, x.clone()));
            }
        }
        taps
    }

    pub fn forward(&self, images: &Tensor) -> DetectorOutput {
        let features = self.backbone_forward(images);
        let mut cls = Vec::new();
        let mut loc = Vec::new();
        for (head, (stride, feat)) in self.heads.iter().zip(&features) {
            debug_assert_eq!(head.stride, *stride);
            cls.push(head.cls.forward(feat));
            loc.push(head.loc.forward(feat));
        }
        DetectorOutput {
            features,
            cls,
            loc,
        }
    }
}

// ---------------------------------------------------------------------------
// head flattening (custom gather ops with exact backward)
// ---------------------------------------------------------------------------

/// Index plan shared by the flatten forward and backward passes.
/// Row `n * total + layer_offset + (y*w + x)*A + a` of the output maps to
/// channel `a*F + f` at (y, x) of layer input `L`.
struct FlattenPlan {
    fields: usize,
    anchors_per_cell: usize,
    layer_shapes: Vec<Shape>,
    layer_offsets: Vec<usize>,
    total_anchors: usize,
}

impl FlattenPlan {
    fn new(layers: &[&Tensor], anchors_per_cell: usize, fields: usize) -> FlattenPlan {
        let mut layer_shapes = Vec::new();
        let mut layer_offsets = Vec::new();
        let mut total = 0;
        for t in layers {
            let s = t.shape();
            assert_eq!(s.c, anchors_per_cell * fields, "bad head channel count {s}");
            layer_offsets.push(total);
            total += s.h * s.w * anchors_per_cell;
            layer_shapes.push(s);
        }
        FlattenPlan {
            fields,
            anchors_per_cell,
            layer_shapes,
            layer_offsets,
            total_anchors: total,
        }
    }
}

struct FlattenHeadsBackward {
    plan: FlattenPlan,
}

/// Gather per-layer head tensors `Nx(A*F)xHxW` into one `(N*anchors)xFx1x1`
/// tensor whose row order matches [`generate_anchors`].
pub fn flatten_heads(layers: &[&Tensor], anchors_per_cell: usize, fields: usize) -> Tensor {
    let plan = FlattenPlan::new(layers, anchors_per_cell, fields);
    let batch = plan.layer_shapes[0].n;
    let out_shape = Shape::new(batch * plan.total_anchors, fields, 1, 1);
    let mut out = vec![0.0f32; out_shape.count()];
    for (li, t) in layers.iter().enumerate() {
        let s = plan.layer_shapes[li];
        let d = t.data();
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    for a in 0..anchors_per_cell {
                        let row = n * plan.total_anchors
                            + plan.layer_offsets[li]
                            + (y * s.w + x) * anchors_per_cell
                            + a;
                        for f in 0..fields {
                            out[row * fields + f] = d[s.at(n, a * fields + f, y, x)];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_op(
        out_shape,
        out,
        layers.iter().map(|t| (*t).clone()).collect(),
        Box::new(FlattenHeadsBackward { plan }),
        "flatten_heads",
    )
}

impl GradFn for FlattenHeadsBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let go = out.grad().unwrap();
        let plan = &self.plan;
        for (li, t) in parents.iter().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let s = plan.layer_shapes[li];
            let mut gi = vec![0.0f32; s.count()];
            for n in 0..s.n {
                for y in 0..s.h {
                    for x in 0..s.w {
                        for a in 0..plan.anchors_per_cell {
                            let row = n * plan.total_anchors
                                + plan.layer_offsets[li]
                                + (y * s.w + x) * plan.anchors_per_cell
                                + a;
                            for f in 0..plan.fields {
                                gi[s.at(n, a * plan.fields + f, y, x)] =
                                    go[row * plan.fields + f];
                            }
                        }
                    }
                }
            }
            t.accumulate_grad(&gi);
        }
    }
}

struct SelectRowsBackward {
    rows: Vec<usize>,
}

/// Gather a subset of rows from a `(M, F, 1, 1)` tensor.
pub fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let s = t.shape();
    assert!(s.h == 1 && s.w == 1, "select_rows expects (M, F, 1, 1)");
    let fields = s.c;
    let out_shape = Shape::new(rows.len().max(1), fields, 1, 1);
    let d = t.data();
    let mut out = vec![0.0f32; out_shape.count()];
    for (i, &r) in rows.iter().enumerate() {
        out[i * fields..(i + 1) * fields].copy_from_slice(&d[r * fields..(r + 1) * fields]);
    }
    drop(d);
    Tensor::from_op(
        out_shape,
        out,
        vec![t.clone()],
        Box::new(SelectRowsBackward {
            rows: rows.to_vec(),
        }),
        "select_rows",
    )
}

impl GradFn for SelectRowsBackward {
    fn backward(&self, out: &Tensor, parents: &[Tensor]) {
        let t = &parents[0];
        let s = t.shape();
        let fields = s.c;
        let go = out.grad().unwrap();
        let mut gi = vec![0.0f32; s.count()];
        for (i, &r) in self.rows.iter().enumerate() {
            for f in 0..fields {
                gi[r * fields + f] += go[i * fields + f];
            }
        }
        t.accumulate_grad(&gi);
    }
}

// ---------------------------------------------------------------------------
// matching
// ---------------------------------------------------------------------------

pub const DEFAULT_POS_IOU: f32 = 0.5;
pub const NEGATIVES_PER_POSITIVE: usize = 3;

/// Per-anchor assignment for one image.
#[derive(Clone, Debug)]
pub struct MatchTargets {
    /// 0 = background, `c + 1` = foreground class `c`.
    pub labels: Vec<usize>,
    /// Regression targets; meaningful only where `positive`.
    pub loc_targets: Vec<[f32; 4]>,
    pub positive: Vec<bool>,
}

impl MatchTargets {
    pub fn num_positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// SSD-style matching: every anchor with IoU >= `pos_iou` against its best
/// ground truth is positive, and every ground truth also force-claims its
/// best not-yet-forced anchor so no object goes unmatched.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[(BBox, usize)],
    pos_iou: f32,
) -> MatchTargets {
    assert!(!anchors.is_empty(), "match_anchors: empty anchor set");
    assert!(pos_iou > 0.0 && pos_iou < 1.0);
    let n = anchors.len();
    let mut labels = vec![0usize; n];
    let mut loc_targets = vec![[0.0f32; 4]; n];
    let mut positive = vec![false; n];
    if gts.is_empty() {
        return MatchTargets {
            labels,
            loc_targets,
            positive,
        };
    }

    // Best ground truth per anchor (ties to the lower gt index).
    let mut best_gt = vec![0usize; n];
    let mut best_iou = vec![0.0f32; n];
    for (ai, anchor) in anchors.anchors.iter().enumerate() {
        for (gi, (gt, _)) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
        }
    }
    for ai in 0..n {
        if best_iou[ai] >= pos_iou {
            positive[ai] = true;
            let (gt, class) = gts[best_gt[ai]];
            labels[ai] = class + 1;
            loc_targets[ai] = encode_box(&gt, &anchors.anchors[ai]);
        }
    }

    // Forced best match per ground truth, skipping anchors already forced
    // by an earlier ground truth.
    let mut forced = vec![false; n];
    for (gi, (gt, class)) in gts.iter().enumerate() {
        let mut best_anchor = None;
        let mut best = -1.0f32;
        for (ai, anchor) in anchors.anchors.iter().enumerate() {
            if forced[ai] {
                continue;
            }
            let v = iou(anchor, gt);
            if v > best {
                best = v;
                best_anchor = Some(ai);
            }
        }
        if let Some(ai) = best_anchor {
            forced[ai] = true;
            positive[ai] = true;
            labels[ai] = class + 1;
            loc_targets[ai] = encode_box(gt, &anchors.anchors[ai]);
            best_gt[ai] = gi;
        }
    }

    MatchTargets {
        labels,
        loc_targets,
        positive,
    }
}

// ---------------------------------------------------------------------------
// detection loss
// ---------------------------------------------------------------------------

/// Classification and localization losses over a batch.
///
/// Hard-negative mining keeps the `NEGATIVES_PER_POSITIVE` highest-loss
/// background anchors per image (a floor of that many when an image has no
/// positives); both terms are normalized by the batch positive count,
/// clamped to at least one.
pub fn detection_loss(
    cls_layers: &[&Tensor],
    loc_layers: &[&Tensor],
    targets: &[MatchTargets],
    config: &DetectorConfig,
) -> (Tensor, Tensor) {
    let fields = config.cls_fields();
    let a = config.anchors_per_cell;
    let cls_flat = flatten_heads(cls_layers, a, fields);
    let loc_flat = flatten_heads(loc_layers, a, 4);
    let batch = targets.len();
    let total_anchors = cls_flat.shape().n / batch;

    let total_pos: usize = targets.iter().map(|t| t.num_positives()).sum();
    let denom = total_pos.max(1) as f64;

    // Background cross-entropy per anchor (data-only pre-pass) drives the
    // mining selection.
    let cls_data = cls_flat.data();
    let mut weights = vec![0.0f32; batch * total_anchors];
    let mut labels = vec![0usize; batch * total_anchors];
    for (n, t) in targets.iter().enumerate() {
        assert_eq!(t.labels.len(), total_anchors, "target/anchor count mismatch");
        let mut neg_losses: Vec<(f64, usize)> = Vec::new();
        for ai in 0..total_anchors {
            let row = n * total_anchors + ai;
            labels[row] = t.labels[ai];
            if t.positive[ai] {
                weights[row] = 1.0;
            } else {
                let base = row * fields;
                let mut m = f64::NEG_INFINITY;
                for f in 0..fields {
                    m = m.max(cls_data[base + f] as f64);
                }
                let mut z = 0.0f64;
                for f in 0..fields {
                    z += ((cls_data[base + f] as f64) - m).exp();
                }
                let p_bg = ((cls_data[base] as f64) - m).exp() / z;
                neg_losses.push((-p_bg.max(1e-12).ln(), ai));
            }
        }
        let keep = NEGATIVES_PER_POSITIVE * t.num_positives().max(1);
        neg_losses.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
        });
        for &(_, ai) in neg_losses.iter().take(keep) {
            weights[n * total_anchors + ai] = 1.0;
        }
    }
    drop(cls_data);

    let l_cls = tensor::softmax_cross_entropy_weighted(&cls_flat, &labels, Some(&weights), denom);

    // Localization over positive rows only.
    let mut pos_rows = Vec::new();
    let mut pos_offsets = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        for ai in 0..total_anchors {
            if t.positive[ai] {
                pos_rows.push(n * total_anchors + ai);
                pos_offsets.extend_from_slice(&t.loc_targets[ai]);
            }
        }
    }
    let l_loc = if pos_rows.is_empty() {
        tensor::scale(&tensor::sum_all(&loc_flat), 0.0)
    } else {
        let pred = select_rows(&loc_flat, &pos_rows);
        let target = Tensor::from_vec(Shape::new(pos_rows.len(), 4, 1, 1), pos_offsets);
        tensor::smooth_l1_sum(&pred, &target, denom)
    };
    (l_cls, l_loc)
}

// ---------------------------------------------------------------------------
// decoding and NMS
// ---------------------------------------------------------------------------

pub const DEFAULT_SCORE_THRESH: f32 = 0.01;
pub const DEFAULT_NMS_IOU: f32 = 0.45;
pub const DEFAULT_MAX_DETS: usize = 100;

/// One decoded, scored detection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// Decode head outputs for every image in the batch and run per-class
/// greedy NMS. Ties break toward the lower anchor index.
pub fn decode_and_nms(
    cls_layers: &[&Tensor],
    loc_layers: &[&Tensor],
    anchors: &AnchorSet,
    config: &DetectorConfig,
    score_thresh: f32,
    nms_iou: f32,
    max_dets: usize,
) -> Vec<Vec<Detection>> {
    let fields = config.cls_fields();
    let cls_flat = flatten_heads(cls_layers, config.anchors_per_cell, fields).detach();
    let loc_flat = flatten_heads(loc_layers, config.anchors_per_cell, 4).detach();
    let total = anchors.len();
    let batch = cls_flat.shape().n / total;
    let cls = cls_flat.data();
    let loc = loc_flat.data();

    let mut out = Vec::with_capacity(batch);
    for n in 0..batch {
        // candidates per class: (score, anchor index, decoded box)
        let mut per_class: Vec<Vec<(f32, usize, BBox)>> = vec![Vec::new(); config.num_classes];
        for ai in 0..total {
            let row = n * total + ai;
            let base = row * fields;
            let mut m = f64::NEG_INFINITY;
            for f in 0..fields {
                m = m.max(cls[base + f] as f64);
            }
            let mut z = 0.0f64;
            for f in 0..fields {
                z += ((cls[base + f] as f64) - m).exp();
            }
            for c in 0..config.num_classes {
                let p = (((cls[base + c + 1] as f64) - m).exp() / z) as f32;
                if p > score_thresh {
                    let off = [
                        loc[row * 4],
                        loc[row * 4 + 1],
                        loc[row * 4 + 2],
                        loc[row * 4 + 3],
                    ];
                    let decoded = decode_box(off, &anchors.anchors[ai]).clip_unit();
                    if decoded.is_valid() {
                        per_class[c].push((p, ai, decoded));
                    }
                }
            }
        }
        let mut dets: Vec<(f32, usize, Detection)> = Vec::new();
        for (c, mut cands) in per_class.into_iter().enumerate() {
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1))
            });
            let mut kept: Vec<(f32, usize, BBox)> = Vec::new();
            'cand: for (score, ai, bb) in cands {
                for (_, _, kb) in &kept {
                    if iou(&bb, kb) > nms_iou {
                        continue 'cand;
                    }
                }
                kept.push((score, ai, bb));
            }
            for (score, ai, bbox) in kept {
                dets.push((
                    score,
                    ai,
                    Detection {
                        class_id: c,
                        score,
                        bbox,
                    },
                ));
            }
        }
        dets.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
        });
        out.push(dets.into_iter().take(max_dets).map(|(_, _, d)| d).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_centers_on_2x2_grid() {
        let config = DetectorConfig {
            head_strides: vec![32],
            anchors_per_cell: 1,
            anchor_scales: vec![0.5],
            ..Default::default()
        };
        let set = generate_anchors(&config);
        assert_eq!(set.len(), 4);
        let centers: Vec<(f32, f32)> = set.anchors.iter().map(|b| b.center()).collect();
        assert_eq!(
            centers,
            vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
        );
    }

    #[test]
    fn scale_one_anchors_clip_to_unit_square() {
        let config = DetectorConfig {
            head_strides: vec![32],
            anchors_per_cell: 1,
            anchor_scales: vec![1.0],
            ..Default::default()
        };
        let set = generate_anchors(&config);
        for a in &set.anchors {
            assert!(a.xmin >= 0.0 && a.ymin >= 0.0 && a.xmax <= 1.0 && a.ymax <= 1.0);
        }
    }

    #[test]
    fn anchor_count_matches_formula() {
        let config = DetectorConfig::default();
        let set = generate_anchors(&config);
        let expected: usize = config
            .head_strides
            .iter()
            .map(|&s| config.grid(s) * config.grid(s) * config.anchors_per_cell)
            .sum();
        assert_eq!(set.len(), expected);
        assert_eq!(set.len(), 8 * 8 * 2 + 2 * 2 * 2);
    }

    #[test]
    fn backbone_emits_expected_grids() {
        let config = DetectorConfig::default();
        let mut rng = Rng::stream(1, "init");
        let det = Detector::new(&config, &mut rng);
        let imgs = Tensor::zeros(Shape::new(2, 3, 64, 64));
        let taps = det.backbone_forward(&imgs);
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].0, 8);
        assert_eq!(taps[0].1.shape(), Shape::new(2, 64, 8, 8));
        assert_eq!(taps[1].0, 32);
        assert_eq!(taps[1].1.shape(), Shape::new(2, 64, 2, 2));
    }

    #[test]
    #[should_panic(expected = "expected Nx3x64x64")]
    fn wrong_input_size_is_fatal() {
        let config = DetectorConfig::default();
        let mut rng = Rng::stream(1, "init");
        let det = Detector::new(&config, &mut rng);
        det.backbone_forward(&Tensor::zeros(Shape::new(1, 3, 32, 32)));
    }

    #[test]
    fn gradient_reaches_first_stage_from_both_heads() {
        let config = DetectorConfig::default();
        let mut rng = Rng::stream(2, "init");
        let det = Detector::new(&config, &mut rng);
        let mut img_rng = Rng::stream(3, "img");
        let imgs = Tensor::from_vec(
            Shape::new(1, 3, 64, 64),
            (0..3 * 64 * 64).map(|_| img_rng.uniform(0.0, 1.0)).collect(),
        );
        let out = det.forward(&imgs);
        let mut total = tensor::sum_all(&out.cls[0]);
        for t in out.cls.iter().skip(1).chain(out.loc.iter()) {
            total = tensor::add(&total, &tensor::sum_all(t));
        }
        total.backward();
        let g = det.stages[0].weight.tensor().grad().expect("no grad on stage 1");
        let norm: f32 = g.iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    fn tiny_anchorset(boxes: &[BBox]) -> AnchorSet {
        AnchorSet {
            anchors: boxes.to_vec(),
            layers: vec![(8, 0, boxes.len())],
        }
    }

    #[test]
    fn matching_exact_anchor_is_positive_with_zero_target() {
        let gt = BBox::new(0.2, 0.2, 0.5, 0.5);
        let anchors = tiny_anchorset(&[gt, BBox::new(0.6, 0.6, 0.9, 0.9)]);
        let m = match_anchors(&anchors, &[(gt, 1)], DEFAULT_POS_IOU);
        assert!(m.positive[0]);
        assert_eq!(m.labels[0], 2);
        assert_eq!(m.loc_targets[0], [0.0; 4]);
        assert!(!m.positive[1]);
        assert_eq!(m.labels[1], 0);
    }

    #[test]
    fn low_iou_non_best_anchor_stays_negative() {
        let gt = BBox::new(0.0, 0.0, 0.4, 0.4);
        // first anchor overlaps better; the second sits at IoU ~0.23
        let anchors = tiny_anchorset(&[
            BBox::new(0.05, 0.05, 0.45, 0.45),
            BBox::new(0.2, 0.2, 0.6, 0.6),
        ]);
        let m = match_anchors(&anchors, &[(gt, 0)], DEFAULT_POS_IOU);
        assert!(m.positive[0], "best match is forced positive");
        assert!(!m.positive[1]);
    }

    #[test]
    fn forced_best_match_below_threshold() {
        // Exhaustive check over a small anchor grid: a gt overlapping
        // nothing above 0.2 still claims its best anchor.
        let gt = BBox::new(0.41, 0.41, 0.52, 0.52);
        let mut anchors = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                anchors.push(BBox::new(
                    x as f32 * 0.3 + 0.01,
                    y as f32 * 0.3 + 0.01,
                    x as f32 * 0.3 + 0.28,
                    y as f32 * 0.3 + 0.28,
                ));
            }
        }
        let set = tiny_anchorset(&anchors);
        let mut best = (0, 0.0f32);
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, &gt);
            if v > best.1 {
                best = (i, v);
            }
        }
        assert!(best.1 < DEFAULT_POS_IOU);
        let m = match_anchors(&set, &[(gt, 2)], DEFAULT_POS_IOU);
        assert_eq!(m.num_positives(), 1);
        assert!(m.positive[best.0]);
    }

    #[test]
    fn every_gt_gets_a_positive_even_when_bests_collide() {
        let anchors = tiny_anchorset(&[
            BBox::new(0.1, 0.1, 0.5, 0.5),
            BBox::new(0.12, 0.12, 0.52, 0.52),
            BBox::new(0.7, 0.7, 0.9, 0.9),
        ]);
        // Two nearly identical gts whose best anchor is the same.
        let gts = vec![
            (BBox::new(0.1, 0.1, 0.49, 0.49), 0),
            (BBox::new(0.11, 0.11, 0.5, 0.5), 1),
        ];
        let m = match_anchors(&anchors, &gts, DEFAULT_POS_IOU);
        let classes: std::collections::BTreeSet<usize> =
            m.labels.iter().filter(|&&l| l > 0).copied().collect();
        assert!(classes.contains(&1) && classes.contains(&2));
    }

    #[test]
    #[should_panic(expected = "empty anchor set")]
    fn empty_anchor_set_is_fatal() {
        let set = AnchorSet {
            anchors: vec![],
            layers: vec![],
        };
        match_anchors(&set, &[], DEFAULT_POS_IOU);
    }
}
