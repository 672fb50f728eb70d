//! Two-stage optimization: source-only pretraining, then adversarial
//! adaptation on mixed labeled-source / unlabeled-target batches.
//!
//! Every run is bitwise deterministic for a fixed seed: data order, weight
//! init and the GRL ramp all derive from named sub-streams of the run seed.
//! The unlabeled contract is structural — the adaptation loop takes
//! [`UnlabeledImage`] values that carry no annotation fields.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::BBox;
use crate::checkpoint::Checkpoint;
use crate::config::LabConfig;
use crate::data::{Sample, UnlabeledImage};
use crate::detector::{
    decode_and_nms, detection_loss, generate_anchors, match_anchors, Detector, MatchTargets,
    DEFAULT_MAX_DETS, DEFAULT_NMS_IOU, DEFAULT_POS_IOU, DEFAULT_SCORE_THRESH,
};
use crate::dsem::{
    compute_seg_miou, domain_accuracy, domain_adv_loss, rasterize_boxes, seg_loss, Dsem,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, DetectionRecord, ImageDetections, MapReport, DEFAULT_MAP_IOU};
use crate::rng::Rng;
use crate::tensor::{self, sgd_step, Parameter, Shape, Tensor};

// ---------------------------------------------------------------------------
// model assembly
// ---------------------------------------------------------------------------

/// Detector plus the DSEM instances attached for adaptation.
pub struct Model {
    pub detector: Detector,
    pub dsems: Vec<Dsem>,
}

impl Model {
    /// Build the bare detector (pretraining / inference).
    pub fn bare(config: &LabConfig, seed: u64) -> Model {
        let mut rng = Rng::stream(seed, "init.detector");
        Model {
            detector: Detector::new(&config.detector, &mut rng),
            dsems: Vec::new(),
        }
    }

    /// Build the detector with DSEMs at the configured strides. Detector
    /// init consumes its own stream, so attaching DSEMs never shifts it.
    pub fn with_dsems(config: &LabConfig, seed: u64) -> Model {
        let mut model = Model::bare(config, seed);
        let mut rng = Rng::stream(seed, "init.dsem");
        for &stride in &config.adapt.dsem_strides {
            let stage = (stride as f32).log2() as usize;
            let channels = config.detector.backbone_channels[stage - 1];
            let map = config.detector.grid(stride);
            model
                .dsems
                .push(Dsem::new(&mut rng, stride, channels, map, map, &config.dsem));
        }
        model
    }

    pub fn detector_params(&self) -> Vec<&Parameter> {
        self.detector.params()
    }

    pub fn dsem_params(&self) -> Vec<&Parameter> {
        self.dsems.iter().flat_map(|d| d.params()).collect()
    }

    pub fn all_params(&self) -> Vec<&Parameter> {
        let mut p = self.detector_params();
        p.extend(self.dsem_params());
        p
    }

    /// Load a checkpoint that may or may not carry DSEM parameters.
    pub fn load_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        if self.dsems.is_empty() {
            ck.retain(|n| !n.starts_with("dsem")).apply_to(&self.detector_params())
        } else if ck.has_prefix("dsem") {
            ck.apply_to(&self.all_params())
        } else {
            ck.apply_to(&self.detector_params())
        }
    }
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// One row of the per-iteration metrics stream.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_det: f64,
    pub l_seg: f64,
    pub l_seg_adv: f64,
    pub l_adv_8: f64,
    pub l_adv_32: f64,
    pub domain_acc: f64,
    pub mask_miou: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
    pub final_source_eval: Option<MapReport>,
    pub final_target_eval: Option<MapReport>,
}

impl RunMetrics {
    fn push(&mut self, row: MetricsRow) {
        debug_assert!(self.rows.last().map_or(true, |r| r.iteration < row.iteration));
        let finite = row.l_det.is_finite()
            && row.l_seg.is_finite()
            && row.l_seg_adv.is_finite()
            && row.l_adv_8.is_finite()
            && row.l_adv_32.is_finite()
            && row.domain_acc.is_finite()
            && row.mask_miou.is_finite();
        assert!(finite, "non-finite metrics at iteration {}", row.iteration);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,l_det,l_seg,l_seg_adv,l_adv_8,l_adv_32,domain_acc,mask_miou\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration, r.l_det, r.l_seg, r.l_seg_adv, r.l_adv_8, r.l_adv_32, r.domain_acc, r.mask_miou
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(len: usize, mut rng: Rng) -> Batcher {
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        Batcher { order, pos: 0, rng }
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        assert!(n <= self.order.len(), "batch larger than dataset");
        if self.pos + n > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let slice = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        slice
    }
}

fn stack_images(images: &[&Tensor]) -> Tensor {
    let s = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * s.count());
    for img in images {
        assert_eq!(img.shape(), s, "inconsistent image shapes in batch");
        data.extend_from_slice(&img.data());
    }
    Tensor::from_vec(Shape::new(images.len(), s.c, s.h, s.w), data)
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

/// Source-only pretraining of the bare detector. Returns the detector
/// checkpoint and the loss curve.
pub fn pretrain_source(config: &LabConfig, source: &[Sample]) -> Result<(Checkpoint, RunMetrics)> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Dataset("pretraining needs a non-empty source set".into()));
    }
    let seed = config.adapt.seed;
    let model = Model::bare(config, seed);
    let anchors = generate_anchors(&config.detector);
    let matches: Vec<MatchTargets> = source
        .iter()
        .map(|s| {
            let gts: Vec<(BBox, usize)> =
                s.boxes.iter().copied().zip(s.labels.iter().copied()).collect();
            match_anchors(&anchors, &gts, DEFAULT_POS_IOU)
        })
        .collect();

    let mut batcher = Batcher::new(source.len(), Rng::stream(seed, "data.pretrain"));
    let params = model.detector_params();
    let mut metrics = RunMetrics::default();
    for it in 0..config.adapt.pretrain_iters {
        let idx = batcher.next(config.adapt.batch_size.min(source.len()));
        let images: Vec<&Tensor> = idx.iter().map(|&i| &source[i].image).collect();
        let batch = stack_images(&images);
        let targets: Vec<MatchTargets> = idx.iter().map(|&i| matches[i].clone()).collect();
        let out = model.detector.forward(&batch);
        let cls_refs: Vec<&Tensor> = out.cls.iter().collect();
        let loc_refs: Vec<&Tensor> = out.loc.iter().collect();
        let (l_cls, l_loc) = detection_loss(&cls_refs, &loc_refs, &targets, &config.detector);
        let total = tensor::add(&l_cls, &l_loc);
        total.backward();
        sgd_step(
            &params,
            config.adapt.pretrain_lr,
            config.adapt.momentum,
            config.adapt.weight_decay,
        );
        metrics.push(MetricsRow {
            iteration: it,
            l_det: total.item() as f64,
            l_seg: 0.0,
            l_seg_adv: 0.0,
            l_adv_8: 0.0,
            l_adv_32: 0.0,
            domain_acc: 0.0,
            mask_miou: 0.0,
        });
    }
    Ok((Checkpoint::from_params(&params), metrics))
}

// ---------------------------------------------------------------------------
// adaptation
// ---------------------------------------------------------------------------

/// Diagnostics hooks for the adaptation loop.
#[derive(Clone, Copy, Debug)]
pub struct AdaptOptions {
    /// When false the loop consumes the same RNG schedule but optimizes only
    /// the detection loss; used to verify the lambda = 0 reduction.
    pub include_dsem_losses: bool,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        AdaptOptions {
            include_dsem_losses: true,
        }
    }
}

/// Strip target annotations before adaptation, warning when any were
/// present: the adaptation loop is unsupervised on the target domain.
pub fn strip_targets(samples: &[Sample]) -> Vec<UnlabeledImage> {
    let annotated = samples.iter().filter(|s| !s.boxes.is_empty()).count();
    if annotated > 0 {
        log::warn!(
            "ignoring annotations on {annotated} target images; adaptation never reads them"
        );
    }
    samples.iter().map(|s| s.strip_annotations()).collect()
}

pub fn adapt(
    config: &LabConfig,
    pretrained: &Checkpoint,
    source: &[Sample],
    target: &[UnlabeledImage],
) -> Result<(Checkpoint, RunMetrics)> {
    adapt_with(config, pretrained, source, target, AdaptOptions::default())
}

pub fn adapt_with(
    config: &LabConfig,
    pretrained: &Checkpoint,
    source: &[Sample],
    target: &[UnlabeledImage],
    options: AdaptOptions,
) -> Result<(Checkpoint, RunMetrics)> {
    config.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Dataset("adaptation needs source and target images".into()));
    }
    let seed = config.adapt.seed;
    let model = Model::with_dsems(config, seed);
    model.load_checkpoint(pretrained)?;

    let anchors = generate_anchors(&config.detector);
    let matches: Vec<MatchTargets> = source
        .iter()
        .map(|s| {
            let gts: Vec<(BBox, usize)> =
                s.boxes.iter().copied().zip(s.labels.iter().copied()).collect();
            match_anchors(&anchors, &gts, DEFAULT_POS_IOU)
        })
        .collect();
    // rasterized foreground grids per DSEM stride, per source image
    let grids_by_stride: Vec<Vec<Vec<usize>>> = model
        .dsems
        .iter()
        .map(|d| {
            let g = config.detector.grid(d.stride);
            source
                .iter()
                .map(|s| rasterize_boxes(&s.boxes, g, g))
                .collect()
        })
        .collect();

    let half = config.adapt.batch_size / 2;
    let mut src_batcher = Batcher::new(source.len(), Rng::stream(seed, "data.adapt.source"));
    let mut tgt_batcher = Batcher::new(target.len(), Rng::stream(seed, "data.adapt.target"));
    let detector_params = model.detector_params();
    let dsem_params = model.dsem_params();
    let warm_iters = (config.adapt.grl_warmup_frac * config.adapt.adapt_iters as f32).ceil() as usize;

    let mut metrics = RunMetrics::default();
    for it in 0..config.adapt.adapt_iters {
        let grl_scale = if warm_iters > 0 {
            (it as f32 / warm_iters as f32).min(1.0)
        } else {
            1.0
        };
        let src_idx = src_batcher.next(half.min(source.len()));
        let tgt_idx = tgt_batcher.next(half.min(target.len()));

        let src_images: Vec<&Tensor> = src_idx.iter().map(|&i| &source[i].image).collect();
        let tgt_images: Vec<&Tensor> = tgt_idx.iter().map(|&i| &target[i].image).collect();
        let src_batch = stack_images(&src_images);
        let tgt_batch = stack_images(&tgt_images);

        let src_out = model.detector.forward(&src_batch);
        let cls_refs: Vec<&Tensor> = src_out.cls.iter().collect();
        let loc_refs: Vec<&Tensor> = src_out.loc.iter().collect();
        let targets: Vec<MatchTargets> = src_idx.iter().map(|&i| matches[i].clone()).collect();
        let (l_cls, l_loc) = detection_loss(&cls_refs, &loc_refs, &targets, &config.detector);
        let l_det = tensor::add(&l_cls, &l_loc);
        let mut total = l_det.clone();

        let tgt_features = model.detector.backbone_forward(&tgt_batch);

        let mut l_seg_sum = 0.0f64;
        let mut l_seg_adv_sum = 0.0f64;
        let mut l_adv_by_stride = [0.0f64; 2];
        let mut acc_sum = 0.0f64;
        let mut miou_sum = 0.0f64;
        let mut miou_count = 0usize;
        for (di, dsem) in model.dsems.iter().enumerate() {
            let feat_src = &src_out
                .features
                .iter()
                .find(|(s, _)| *s == dsem.stride)
                .expect("missing source feature map")
                .1;
            let feat_tgt = &tgt_features
                .iter()
                .find(|(s, _)| *s == dsem.stride)
                .expect("missing target feature map")
                .1;
            let fwd_src = dsem.forward(feat_src, grl_scale);
            let fwd_tgt = dsem.forward(feat_tgt, grl_scale);

            if let Some(seg_logits) = &fwd_src.seg_logits {
                let grids: Vec<Vec<usize>> = src_idx
                    .iter()
                    .map(|&i| grids_by_stride[di][i].clone())
                    .collect();
                let l_seg = seg_loss(seg_logits, &grids);
                l_seg_sum += l_seg.item() as f64;
                miou_sum += compute_seg_miou(&[(seg_logits, &grids)]);
                miou_count += 1;
                if options.include_dsem_losses {
                    total = tensor::add(&total, &l_seg);
                }
            }
            if let (Some(p_src), Some(p_tgt)) =
                (&fwd_src.mask_domain_prob, &fwd_tgt.mask_domain_prob)
            {
                let l_seg_adv = domain_adv_loss(p_src, p_tgt);
                l_seg_adv_sum += l_seg_adv.item() as f64;
                if options.include_dsem_losses {
                    total = tensor::add(&total, &l_seg_adv);
                }
            }
            let l_adv = domain_adv_loss(&fwd_src.domain_prob, &fwd_tgt.domain_prob);
            let slot = if dsem.stride == 8 { 0 } else { 1 };
            l_adv_by_stride[slot] += l_adv.item() as f64;
            acc_sum += domain_accuracy(&fwd_src.domain_prob, &fwd_tgt.domain_prob);
            // lambda = 0 must leave the detection path bit-identical to a
            // plain source fine-tune, so the weighted term is skipped
            // outright rather than multiplied by zero.
            if options.include_dsem_losses && config.adapt.lambda > 0.0 {
                total = tensor::add(&total, &tensor::scale(&l_adv, config.adapt.lambda));
            }
        }

        total.backward();
        sgd_step(
            &detector_params,
            config.adapt.base_lr,
            config.adapt.momentum,
            config.adapt.weight_decay,
        );
        // With lambda = 0 (or DSEM losses excluded) parts of the module see
        // no loss at all; parameters a backward pass never reached stay put.
        let touched: Vec<&Parameter> = dsem_params
            .iter()
            .copied()
            .filter(|p| p.tensor().has_grad())
            .collect();
        sgd_step(
            &touched,
            config.adapt.base_lr * config.adapt.dsem_lr_multiplier,
            config.adapt.momentum,
            config.adapt.weight_decay,
        );

        let n_dsems = model.dsems.len().max(1) as f64;
        metrics.push(MetricsRow {
            iteration: it,
            l_det: l_det.item() as f64,
            l_seg: l_seg_sum,
            l_seg_adv: l_seg_adv_sum,
            l_adv_8: l_adv_by_stride[0],
            l_adv_32: l_adv_by_stride[1],
            domain_acc: acc_sum / n_dsems,
            mask_miou: if miou_count > 0 {
                miou_sum / miou_count as f64
            } else {
                0.0
            },
        });
    }
    Ok((Checkpoint::from_params(&model.all_params()), metrics))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Run bare-detector inference and score mAP against the samples' boxes.
pub fn eval_detector(
    config: &LabConfig,
    checkpoint: &Checkpoint,
    samples: &[Sample],
) -> Result<(MapReport, Vec<ImageDetections>)> {
    let model = Model::bare(config, config.adapt.seed);
    model.load_checkpoint(checkpoint)?;
    let detections = infer_detections(config, &model.detector, samples);
    let gts: Vec<Vec<(BBox, usize)>> = samples
        .iter()
        .map(|s| s.boxes.iter().copied().zip(s.labels.iter().copied()).collect())
        .collect();
    let dets_only: Vec<_> = detections.iter().map(|(d, _)| d.clone()).collect();
    let report = evaluate_map(&dets_only, &gts, config.detector.num_classes, DEFAULT_MAP_IOU)?;
    let dumps = detections
        .into_iter()
        .zip(samples)
        .map(|((dets, _), s)| ImageDetections {
            image_id: s.image_id.clone(),
            detections: dets.iter().map(DetectionRecord::from_detection).collect(),
        })
        .collect();
    Ok((report, dumps))
}

/// Decode detections for every sample, batched for throughput.
pub fn infer_detections(
    config: &LabConfig,
    detector: &Detector,
    samples: &[Sample],
) -> Vec<(Vec<crate::detector::Detection>, String)> {
    let anchors = generate_anchors(&config.detector);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let batch = stack_images(&images);
        let fwd = detector.forward(&batch);
        let cls_refs: Vec<&Tensor> = fwd.cls.iter().collect();
        let loc_refs: Vec<&Tensor> = fwd.loc.iter().collect();
        let dets = decode_and_nms(
            &cls_refs,
            &loc_refs,
            &anchors,
            &config.detector,
            DEFAULT_SCORE_THRESH,
            DEFAULT_NMS_IOU,
            DEFAULT_MAX_DETS,
        );
        for (d, s) in dets.into_iter().zip(chunk) {
            out.push((d, s.image_id.clone()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// domain probe
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub domain_acc: f64,
    pub seg_miou: f64,
}

/// Train a fresh DSEM stack on top of the checkpointed (frozen) backbone,
/// then measure per-location domain accuracy on held-out data. A high value
/// means the shift is easy to detect in the checkpoint's features; after
/// successful adaptation the same probe lands lower.
pub fn probe_domain_accuracy(
    config: &LabConfig,
    checkpoint: &Checkpoint,
    train_source: &[Sample],
    train_target: &[UnlabeledImage],
    eval_source: &[Sample],
    eval_target: &[UnlabeledImage],
) -> Result<ProbeReport> {
    config.validate()?;
    let seed = config.adapt.seed;
    let model = Model::with_dsems(config, seed);
    // Only the detector part of the checkpoint participates; the probe's
    // discriminators always start fresh.
    ck_detector_only(checkpoint).apply_to(&model.detector_params())?;

    let anchor_grids: Vec<Vec<Vec<usize>>> = model
        .dsems
        .iter()
        .map(|d| {
            let g = config.detector.grid(d.stride);
            train_source
                .iter()
                .map(|s| rasterize_boxes(&s.boxes, g, g))
                .collect()
        })
        .collect();

    let half = config.adapt.batch_size / 2;
    let mut src_batcher = Batcher::new(train_source.len(), Rng::stream(seed, "data.probe.source"));
    let mut tgt_batcher = Batcher::new(train_target.len(), Rng::stream(seed, "data.probe.target"));
    let dsem_params = model.dsem_params();

    for _ in 0..config.adapt.probe_iters {
        let src_idx = src_batcher.next(half.min(train_source.len()));
        let tgt_idx = tgt_batcher.next(half.min(train_target.len()));
        let src_images: Vec<&Tensor> = src_idx.iter().map(|&i| &train_source[i].image).collect();
        let tgt_images: Vec<&Tensor> = tgt_idx.iter().map(|&i| &train_target[i].image).collect();
        // frozen backbone: features are detached before the DSEMs
        let src_feats = model.detector.backbone_forward(&stack_images(&src_images));
        let tgt_feats = model.detector.backbone_forward(&stack_images(&tgt_images));
        let mut total: Option<Tensor> = None;
        for (di, dsem) in model.dsems.iter().enumerate() {
            let fs = src_feats.iter().find(|(s, _)| *s == dsem.stride).unwrap().1.detach();
            let ft = tgt_feats.iter().find(|(s, _)| *s == dsem.stride).unwrap().1.detach();
            let fwd_src = dsem.forward(&fs, 1.0);
            let fwd_tgt = dsem.forward(&ft, 1.0);
            let mut loss = domain_adv_loss(&fwd_src.domain_prob, &fwd_tgt.domain_prob);
            if let Some(seg_logits) = &fwd_src.seg_logits {
                let grids: Vec<Vec<usize>> = src_idx
                    .iter()
                    .map(|&i| anchor_grids[di][i].clone())
                    .collect();
                loss = tensor::add(&loss, &seg_loss(seg_logits, &grids));
            }
            if let (Some(ps), Some(pt)) = (&fwd_src.mask_domain_prob, &fwd_tgt.mask_domain_prob) {
                loss = tensor::add(&loss, &domain_adv_loss(ps, pt));
            }
            total = Some(match total {
                Some(t) => tensor::add(&t, &loss),
                None => loss,
            });
        }
        total.expect("no DSEM attached").backward();
        sgd_step(
            &dsem_params,
            config.adapt.base_lr * config.adapt.dsem_lr_multiplier,
            config.adapt.momentum,
            config.adapt.weight_decay,
        );
    }

    // measurement on the evaluation sets
    let mut acc_sum = 0.0f64;
    let mut acc_n = 0usize;
    let mut miou_batches_done = 0.0f64;
    let mut miou_n = 0usize;
    for (src_chunk, tgt_chunk) in eval_source.chunks(8).zip(eval_target.chunks(8)) {
        let src_images: Vec<&Tensor> = src_chunk.iter().map(|s| &s.image).collect();
        let tgt_images: Vec<&Tensor> = tgt_chunk.iter().map(|s| &s.image).collect();
        let src_feats = model.detector.backbone_forward(&stack_images(&src_images));
        let tgt_feats = model.detector.backbone_forward(&stack_images(&tgt_images));
        for dsem in &model.dsems {
            let fs = src_feats.iter().find(|(s, _)| *s == dsem.stride).unwrap().1.detach();
            let ft = tgt_feats.iter().find(|(s, _)| *s == dsem.stride).unwrap().1.detach();
            let fwd_src = dsem.forward(&fs, 1.0);
            let fwd_tgt = dsem.forward(&ft, 1.0);
            acc_sum += domain_accuracy(&fwd_src.domain_prob, &fwd_tgt.domain_prob);
            acc_n += 1;
            if let Some(seg_logits) = &fwd_src.seg_logits {
                let g = config.detector.grid(dsem.stride);
                let grids: Vec<Vec<usize>> = src_chunk
                    .iter()
                    .map(|s| rasterize_boxes(&s.boxes, g, g))
                    .collect();
                miou_batches_done += compute_seg_miou(&[(seg_logits, &grids)]);
                miou_n += 1;
            }
        }
    }
    Ok(ProbeReport {
        domain_acc: acc_sum / acc_n.max(1) as f64,
        seg_miou: if miou_n > 0 {
            miou_batches_done / miou_n as f64
        } else {
            0.0
        },
    })
}

fn ck_detector_only(ck: &Checkpoint) -> Checkpoint {
    ck.retain(|n| !n.starts_with("dsem"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain_pair, ShiftSpec};

    fn tiny_config() -> LabConfig {
        let mut cfg = LabConfig::default();
        cfg.dsem.inner_channels = 16;
        cfg.adapt.pretrain_iters = 3;
        cfg.adapt.adapt_iters = 3;
        cfg.adapt.batch_size = 4;
        cfg.adapt.probe_iters = 2;
        cfg
    }

    #[test]
    fn zero_iteration_pretrain_equals_init() {
        let mut cfg = tiny_config();
        cfg.adapt.pretrain_iters = 0;
        let (src, _) = gen_domain_pair(4, 0, &ShiftSpec::null(), 1).unwrap();
        let (ck, metrics) = pretrain_source(&cfg, &src).unwrap();
        assert!(metrics.rows.is_empty());
        let fresh = Model::bare(&cfg, cfg.adapt.seed);
        for p in fresh.detector_params() {
            let entry = ck.get(p.name()).expect("missing param");
            assert_eq!(entry.2, *p.tensor().data(), "{}", p.name());
        }
    }

    #[test]
    fn pretrain_is_bitwise_deterministic() {
        let cfg = tiny_config();
        let (src, _) = gen_domain_pair(6, 0, &ShiftSpec::null(), 2).unwrap();
        let (ck1, m1) = pretrain_source(&cfg, &src).unwrap();
        let (ck2, m2) = pretrain_source(&cfg, &src).unwrap();
        for (a, b) in ck1.entries.iter().zip(&ck2.entries) {
            assert_eq!(a.0, b.0);
            assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(m1.to_csv(), m2.to_csv());
    }

    #[test]
    fn adapt_runs_and_is_deterministic() {
        let cfg = tiny_config();
        let (src, tgt) = gen_domain_pair(6, 6, &ShiftSpec::standard(), 3).unwrap();
        let unlabeled = strip_targets(&tgt);
        let (pre, _) = pretrain_source(&cfg, &src).unwrap();
        let (ck1, m1) = adapt(&cfg, &pre, &src, &unlabeled).unwrap();
        let (ck2, m2) = adapt(&cfg, &pre, &src, &unlabeled).unwrap();
        assert_eq!(m1.to_csv(), m2.to_csv());
        for (a, b) in ck1.entries.iter().zip(&ck2.entries) {
            assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.0);
        }
        assert!(ck1.has_prefix("dsem"));
        assert!(m1.rows.iter().all(|r| r.l_adv_8 > 0.0 && r.l_adv_32 > 0.0));
    }

    #[test]
    fn lambda_zero_matches_loop_without_dsem_losses() {
        let mut cfg = tiny_config();
        cfg.adapt.lambda = 0.0;
        let (src, tgt) = gen_domain_pair(6, 6, &ShiftSpec::standard(), 4).unwrap();
        let unlabeled = strip_targets(&tgt);
        let (pre, _) = pretrain_source(&cfg, &src).unwrap();
        let (ck_on, _) = adapt(&cfg, &pre, &src, &unlabeled).unwrap();
        let (ck_off, _) = adapt_with(
            &cfg,
            &pre,
            &src,
            &unlabeled,
            AdaptOptions {
                include_dsem_losses: false,
            },
        )
        .unwrap();
        // backbone and head parameters must be bit-identical
        for (name, _, data) in &ck_on.entries {
            if name.starts_with("dsem") {
                continue;
            }
            let other = ck_off.get(name).expect("missing detector param");
            assert!(
                data.iter().zip(&other.2).all(|(a, b)| a.to_bits() == b.to_bits()),
                "detector param {name} diverged under lambda = 0"
            );
        }
    }

    #[test]
    fn unsupervised_contract_annotations_change_nothing() {
        let cfg = tiny_config();
        let (src, tgt) = gen_domain_pair(6, 6, &ShiftSpec::standard(), 5).unwrap();
        let (pre, _) = pretrain_source(&cfg, &src).unwrap();
        // annotated and box-stripped target files produce identical runs
        let with_boxes = strip_targets(&tgt);
        let mut stripped_files = tgt.clone();
        for s in &mut stripped_files {
            s.boxes.clear();
            s.labels.clear();
        }
        let without_boxes = strip_targets(&stripped_files);
        let (ck1, m1) = adapt(&cfg, &pre, &src, &with_boxes).unwrap();
        let (ck2, m2) = adapt(&cfg, &pre, &src, &without_boxes).unwrap();
        assert_eq!(m1.to_csv(), m2.to_csv());
        for (a, b) in ck1.entries.iter().zip(&ck2.entries) {
            assert!(a.2.iter().zip(&b.2).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn dsem_lr_multiplier_scales_steps_tenfold() {
        // One parameter in each group, equal gradients: the DSEM step must
        // be exactly ten times the detector step.
        let det = Parameter::new("det.w", Shape::scalar(), vec![0.0]);
        let dsem = Parameter::new("dsem.w", Shape::scalar(), vec![0.0]);
        det.tensor().accumulate_grad(&[0.25]);
        dsem.tensor().accumulate_grad(&[0.25]);
        let lr = 1e-3f32;
        sgd_step(&[&det], lr, 0.0, 0.0);
        sgd_step(&[&dsem], lr * 10.0, 0.0, 0.0);
        let det_step = -det.tensor().data()[0];
        let dsem_step = -dsem.tensor().data()[0];
        assert!((dsem_step / det_step - 10.0).abs() < 1e-6);
    }

    #[test]
    fn eval_detector_runs_on_pretrained_checkpoint() {
        let cfg = tiny_config();
        let (src, _) = gen_domain_pair(6, 0, &ShiftSpec::null(), 6).unwrap();
        let (ck, _) = pretrain_source(&cfg, &src).unwrap();
        let (report, dumps) = eval_detector(&cfg, &ck, &src).unwrap();
        assert!(report.map >= 0.0 && report.map <= 1.0);
        assert_eq!(dumps.len(), src.len());
    }

    #[test]
    fn probe_runs_on_both_checkpoint_kinds() {
        let cfg = tiny_config();
        let (src, tgt) = gen_domain_pair(6, 6, &ShiftSpec::standard(), 7).unwrap();
        let unlabeled = strip_targets(&tgt);
        let (pre, _) = pretrain_source(&cfg, &src).unwrap();
        let r1 = probe_domain_accuracy(&cfg, &pre, &src, &unlabeled, &src, &unlabeled).unwrap();
        assert!((0.0..=1.0).contains(&r1.domain_acc));
        let (adapted, _) = adapt(&cfg, &pre, &src, &unlabeled).unwrap();
        let r2 = probe_domain_accuracy(&cfg, &adapted, &src, &unlabeled, &src, &unlabeled).unwrap();
        assert!((0.0..=1.0).contains(&r2.domain_acc));
    }
}
