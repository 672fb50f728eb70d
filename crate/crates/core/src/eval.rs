//! VOC-style mAP evaluation with all-point interpolation.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::detector::Detection;
use crate::error::{Error, Result};

pub const DEFAULT_MAP_IOU: f32 = 0.5;

/// Detections dumped per image; also the CLI's on-disk record format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub class: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection) -> DetectionRecord {
        DetectionRecord {
            class: d.class_id,
            score: d.score,
            bbox: [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MapReport {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
}

/// Compute per-class AP and mAP at one IoU threshold.
///
/// Detections are ranked by score over the whole set; a detection is a true
/// positive when it overlaps an unmatched ground truth of its class at IoU
/// >= `iou_thresh` (greedy in rank order, ties toward the lower ground-truth
/// index). AP integrates the precision envelope over all recall points; mAP
/// averages classes that have at least one ground truth.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    ground_truths: &[Vec<(BBox, usize)>],
    num_classes: usize,
    iou_thresh: f32,
) -> Result<MapReport> {
    if detections.len() != ground_truths.len() {
        return Err(Error::Eval(format!(
            "detections for {} images but ground truth for {}",
            detections.len(),
            ground_truths.len()
        )));
    }
    let total_gt: usize = ground_truths.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return Err(Error::Eval("no ground truth boxes at all".into()));
    }

    let mut per_class_ap = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let gt_count: usize = ground_truths
            .iter()
            .map(|g| g.iter().filter(|(_, c)| *c == class).count())
            .sum();
        if gt_count == 0 {
            per_class_ap.push(f64::NAN); // excluded from the mean below
            continue;
        }

        // (score, image, box); ordering uses intrinsic keys only so the
        // result is invariant to input order.
        let mut ranked: Vec<(f32, usize, BBox)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for d in dets {
                if d.class_id == class {
                    ranked.push((d.score, img, d.bbox));
                }
            }
        }
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.2.xmin.partial_cmp(&b.2.xmin).unwrap())
                .then_with(|| a.2.ymin.partial_cmp(&b.2.ymin).unwrap())
                .then_with(|| a.2.xmax.partial_cmp(&b.2.xmax).unwrap())
                .then_with(|| a.2.ymax.partial_cmp(&b.2.ymax).unwrap())
        });

        let mut matched: Vec<Vec<bool>> = ground_truths
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let mut tp = vec![false; ranked.len()];
        for (ri, (_, img, bbox)) in ranked.iter().enumerate() {
            let mut best: Option<(usize, f32)> = None;
            for (gi, (gt, c)) in ground_truths[*img].iter().enumerate() {
                if *c != class || matched[*img][gi] {
                    continue;
                }
                let v = iou(bbox, gt);
                if v >= iou_thresh && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                matched[*img][gi] = true;
                tp[ri] = true;
            }
        }

        // precision/recall curve, then the envelope integral
        let mut ap = 0.0f64;
        let mut cum_tp = 0usize;
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
        for (ri, is_tp) in tp.iter().enumerate() {
            if *is_tp {
                cum_tp += 1;
            }
            let recall = cum_tp as f64 / gt_count as f64;
            let precision = cum_tp as f64 / (ri + 1) as f64;
            points.push((recall, precision));
        }
        let mut envelope = 0.0f64;
        let mut prev_recall = if points.is_empty() { 0.0 } else { points.last().unwrap().0 };
        for &(recall, precision) in points.iter().rev() {
            envelope = envelope.max(precision);
            ap += envelope * (prev_recall - recall);
            prev_recall = recall;
        }
        ap += envelope * prev_recall; // the first segment from recall 0
        per_class_ap.push(ap);
    }

    let defined: Vec<f64> = per_class_ap.iter().copied().filter(|v| !v.is_nan()).collect();
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapReport { per_class_ap, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, score: f32, b: [f32; 4]) -> Detection {
        Detection {
            class_id: class,
            score,
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            vec![(BBox::new(0.1, 0.1, 0.4, 0.4), 0), (BBox::new(0.5, 0.5, 0.8, 0.8), 1)],
            vec![(BBox::new(0.2, 0.2, 0.6, 0.6), 2)],
        ];
        let dets = vec![
            vec![det(0, 0.9, [0.1, 0.1, 0.4, 0.4]), det(1, 0.8, [0.5, 0.5, 0.8, 0.8])],
            vec![det(2, 0.95, [0.2, 0.2, 0.6, 0.6])],
        ];
        let r = evaluate_map(&dets, &gts, 3, 0.5).unwrap();
        assert!((r.map - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_detections_scores_zero() {
        let gts = vec![vec![(BBox::new(0.1, 0.1, 0.4, 0.4), 0)]];
        let dets = vec![vec![]];
        let r = evaluate_map(&dets, &gts, 3, 0.5).unwrap();
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn hand_computed_three_detections_two_gts() {
        // One class, two gts in one image. Ranked detections:
        //   0.9 hits gt0 (TP), 0.8 misses (FP), 0.7 hits gt1 (TP).
        // PR points: (0.5, 1.0), (0.5, 0.5), (1.0, 2/3).
        // Envelope: precision 1.0 up to recall 0.5, then 2/3 up to 1.0.
        // AP = 0.5 * 1.0 + 0.5 * 2/3 = 5/6.
        let gts = vec![vec![
            (BBox::new(0.1, 0.1, 0.3, 0.3), 0),
            (BBox::new(0.6, 0.6, 0.9, 0.9), 0),
        ]];
        let dets = vec![vec![
            det(0, 0.9, [0.1, 0.1, 0.3, 0.3]),
            det(0, 0.8, [0.35, 0.35, 0.55, 0.55]),
            det(0, 0.7, [0.6, 0.6, 0.9, 0.9]),
        ]];
        let r = evaluate_map(&dets, &gts, 1, 0.5).unwrap();
        assert!((r.map - 5.0 / 6.0).abs() < 1e-9, "got {}", r.map);
    }

    #[test]
    fn duplicate_detection_of_same_gt_is_fp() {
        let gts = vec![vec![(BBox::new(0.1, 0.1, 0.5, 0.5), 0)]];
        let dets = vec![vec![
            det(0, 0.9, [0.1, 0.1, 0.5, 0.5]),
            det(0, 0.8, [0.1, 0.1, 0.5, 0.5]),
        ]];
        let r = evaluate_map(&dets, &gts, 1, 0.5).unwrap();
        // AP: TP at rank 1 gives recall 1 precision 1; the duplicate is FP.
        assert!((r.map - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let gts = vec![vec![(BBox::new(0.1, 0.1, 0.5, 0.5), 0)]];
        let dets = vec![vec![det(0, 0.9, [0.1, 0.1, 0.5, 0.5])]];
        let r = evaluate_map(&dets, &gts, 3, 0.5).unwrap();
        assert!((r.map - 1.0).abs() < 1e-9);
        assert!(r.per_class_ap[1].is_nan() && r.per_class_ap[2].is_nan());
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let r = evaluate_map(&[vec![]], &[vec![]], 3, 0.5);
        assert!(r.is_err());
    }
}
