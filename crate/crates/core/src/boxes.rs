//! Axis-aligned boxes in normalized image coordinates.

use serde::{Deserialize, Serialize};

/// A box with corners in [0, 1], normalized to the image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl BBox {
    pub fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> BBox {
        let b = BBox {
            xmin,
            ymin,
            xmax,
            ymax,
        };
        assert!(b.is_valid(), "degenerate box {b:?}");
        b
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.xmin + self.xmax),
            0.5 * (self.ymin + self.ymax),
        )
    }

    pub fn clip_unit(&self) -> BBox {
        BBox {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn contains_point(&self, x: f32, y: f32) -> bool {
        x >= self.xmin && x < self.xmax && y >= self.ymin && y < self.ymax
    }
}

/// Intersection over union, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Center/size offsets of `gt` relative to `anchor`:
/// `(dcx/wa, dcy/ha, ln(w/wa), ln(h/ha))`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> [f32; 4] {
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    [
        (gcx - acx) / anchor.width(),
        (gcy - acy) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(offsets: [f32; 4], anchor: &BBox) -> BBox {
    let (acx, acy) = anchor.center();
    let cx = acx + offsets[0] * anchor.width();
    let cy = acy + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].exp();
    let h = anchor.height() * offsets[3].exp();
    BBox {
        xmin: cx - 0.5 * w,
        ymin: cy - 0.5 * h,
        xmax: cx + 0.5 * w,
        ymax: cy + 0.5 * h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_and_disjoint() {
        let a = BBox::new(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        let b = BBox::new(0.6, 0.6, 0.9, 0.9);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_known_overlap() {
        let a = BBox::new(0.2, 0.2, 0.6, 0.6);
        let b = BBox::new(0.4, 0.4, 0.8, 0.8);
        assert!((iou(&a, &b) - 4.0 / 28.0).abs() < 1e-6);
    }

    #[test]
    fn encode_decode_round_trip() {
        let anchor = BBox::new(0.25, 0.25, 0.75, 0.75);
        let gt = BBox::new(0.3, 0.1, 0.7, 0.8);
        let back = decode_box(encode_box(&gt, &anchor), &anchor);
        assert!((back.xmin - gt.xmin).abs() < 1e-5);
        assert!((back.ymin - gt.ymin).abs() < 1e-5);
        assert!((back.xmax - gt.xmax).abs() < 1e-5);
        assert!((back.ymax - gt.ymax).abs() < 1e-5);
    }

    #[test]
    fn matching_anchor_encodes_to_zero() {
        let anchor = BBox::new(0.2, 0.3, 0.6, 0.7);
        let off = encode_box(&anchor, &anchor);
        assert_eq!(off, [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "degenerate box")]
    fn degenerate_box_is_rejected() {
        BBox::new(0.5, 0.2, 0.5, 0.8);
    }
}
