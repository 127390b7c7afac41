use serde::{Deserialize, Serialize};

pub const PERSON: u32 = 0;

/// Axis-aligned box in normalized centre format. `score` is only set on
/// predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
    pub score: Option<f64>,
}

impl BoundingBox {
    pub fn person(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            class_id: PERSON,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    /// `(x0, y0, x1, y1)` in normalized coordinates.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::person((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clips to the unit square; `None` when nothing remains.
    pub fn clipped(&self) -> Option<Self> {
        let (x0, y0, x1, y1) = self.corners();
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
        if x1 <= x0 || y1 <= y0 {
            return None;
        }
        let mut b = Self::from_corners(x0, y0, x1, y1);
        b.class_id = self.class_id;
        b.score = self.score;
        Some(b)
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive end) for an image of the
    /// given size, clipped to the image bounds.
    pub fn pixel_rect(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let (x0, y0, x1, y1) = self.corners();
        let px = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n);
        (px(x0, width), px(y0, height), px(x1, width), px(y1, height))
    }
}

/// Intersection over union. Degenerate boxes give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return 0.0;
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_boxes() {
        let a = BoundingBox::person(0.3, 0.4, 0.2, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        let a = BoundingBox::person(0.2, 0.2, 0.2, 0.2);
        let b = BoundingBox::person(0.8, 0.8, 0.2, 0.2);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn degenerate_box_is_zero() {
        let a = BoundingBox::person(0.5, 0.5, 0.0, 0.3);
        assert_eq!(iou(&a, &a), 0.0);
    }

    /// Counts pixel centres of a 1000x1000 raster inside each box.
    fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let n = 1000;
        let inside = |bx: &BoundingBox, x: f64, y: f64| {
            (x - bx.cx).abs() <= bx.w / 2.0 && (y - bx.cy).abs() <= bx.h / 2.0
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for yi in 0..n {
            let y = (yi as f64 + 0.5) / n as f64;
            for xi in 0..n {
                let x = (xi as f64 + 0.5) / n as f64;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn overlapping_boxes_match_raster_oracle() {
        let a = BoundingBox::person(0.25, 0.25, 0.5, 0.5);
        let b = BoundingBox::person(0.5, 0.5, 0.5, 0.5);
        let oracle = raster_iou(&a, &b);
        assert!((iou(&a, &b) - oracle).abs() < 1e-2, "{} vs {oracle}", iou(&a, &b));
    }

    #[test]
    fn clipping_and_pixel_rect() {
        let b = BoundingBox::person(0.9, 0.5, 0.4, 0.2);
        let c = b.clipped().unwrap();
        assert!((c.corners().2 - 1.0).abs() < 1e-12);
        assert!((c.w - 0.3).abs() < 1e-12);
        assert_eq!(b.pixel_rect(10, 10), (7, 4, 10, 6));
        assert!(BoundingBox::person(1.5, 0.5, 0.2, 0.2).clipped().is_none());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64)
            .prop_map(|(cx, cy, w, h)| BoundingBox::person(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            // IoU cannot exceed the ratio of the smaller to the larger area
            let bound = a.area().min(b.area()) / a.area().max(b.area());
            prop_assert!(ab <= bound + 1e-12);
        }
    }
}
