//! Axis-aligned boxes in grid units: overlap, suppression, delta encoding and
//! the 12-dimensional pairwise spatial relation used by the edge weights.

use serde::{Deserialize, Serialize};

use crate::numerics::Vector;

/// Center/size box. `w` and `h` are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }

    /// Clips to `[0, width] x [0, height]`, keeping a minimal positive extent.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        const MIN_EXTENT: f64 = 1e-3;
        let x0 = self.x0().clamp(0.0, width - MIN_EXTENT);
        let y0 = self.y0().clamp(0.0, height - MIN_EXTENT);
        let x1 = self.x1().clamp(x0 + MIN_EXTENT, width);
        let y1 = self.y1().clamp(y0 + MIN_EXTENT, height);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        const TOL: f64 = 1e-9;
        self.x0() >= -TOL && self.y0() >= -TOL && self.x1() <= width + TOL && self.y1() <= height + TOL
    }

    /// Total order used wherever equal scores must be broken independently of
    /// input order.
    pub fn total_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.cx
            .total_cmp(&other.cx)
            .then(self.cy.total_cmp(&other.cy))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Indices of `scores` sorted by descending score, ties by lower index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; a box is dropped when its IoU with an already kept box exceeds
/// `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    assert_eq!(
        boxes.len(),
        scores.len(),
        "nms: {} boxes vs {} scores",
        boxes.len(),
        scores.len()
    );
    let mut keep: Vec<usize> = Vec::new();
    if max_keep == 0 {
        return keep;
    }
    for idx in rank_by_score(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[idx]) <= iou_thresh) {
            keep.push(idx);
            if keep.len() == max_keep {
                break;
            }
        }
    }
    keep
}

pub const RELATION_DIM: usize = 12;

/// Spatial relation of `b_i` relative to `b_j`: sizes and areas of both
/// boxes, the offset of `i` normalized by the size of `j` (linear and
/// squared), and log size ratios.
pub fn spatial_relation(bi: &BBox, bj: &BBox) -> [f64; RELATION_DIM] {
    assert!(
        bj.w > 0.0 && bj.h > 0.0,
        "spatial_relation: reference box must have positive size, got w={} h={}",
        bj.w,
        bj.h
    );
    assert!(
        bi.w > 0.0 && bi.h > 0.0,
        "spatial_relation: box must have positive size, got w={} h={}",
        bi.w,
        bi.h
    );
    let dx = (bi.cx - bj.cx) / bj.w;
    let dy = (bi.cy - bj.cy) / bj.h;
    [
        bi.w,
        bi.h,
        bi.area(),
        bj.w,
        bj.h,
        bj.area(),
        dx,
        dy,
        dx * dx,
        dy * dy,
        (bi.w / bj.w).ln(),
        (bi.h / bj.h).ln(),
    ]
}

pub fn apply_deltas(b: &BBox, d: &[f64]) -> BBox {
    assert_eq!(d.len(), 4, "apply_deltas: expected 4 deltas, got {}", d.len());
    BBox {
        cx: b.cx + d[0] * b.w,
        cy: b.cy + d[1] * b.h,
        w: b.w * d[2].exp(),
        h: b.h * d[3].exp(),
    }
}

/// Inverse of [`apply_deltas`] in its second argument.
pub fn encode_deltas(b: &BBox, g: &BBox) -> Vector {
    Vector(vec![
        (g.cx - b.cx) / b.w,
        (g.cy - b.cy) / b.h,
        (g.w / b.w).ln(),
        (g.h / b.h).ln(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::numerics::rng_from;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(3.0, 3.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 3.0, 2.0, 2.0)), 0.0);
        let shifted = BBox::new(4.0, 3.0, 2.0, 2.0);
        assert!(close(iou(&a, &shifted), 1.0 / 3.0, 1e-15));
        // touching edges do not overlap
        assert_eq!(iou(&a, &BBox::new(5.0, 3.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let b = BBox::new(2.0, 2.0, 2.0, 2.0);
        assert_eq!(nms(&[b], &[0.1], 0.5, 4), vec![0]);
        assert_eq!(nms(&[b, b], &[0.8, 0.9], 0.5, 4), vec![1]);
        assert!(nms(&[], &[], 0.5, 4).is_empty());
        // ties go to the lower index
        let far = BBox::new(9.0, 9.0, 2.0, 2.0);
        assert_eq!(nms(&[far, b], &[0.5, 0.5], 0.5, 4), vec![0, 1]);
        assert_eq!(nms(&[b, far, b], &[0.5, 0.5, 0.5], 0.5, 1), vec![0]);
    }

    /// Reference greedy NMS written with an explicit suppressed mask and an
    /// O(n^2) selection scan instead of a sort.
    fn nms_reference(boxes: &[BBox], scores: &[f64], thresh: f64, max_keep: usize) -> Vec<usize> {
        let mut alive = vec![true; boxes.len()];
        let mut keep = Vec::new();
        while keep.len() < max_keep {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            keep.push(b);
            alive[b] = false;
            for i in 0..boxes.len() {
                if alive[i] && iou(&boxes[b], &boxes[i]) > thresh {
                    alive[i] = false;
                }
            }
        }
        keep
    }

    fn random_box(rng: &mut impl Rng) -> BBox {
        BBox::new(
            rng.random_range(0.0..8.0),
            rng.random_range(0.0..8.0),
            rng.random_range(0.5..4.0),
            rng.random_range(0.5..4.0),
        )
    }

    #[test]
    fn nms_matches_reference_on_random_sets() {
        let mut rng = rng_from(2024);
        for _ in 0..200 {
            let boxes: Vec<BBox> = (0..6).map(|_| random_box(&mut rng)).collect();
            let scores: Vec<f64> = (0..6).map(|_| (rng.random_range(0..5) as f64) / 4.0).collect();
            let thresh = rng.random_range(0.1..0.9);
            let k = rng.random_range(1..7);
            assert_eq!(nms(&boxes, &scores, thresh, k), nms_reference(&boxes, &scores, thresh, k));
        }
    }

    #[test]
    fn spatial_relation_examples() {
        let b = BBox::new(3.0, 4.0, 2.0, 3.0);
        assert_eq!(
            spatial_relation(&b, &b),
            [2.0, 3.0, 6.0, 2.0, 3.0, 6.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
        let right = BBox::new(5.0, 4.0, 2.0, 3.0);
        let r = spatial_relation(&right, &b);
        assert_eq!((r[6], r[8]), (1.0, 1.0));
        assert_eq!((r[7], r[9], r[10], r[11]), (0.0, 0.0, 0.0, 0.0));
        let wide = BBox::new(3.0, 4.0, 4.0, 3.0);
        assert!(close(spatial_relation(&wide, &b)[10], 2f64.ln(), 1e-15));
    }

    #[test]
    #[should_panic(expected = "reference box must have positive size")]
    fn spatial_relation_rejects_degenerate_reference() {
        let b = BBox::new(3.0, 4.0, 2.0, 3.0);
        spatial_relation(&b, &BBox::new(1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn delta_examples() {
        let b = BBox::new(3.0, 4.0, 2.0, 3.0);
        assert_eq!(apply_deltas(&b, &[0.0; 4]), b);
        assert_eq!(apply_deltas(&b, &[1.0, 0.0, 0.0, 0.0]).cx, 5.0);
        assert_eq!(encode_deltas(&b, &b).0, vec![0.0; 4]);
        let g = BBox::new(3.0, 4.0, 2.0 * std::f64::consts::E, 3.0);
        assert!(close(encode_deltas(&b, &g)[2], 1.0, 1e-15));
    }

    #[test]
    fn clip_stays_inside() {
        let b = BBox::new(-1.0, 15.5, 4.0, 3.0).clip(16.0, 16.0);
        assert!(b.within(16.0, 16.0) && b.is_valid());
        let outside = BBox::new(-10.0, -10.0, 2.0, 2.0).clip(16.0, 16.0);
        assert!(outside.within(16.0, 16.0) && outside.is_valid());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-5.0f64..20.0, -5.0f64..20.0, 0.1f64..8.0, 0.1f64..8.0)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_postconditions(
            boxes in prop::collection::vec(arb_box(), 0..12),
            seed in any::<u64>(),
            thresh in 0.05f64..0.95,
            max_keep in 1usize..8,
        ) {
            let mut rng = rng_from(seed);
            let scores: Vec<f64> = boxes.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let kept = nms(&boxes, &scores, thresh, max_keep);
            prop_assert!(kept.len() <= max_keep);
            for w in kept.windows(2) {
                prop_assert!(scores[w[0]] >= scores[w[1]]);
            }
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    prop_assert!(iou(&boxes[i], &boxes[j]) <= thresh);
                }
            }
        }

        #[test]
        fn deltas_round_trip(b in arb_box(), g in arb_box()) {
            let back = apply_deltas(&b, &encode_deltas(&b, &g));
            prop_assert!((back.cx - g.cx).abs() < 1e-12);
            prop_assert!((back.cy - g.cy).abs() < 1e-12);
            prop_assert!((back.w - g.w).abs() < 1e-12);
            prop_assert!((back.h - g.h).abs() < 1e-12);
        }

        #[test]
        fn relation_sizes_ignore_position(a in arb_box(), b in arb_box(), sx in -5.0f64..5.0, sy in -5.0f64..5.0) {
            let moved = BBox::new(a.cx + sx, a.cy + sy, a.w, a.h);
            let r1 = spatial_relation(&a, &b);
            let r2 = spatial_relation(&moved, &b);
            prop_assert_eq!(&r1[..6], &r2[..6]);
        }
    }
}
