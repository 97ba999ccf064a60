//! Axis-aligned boxes and the pairwise box measures used as rewards and metrics.
//!
//! Coordinates are continuous pixels with the top-left corner at `(x1, y1)` and the
//! bottom-right corner at `(x2, y2)`. Area is `(x2 - x1) * (y2 - y1)`; there is no
//! inclusive-pixel `+1` anywhere in this module.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate box {0}: requires finite corners with x2 > x1 and y2 > y1")]
    Degenerate(BBox),
    #[error("invalid image dimensions {width}x{height}: both must be positive and finite")]
    InvalidImage { width: f64, height: f64 },
}

/// Axis-aligned rectangle in pixel units. Serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True iff all corners are finite and the box has positive width and height.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(GeometryError::Degenerate(*self))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Whether the box lies within `[0, w] x [0, h]`.
    pub fn is_within(&self, image_w: f64, image_h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= image_w && self.y2 <= image_h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clamp every corner into `[0, w] x [0, h]`. The result may be degenerate.
    pub fn clamp_to(&self, image_w: f64, image_h: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, image_w),
            self.y1.clamp(0.0, image_h),
            self.x2.clamp(0.0, image_w),
            self.y2.clamp(0.0, image_h),
        )
    }

    /// Smallest box covering both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

fn check_pair(a: &BBox, b: &BBox) -> Result<(), GeometryError> {
    a.validate()?;
    b.validate()
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    check_pair(a, b)?;
    Ok(iou_unchecked(a, b))
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`, in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    check_pair(a, b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let hull = a.enclosing(b).area();
    Ok(inter / union - (hull - union) / hull)
}

/// Distance IoU: `iou - d^2 / c^2` with `d` the center distance and `c` the
/// diagonal of the enclosing box.
pub fn diou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    check_pair(a, b)?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let d2 = (ax - bx).powi(2) + (ay - by).powi(2);
    let hull = a.enclosing(b);
    let c2 = hull.width().powi(2) + hull.height().powi(2);
    Ok(iou_unchecked(a, b) - d2 / c2)
}

/// `1 - center_distance / image_diagonal`, floored at zero.
pub fn center_distance_reward(
    a: &BBox,
    b: &BBox,
    image_w: f64,
    image_h: f64,
) -> Result<f64, GeometryError> {
    if !(image_w.is_finite() && image_h.is_finite() && image_w > 0.0 && image_h > 0.0) {
        return Err(GeometryError::InvalidImage {
            width: image_w,
            height: image_h,
        });
    }
    check_pair(a, b)?;
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
    let diag = (image_w * image_w + image_h * image_h).sqrt();
    Ok((1.0 - d / diag).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: BBox = BBox::new(0.0, 0.0, 10.0, 10.0);
    const B: BBox = BBox::new(5.0, 5.0, 15.0, 15.0);

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&A, &A).unwrap(), 1.0);
        assert_eq!(iou(&A, &BBox::new(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        assert!((iou(&A, &B).unwrap() - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn giou_diou_examples() {
        assert_eq!(giou(&A, &A).unwrap(), 1.0);
        assert!((giou(&A, &B).unwrap() - (1.0 / 7.0 - 50.0 / 225.0)).abs() < 1e-12);
        assert_eq!(diou(&A, &A).unwrap(), 1.0);
        assert!((diou(&A, &B).unwrap() - (1.0 / 7.0 - 50.0 / 450.0)).abs() < 1e-12);
        let inner = BBox::new(2.0, 2.0, 8.0, 8.0);
        assert_eq!(diou(&A, &inner).unwrap(), iou(&A, &inner).unwrap());
    }

    #[test]
    fn giou_grows_as_gap_shrinks() {
        let mut prev = f64::NEG_INFINITY;
        for gap in (0..=50).rev() {
            let b = A.translate(10.0 + gap as f64, 0.0);
            let g = giou(&A, &b).unwrap();
            assert!(g > prev, "gap {gap}: {g} <= {prev}");
            prev = g;
        }
    }

    #[test]
    fn center_distance_examples() {
        assert_eq!(center_distance_reward(&A, &A, 100.0, 100.0).unwrap(), 1.0);
        let far = BBox::from_center(100.0, 100.0, 2.0, 2.0);
        let origin = BBox::from_center(0.0, 0.0, 2.0, 2.0);
        assert_eq!(center_distance_reward(&origin, &far, 100.0, 100.0).unwrap(), 0.0);
        let p = BBox::from_center(5.0, 5.0, 2.0, 2.0);
        let q = BBox::from_center(10.0, 10.0, 2.0, 2.0);
        let expect = 1.0 - 50f64.sqrt() / 20000f64.sqrt();
        assert!((center_distance_reward(&p, &q, 100.0, 100.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.95).abs() < 1e-12);
        assert!(matches!(
            center_distance_reward(&p, &q, 0.0, 100.0),
            Err(GeometryError::InvalidImage { .. })
        ));
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let flat = BBox::new(0.0, 0.0, 10.0, 0.0);
        assert!(!flat.is_valid());
        assert!(iou(&flat, &A).is_err());
        assert!(giou(&A, &flat).is_err());
        assert!(diou(&A, &BBox::new(5.0, 0.0, 1.0, 3.0)).is_err());
        assert!(iou(&A, &BBox::new(f64::NAN, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn serde_as_array() {
        let s = serde_json::to_string(&B).unwrap();
        assert_eq!(s, "[5.0,5.0,15.0,15.0]");
        let back: BBox = serde_json::from_str("[5,5,15,15]").unwrap();
        assert_eq!(back, B);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            let disjoint = a.x2 <= b.x1 || b.x2 <= a.x1 || a.y2 <= b.y1 || b.y2 <= a.y1;
            prop_assert_eq!(ab == 0.0, disjoint);
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn giou_diou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b).unwrap();
            let g = giou(&a, &b).unwrap();
            let d = diou(&a, &b).unwrap();
            prop_assert!(g <= i + 1e-12);
            prop_assert!(d <= i + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g) && (-1.0..=1.0).contains(&d));
            if a.contains_box(&b) || b.contains_box(&a) {
                prop_assert!((g - i).abs() < 1e-12);
            }
            let same_center = a.center() == b.center();
            prop_assert_eq!((d - i).abs() < 1e-15, same_center);
        }
    }
}
