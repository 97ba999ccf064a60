//! Gaussian positional reward and the composite grounding reward.
//!
//! The kernel is centered on the ground-truth box with deviations
//! `sigma_x = alpha * W / 2` and `sigma_y = alpha * H / 2`. Its supremum over the
//! plane is exactly 1 at the center, so max-normalization leaves it unchanged.
//! The positional reward is the mean kernel value over the integer lattice points
//! `{ceil(x1), .., ceil(x2) - 1} x {ceil(y1), .., ceil(y2) - 1}` of the prediction.

use crate::geometry::{self, BBox, GeometryError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("kernel width multiplier must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("ground-truth center ({cx}, {cy}) lies outside the {w}x{h} image")]
    CenterOutsideImage { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("beta must be non-negative and finite, got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub gt: BBox,
    pub alpha: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub image_w: f64,
    pub image_h: f64,
}

impl KernelParams {
    pub fn from_gt(gt: &BBox, alpha: f64, image_w: f64, image_h: f64) -> Result<Self, RewardError> {
        gt.validate()?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(RewardError::InvalidAlpha(alpha));
        }
        if !(image_w.is_finite() && image_h.is_finite() && image_w > 0.0 && image_h > 0.0) {
            return Err(GeometryError::InvalidImage {
                width: image_w,
                height: image_h,
            }
            .into());
        }
        let (cx, cy) = gt.center();
        if !(0.0..=image_w).contains(&cx) || !(0.0..=image_h).contains(&cy) {
            return Err(RewardError::CenterOutsideImage {
                cx,
                cy,
                w: image_w,
                h: image_h,
            });
        }
        Ok(KernelParams {
            gt: *gt,
            alpha,
            center_x: cx,
            center_y: cy,
            sigma_x: alpha * gt.width() / 2.0,
            sigma_y: alpha * gt.height() / 2.0,
            image_w,
            image_h,
        })
    }

    fn gx(&self, x: f64) -> f64 {
        let d = x - self.center_x;
        (-(d * d) / (2.0 * self.sigma_x * self.sigma_x)).exp()
    }

    fn gy(&self, y: f64) -> f64 {
        let d = y - self.center_y;
        (-(d * d) / (2.0 * self.sigma_y * self.sigma_y)).exp()
    }
}

/// Kernel value at `(x, y)`; exactly 1 at the ground-truth center.
pub fn kernel_value(p: &KernelParams, x: f64, y: f64) -> f64 {
    let dx = x - p.center_x;
    let dy = y - p.center_y;
    (-(dx * dx) / (2.0 * p.sigma_x * p.sigma_x) - (dy * dy) / (2.0 * p.sigma_y * p.sigma_y)).exp()
}

/// Positional reward with a degeneracy flag. `value` is 0 whenever `degenerate` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionalScore {
    pub value: f64,
    pub degenerate: bool,
}

impl PositionalScore {
    const DEGENERATE: PositionalScore = PositionalScore {
        value: 0.0,
        degenerate: true,
    };
}

/// Half-open integer lattice covered by a box along one axis: `ceil(lo) .. ceil(hi)`.
fn lattice(lo: f64, hi: f64) -> std::ops::Range<i64> {
    lo.ceil() as i64..hi.ceil() as i64
}

fn pixel_ranges(pred: &BBox) -> Option<(std::ops::Range<i64>, std::ops::Range<i64>)> {
    if !pred.is_valid() {
        return None;
    }
    let xs = lattice(pred.x1, pred.x2);
    let ys = lattice(pred.y1, pred.y2);
    if xs.is_empty() || ys.is_empty() {
        return None;
    }
    Some((xs, ys))
}

/// Mean kernel activation over every lattice point of `pred`, summed point by point.
pub fn positional_reward(pred: &BBox, p: &KernelParams) -> PositionalScore {
    let Some((xs, ys)) = pixel_ranges(pred) else {
        return PositionalScore::DEGENERATE;
    };
    let count = (xs.end - xs.start) * (ys.end - ys.start);
    let mut sum = 0.0;
    for y in ys {
        for x in xs.clone() {
            sum += kernel_value(p, x as f64, y as f64);
        }
    }
    PositionalScore {
        value: sum / count as f64,
        degenerate: false,
    }
}

/// Same value as [`positional_reward`], computed as the product of the two marginal
/// means. Cost is linear in width plus height.
pub fn positional_reward_separable(pred: &BBox, p: &KernelParams) -> PositionalScore {
    let Some((xs, ys)) = pixel_ranges(pred) else {
        return PositionalScore::DEGENERATE;
    };
    let nx = (xs.end - xs.start) as f64;
    let ny = (ys.end - ys.start) as f64;
    let mx: f64 = xs.map(|x| p.gx(x as f64)).sum::<f64>() / nx;
    let my: f64 = ys.map(|y| p.gy(y as f64)).sum::<f64>() / ny;
    PositionalScore {
        value: mx * my,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub beta: f64,
    pub format_weight: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            beta: 0.1,
            format_weight: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(RewardError::InvalidBeta(self.beta));
        }
        Ok(())
    }
}

/// Which proximity term fills the shaping channel of the composite reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shaping {
    None,
    Positional,
    Giou,
    Diou,
    CenterDistance,
}

/// Per-channel reward. `pos` carries whichever shaping term is active.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub iou: f64,
    pub pos: f64,
    pub total: f64,
}

/// `format_weight * [format_ok] + iou + beta * R_pos`. A missing or invalid
/// prediction scores 0 on the iou and pos channels.
pub fn composite_reward(
    pred: Option<&BBox>,
    format_ok: bool,
    w: &RewardWeights,
    p: &KernelParams,
) -> RewardBreakdown {
    shaped_reward(pred, format_ok, w, p, Shaping::Positional)
}

/// Composite reward with a selectable shaping channel.
pub fn shaped_reward(
    pred: Option<&BBox>,
    format_ok: bool,
    w: &RewardWeights,
    p: &KernelParams,
    shaping: Shaping,
) -> RewardBreakdown {
    let gt = &p.gt;
    let format = if format_ok { w.format_weight } else { 0.0 };
    let (iou, pos) = match pred.filter(|b| b.is_valid()) {
        None => (0.0, 0.0),
        Some(b) => {
            let iou = geometry::iou(b, gt).unwrap_or(0.0);
            let pos = match shaping {
                Shaping::None => 0.0,
                Shaping::Positional => positional_reward_separable(b, p).value,
                Shaping::Giou => geometry::giou(b, gt).unwrap_or(0.0),
                Shaping::Diou => geometry::diou(b, gt).unwrap_or(0.0),
                Shaping::CenterDistance => {
                    geometry::center_distance_reward(b, gt, p.image_w, p.image_h).unwrap_or(0.0)
                }
            };
            (iou, pos)
        }
    };
    let total = format + iou + w.beta * pos;
    RewardBreakdown {
        format,
        iou,
        pos,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(gt: BBox) -> KernelParams {
        KernelParams::from_gt(&gt, 2.5, 100.0, 100.0).unwrap()
    }

    /// Independent brute force: enumerate every integer point of a wide window
    /// and keep the ones inside the half-open box.
    fn oracle(pred: &BBox, gt: &BBox, alpha: f64) -> f64 {
        let (cx, cy) = ((gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0);
        let sx = alpha * (gt.x2 - gt.x1) / 2.0;
        let sy = alpha * (gt.y2 - gt.y1) / 2.0;
        let (mut sum, mut n) = (0.0, 0u64);
        for y in -300i64..600 {
            for x in -300i64..600 {
                let (xf, yf) = (x as f64, y as f64);
                if xf >= pred.x1 && xf < pred.x2 && yf >= pred.y1 && yf < pred.y2 {
                    let e = (xf - cx).powi(2) / (2.0 * sx * sx) + (yf - cy).powi(2) / (2.0 * sy * sy);
                    sum += (-e).exp();
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    #[test]
    fn kernel_examples() {
        let p = kp(BBox::new(40.0, 40.0, 60.0, 60.0));
        assert_eq!(kernel_value(&p, 50.0, 50.0), 1.0);
        let v = kernel_value(&p, 50.0 + p.sigma_x, 50.0);
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.606531).abs() < 1e-6);
        assert_eq!(kernel_value(&p, 43.0, 58.0), kernel_value(&p, 57.0, 42.0));
    }

    #[test]
    fn single_pixel_at_center_scores_one() {
        let gt = BBox::new(0.0, 0.0, 100.0, 100.0);
        let pred = BBox::new(50.0, 50.0, 51.0, 51.0);
        let p = kp(gt);
        assert_eq!(positional_reward(&pred, &p).value, 1.0);
        assert_eq!(positional_reward_separable(&pred, &p).value, 1.0);
    }

    #[test]
    fn far_corner_matches_oracle() {
        let gt = BBox::new(40.0, 40.0, 60.0, 60.0);
        let pred = BBox::new(0.0, 0.0, 10.0, 10.0);
        let expect = oracle(&pred, &gt, 2.5);
        // sigma = 25, lattice 0..=9 on both axes
        let marginal: f64 = (0..10).map(|x| (-((x as f64 - 50.0).powi(2)) / 1250.0).exp()).sum::<f64>() / 10.0;
        assert!((expect - marginal * marginal).abs() < 1e-15);
        let got = positional_reward(&pred, &kp(gt)).value;
        assert!((got - expect).abs() < 1e-14, "{got} vs {expect}");
        assert!(got > 0.0 && got < 0.2);
    }

    #[test]
    fn iou_blind_pairs_are_ordered() {
        let gt = BBox::new(40.0, 40.0, 60.0, 60.0);
        let near = BBox::new(70.0, 40.0, 90.0, 60.0);
        let far = BBox::new(80.0, 40.0, 100.0, 60.0);
        assert_eq!(geometry::iou(&near, &gt).unwrap(), 0.0);
        assert_eq!(geometry::iou(&far, &gt).unwrap(), 0.0);
        let p = kp(gt);
        let (rn, rf) = (positional_reward(&near, &p).value, positional_reward(&far, &p).value);
        assert!(rn > rf);
        assert!((rn - oracle(&near, &gt, 2.5)).abs() < 1e-14);
        assert!((rf - oracle(&far, &gt, 2.5)).abs() < 1e-14);
    }

    #[test]
    fn degenerate_predictions_score_zero() {
        let p = kp(BBox::new(40.0, 40.0, 60.0, 60.0));
        for b in [
            BBox::new(10.0, 10.0, 10.0, 20.0),
            BBox::new(10.2, 10.0, 10.8, 20.0),
            BBox::new(30.0, 10.0, 20.0, 20.0),
        ] {
            let s = positional_reward(&b, &p);
            assert_eq!(s, PositionalScore { value: 0.0, degenerate: true });
            assert_eq!(positional_reward_separable(&b, &p), s);
        }
    }

    #[test]
    fn kernel_params_validation() {
        let gt = BBox::new(40.0, 40.0, 60.0, 60.0);
        assert!(matches!(KernelParams::from_gt(&gt, 0.0, 100.0, 100.0), Err(RewardError::InvalidAlpha(_))));
        assert!(KernelParams::from_gt(&BBox::new(1.0, 1.0, 1.0, 2.0), 2.5, 100.0, 100.0).is_err());
        assert!(matches!(
            KernelParams::from_gt(&BBox::new(110.0, 10.0, 130.0, 20.0), 2.5, 100.0, 100.0),
            Err(RewardError::CenterOutsideImage { .. })
        ));
    }

    #[test]
    fn composite_examples() {
        let gt = BBox::new(40.0, 40.0, 60.0, 60.0);
        let p = kp(gt);
        let w = RewardWeights::default();
        let r = composite_reward(Some(&gt), true, &w, &p);
        let pos = oracle(&gt, &gt, 2.5);
        assert_eq!(r.format, 1.0);
        assert_eq!(r.iou, 1.0);
        assert!((r.pos - pos).abs() < 1e-14);
        assert!((r.total - (2.0 + 0.1 * pos)).abs() < 1e-14);

        let far = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = composite_reward(Some(&far), false, &w, &p);
        assert_eq!(r.format + r.iou, 0.0);
        assert!(r.total > 0.0 && (r.total - 0.1 * oracle(&far, &gt, 2.5)).abs() < 1e-14);

        assert_eq!(composite_reward(None, false, &w, &p).total, 0.0);
    }

    #[test]
    fn shaping_channels() {
        let gt = BBox::new(40.0, 40.0, 60.0, 60.0);
        let p = kp(gt);
        let w = RewardWeights::default();
        let pred = BBox::new(45.0, 45.0, 65.0, 65.0);
        let none = shaped_reward(Some(&pred), true, &w, &p, Shaping::None);
        assert_eq!(none.total, 1.0 + none.iou);
        let g = shaped_reward(Some(&pred), true, &w, &p, Shaping::Giou);
        assert_eq!(g.pos, geometry::giou(&pred, &gt).unwrap());
        let d = shaped_reward(Some(&pred), true, &w, &p, Shaping::Diou);
        assert!((d.pos - geometry::diou(&pred, &gt).unwrap()).abs() < 1e-15);
        let c = shaped_reward(Some(&pred), true, &w, &p, Shaping::CenterDistance);
        assert!(c.pos > 0.9 && c.pos < 1.0);
    }

    fn arb_case() -> impl Strategy<Value = (BBox, BBox)> {
        (
            (10.0..90.0f64, 10.0..90.0f64, 2.0..30.0f64, 2.0..30.0f64),
            (0.0..90.0f64, 0.0..90.0f64, 1.0..40.0f64, 1.0..40.0f64),
        )
            .prop_map(|((cx, cy, w, h), (x, y, pw, ph))| {
                (BBox::from_center(cx, cy, w, h), BBox::new(x, y, x + pw, y + ph))
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn separable_matches_brute_force((gt, pred) in arb_case()) {
            let p = kp(gt);
            let a = positional_reward(&pred, &p);
            let b = positional_reward_separable(&pred, &p);
            prop_assert_eq!(a.degenerate, b.degenerate);
            prop_assert!((a.value - b.value).abs() <= 1e-12);
            if !a.degenerate {
                prop_assert!(a.value > 0.0 && a.value <= 1.0);
            }
        }

        #[test]
        fn composite_total_is_monotone_in_channels((gt, pred) in arb_case(), beta in 0.0..1.0f64) {
            let p = kp(gt);
            let w = RewardWeights { beta, format_weight: 1.0 };
            let with_fmt = composite_reward(Some(&pred), true, &w, &p);
            let without = composite_reward(Some(&pred), false, &w, &p);
            prop_assert!(with_fmt.total >= without.total);
            prop_assert!(with_fmt.total >= with_fmt.iou);
        }
    }
}
