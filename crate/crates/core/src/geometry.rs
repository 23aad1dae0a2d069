//! Axis-aligned normalized boxes and the overlap losses used for matching
//! and regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle in normalized scene coordinates, corner format.
///
/// Construction through [`BBox::new`] guarantees `0 <= x1 < x2 <= 1` and
/// `0 <= y1 < y2 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from center, width and height.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// `(cx, cy, w, h)`
    pub fn to_center(&self) -> [f64; 4] {
        [
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        let fail = |reason| {
            Err(Error::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
                reason,
            })
        };
        if coords.iter().any(|c| !c.is_finite()) {
            return fail("non-finite coordinate");
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return fail("coordinate outside [0, 1]");
        }
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return fail("zero or negative area");
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

/// Intersection, union and enclosing-box areas of two boxes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Overlap {
    pub inter: f64,
    pub union: f64,
    pub enclosing: f64,
}

pub(crate) fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    Overlap {
        inter,
        union,
        enclosing: ew * eh,
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let o = overlap(a, b);
    Ok(o.inter / o.union)
}

/// Generalized IoU: `IoU - (enclosing - union) / enclosing`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let o = overlap(a, b);
    // Rounding can put the union a few ulps above the enclosing area.
    Ok(o.inter / o.union - (o.enclosing - o.union).max(0.0) / o.enclosing)
}

/// Sum of absolute corner differences.
pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    a.as_array()
        .iter()
        .zip(b.as_array().iter())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Regression loss `(1 - GIoU) + L1`.
pub fn box_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok((1.0 - giou(pred, gt)?) + l1_distance(pred, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts cells of a `1/res` grid whose centers fall inside both boxes.
    fn raster_iou(a: &BBox, b: &BBox, res: usize) -> f64 {
        let step = 1.0 / res as f64;
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2;
        let (mut inter, mut union) = (0u64, 0u64);
        for i in 0..res {
            let x = (i as f64 + 0.5) * step;
            for j in 0..res {
                let y = (j as f64 + 0.5) * step;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(0.0, 0.0, 0.5, 0.5);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(
            iou(&b(0.0, 0.0, 0.2, 0.2), &b(0.5, 0.5, 0.9, 0.9)).unwrap(),
            0.0
        );
    }

    #[test]
    fn iou_partial_overlap_matches_raster_count() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        let c = b(0.1, 0.1, 0.3, 0.3);
        let oracle = raster_iou(&a, &c, 1000);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-3);
        assert!((iou(&a, &c).unwrap() - 0.142857).abs() < 1e-4);
    }

    #[test]
    fn giou_values() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let c = b(0.1, 0.1, 0.3, 0.3);
        // 1/7 - (0.09 - 0.07) / 0.09
        assert!((giou(&a, &c).unwrap() - (-5.0 / 63.0)).abs() < 1e-12);
        let far = giou(
            &b(0.0, 0.0, 1e-4, 1e-4),
            &b(1.0 - 1e-4, 1.0 - 1e-4, 1.0, 1.0),
        )
        .unwrap();
        assert!(far > -1.0 && far < -0.999_999);
    }

    #[test]
    fn box_loss_values() {
        let a = b(0.0, 0.0, 0.2, 0.2);
        let c = b(0.1, 0.1, 0.3, 0.3);
        assert_eq!(box_loss(&a, &a).unwrap(), 0.0);
        let expected = 1.0 + 5.0 / 63.0 + 0.4;
        assert!((box_loss(&a, &c).unwrap() - expected).abs() < 1e-12);
        assert_eq!(box_loss(&a, &c).unwrap(), box_loss(&c, &a).unwrap());
    }

    #[test]
    fn degenerate_and_out_of_range_boxes_are_rejected() {
        assert!(BBox::new(0.2, 0.1, 0.2, 0.5).is_err());
        assert!(BBox::new(0.3, 0.1, 0.2, 0.5).is_err());
        assert!(BBox::new(-0.1, 0.1, 0.2, 0.5).is_err());
        assert!(BBox::new(0.1, 0.1, f64::NAN, 0.5).is_err());
        let bad = BBox {
            x1: 0.5,
            y1: 0.0,
            x2: 0.1,
            y2: 0.2,
        };
        assert!(iou(&bad, &b(0.0, 0.0, 0.1, 0.1)).is_err());
        assert!(giou(&bad, &b(0.0, 0.0, 0.1, 0.1)).is_err());
        assert!(box_loss(&bad, &b(0.0, 0.0, 0.1, 0.1)).is_err());
    }

    #[test]
    fn center_round_trip() {
        let bx = BBox::from_center(0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(bx, b(0.25, 0.25, 0.75, 0.75));
        assert_eq!(bx.to_center(), [0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn serde_rejects_invalid_boxes() {
        let ok: BBox = serde_json::from_str("[0.1,0.1,0.2,0.3]").unwrap();
        assert_eq!(ok, b(0.1, 0.1, 0.2, 0.3));
        assert!(serde_json::from_str::<BBox>("[0.3,0.1,0.2,0.3]").is_err());
    }
}
