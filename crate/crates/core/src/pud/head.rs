use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::{box_loss, BBox};
use crate::linalg::{dot, sigmoid, Embedding};

/// Outputs per row: `cx, cy, w, h` logits and one confidence logit.
pub const HEAD_OUTPUTS: usize = 5;
/// Logits are clamped to `±LOGIT_CAP` before the sigmoid so boxes keep a
/// strictly positive extent.
pub const LOGIT_CAP: f64 = 30.0;

/// Affine map `D -> 5` standing in for the box decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHeadParams {
    pub weights: Vec<Vec<f64>>,
    pub bias: [f64; HEAD_OUTPUTS],
}

impl BoxHeadParams {
    pub fn zeros(dim: usize) -> Self {
        BoxHeadParams {
            weights: vec![vec![0.0; dim]; HEAD_OUTPUTS],
            bias: [0.0; HEAD_OUTPUTS],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != HEAD_OUTPUTS {
            return Err(Error::shape("box head needs exactly 5 weight rows"));
        }
        let dim = self.dim();
        if self.weights.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("box head weight rows differ in length"));
        }
        if self
            .weights
            .iter()
            .flatten()
            .chain(self.bias.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("box head parameters"));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> [f64; HEAD_OUTPUTS] {
        let mut z = self.bias;
        for (zi, w) in z.iter_mut().zip(&self.weights) {
            *zi += dot(w, x);
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadOutput {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Maps raw head logits to a valid corner box and a confidence.
///
/// Centers and sizes pass through a capped sigmoid; corners are clipped to
/// the unit square.
pub fn decode_box(logits: &[f64; HEAD_OUTPUTS]) -> Result<HeadOutput> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box head logits"));
    }
    let s: Vec<f64> = logits
        .iter()
        .map(|z| sigmoid(z.clamp(-LOGIT_CAP, LOGIT_CAP)))
        .collect();
    let (cx, cy, w, h) = (s[0], s[1], s[2], s[3]);
    let bbox = BBox::new(
        (cx - w / 2.0).clamp(0.0, 1.0),
        (cy - h / 2.0).clamp(0.0, 1.0),
        (cx + w / 2.0).clamp(0.0, 1.0),
        (cy + h / 2.0).clamp(0.0, 1.0),
    )?;
    Ok(HeadOutput {
        bbox,
        confidence: s[4],
    })
}

/// Applies the affine box head to each multimodal feature row.
pub fn box_head(features: &[Embedding], params: &BoxHeadParams) -> Result<Vec<HeadOutput>> {
    params.validate()?;
    features
        .iter()
        .map(|f| {
            if f.dim() != params.dim() {
                return Err(Error::shape(format!(
                    "feature has dimension {} but box head expects {}",
                    f.dim(),
                    params.dim()
                )));
            }
            decode_box(&params.logits(f))
        })
        .collect()
}

/// `ptc + Σ box_loss` over the minimum-cost one-to-one pairing of predicted
/// and ground-truth boxes.
pub fn pud_loss(ptc: f64, pred_boxes: &[BBox], gt_boxes: &[BBox]) -> Result<f64> {
    let mut data = Vec::with_capacity(pred_boxes.len() * gt_boxes.len());
    for p in pred_boxes {
        for g in gt_boxes {
            data.push(box_loss(p, g)?);
        }
    }
    let matching = solve_assignment(&CostMatrix::new(pred_boxes.len(), gt_boxes.len(), data)?);
    let mut reg = 0.0;
    for &(r, c) in &matching.pairs {
        reg += box_loss(&pred_boxes[r], &gt_boxes[c])?;
    }
    Ok(ptc + reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pud::ptc_loss;

    #[test]
    fn zero_head_predicts_the_central_box() {
        let out = box_head(
            &[Embedding::new(vec![0.3, -2.0, 5.0])],
            &BoxHeadParams::zeros(3),
        )
        .unwrap();
        assert_eq!(out[0].bbox, BBox::new(0.25, 0.25, 0.75, 0.75).unwrap());
        assert_eq!(out[0].confidence, 0.5);
    }

    #[test]
    fn saturated_center_logit_pushes_to_edge() {
        let mut params = BoxHeadParams::zeros(2);
        params.bias[0] = 1e6;
        let out = box_head(&[Embedding::zeros(2)], &params).unwrap();
        let [cx, _, _, _] = out[0].bbox.to_center();
        assert!(out[0].bbox.x2 == 1.0);
        assert!(cx > 0.74);
        assert!(sigmoid(LOGIT_CAP) > 1.0 - 1e-12);
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut params = BoxHeadParams::zeros(2);
        params.weights[1][0] = f64::NAN;
        assert!(box_head(&[Embedding::zeros(2)], &params).is_err());
    }

    #[test]
    fn pud_loss_is_additive() {
        let g = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let p = BBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        assert_eq!(pud_loss(0.0, &[g], &[g]).unwrap(), 0.0);
        assert_eq!(pud_loss(0.37, &[g], &[g]).unwrap(), 0.37);
        let a = Embedding::basis(2, 0);
        let b = Embedding::basis(2, 1);
        let ptc = ptc_loss(&[a.clone(), b.clone()], &[a, b], 0.07).unwrap();
        let expected = ptc + box_loss(&p, &g).unwrap();
        assert_eq!(pud_loss(ptc, &[p], &[g]).unwrap(), expected);
    }

    #[test]
    fn pud_loss_matches_boxes_before_summing() {
        let g1 = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
        let g2 = BBox::new(0.6, 0.5, 0.8, 0.9).unwrap();
        assert_eq!(pud_loss(0.0, &[g2, g1], &[g1, g2]).unwrap(), 0.0);
    }
}
