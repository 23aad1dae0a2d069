//! Inference-time fusion of detection-path and text-path candidates.
//!
//! Candidates from the two paths are paired greedily by IoU; each pair is
//! scored `R = (1 - beta) * c_mue + beta * c_pud`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Mue,
    Pud,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub bbox: BBox,
    pub confidence: f64,
    pub source: Source,
}

impl ScoredCandidate {
    pub fn new(bbox: BBox, confidence: f64, source: Source) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::arg(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(ScoredCandidate {
            bbox,
            confidence,
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedCandidate {
    /// Box of the more confident member (the detection path on ties).
    pub bbox: BBox,
    pub score: f64,
    pub mue_index: usize,
    pub pud_index: usize,
    pub iou: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::arg(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Greedy one-to-one pairing by descending IoU over pairs whose IoU exceeds
/// `iou_threshold`, ranked by fused score.
///
/// Ordering is by score, then IoU, then lower detection-path index.
pub fn fuse_candidates(
    mue: &[ScoredCandidate],
    pud: &[ScoredCandidate],
    iou_threshold: f64,
    beta: f64,
) -> Result<Vec<FusedCandidate>> {
    check_beta(beta)?;
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::arg(format!(
            "IoU threshold must lie in (0, 1), got {iou_threshold}"
        )));
    }
    let mut pairs = Vec::new();
    for (i, a) in mue.iter().enumerate() {
        for (j, b) in pud.iter().enumerate() {
            let o = iou(&a.bbox, &b.bbox)?;
            if o > iou_threshold {
                pairs.push((o, i, j));
            }
        }
    }
    pairs.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap_or(Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut used_mue = vec![false; mue.len()];
    let mut used_pud = vec![false; pud.len()];
    let mut fused = Vec::new();
    for (o, i, j) in pairs {
        if used_mue[i] || used_pud[j] {
            continue;
        }
        used_mue[i] = true;
        used_pud[j] = true;
        let (ci, cj) = (mue[i].confidence, pud[j].confidence);
        fused.push(FusedCandidate {
            bbox: if cj > ci { pud[j].bbox } else { mue[i].bbox },
            score: (1.0 - beta) * ci + beta * cj,
            mue_index: i,
            pud_index: j,
            iou: o,
        });
    }
    fused.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then(b.iou.partial_cmp(&a.iou).unwrap_or(Ordering::Equal))
            .then(a.mue_index.cmp(&b.mue_index))
    });
    Ok(fused)
}

/// Final per-image decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalDetection {
    Fused(FusedCandidate),
    /// No IoU-matched pair: the best single candidate under its path weight.
    Single {
        bbox: BBox,
        score: f64,
        source: Source,
        index: usize,
    },
    NoDetection,
}

impl FinalDetection {
    pub fn bbox(&self) -> Option<BBox> {
        match self {
            FinalDetection::Fused(f) => Some(f.bbox),
            FinalDetection::Single { bbox, .. } => Some(*bbox),
            FinalDetection::NoDetection => None,
        }
    }

    pub fn score(&self) -> Option<f64> {
        match self {
            FinalDetection::Fused(f) => Some(f.score),
            FinalDetection::Single { score, .. } => Some(*score),
            FinalDetection::NoDetection => None,
        }
    }
}

/// Top fused candidate, or the best path-weighted single candidate when no
/// pair matched. Ties between paths favor the detection path.
pub fn select_final(
    fused: &[FusedCandidate],
    fallback_mue: &[ScoredCandidate],
    fallback_pud: &[ScoredCandidate],
    beta: f64,
) -> Result<FinalDetection> {
    check_beta(beta)?;
    if let Some(top) = fused.first() {
        return Ok(FinalDetection::Fused(*top));
    }
    let weighted = fallback_mue
        .iter()
        .enumerate()
        .map(|(i, c)| (c, i, (1.0 - beta) * c.confidence))
        .chain(
            fallback_pud
                .iter()
                .enumerate()
                .map(|(i, c)| (c, i, beta * c.confidence)),
        );
    let mut best: Option<(&ScoredCandidate, usize, f64)> = None;
    for cand in weighted {
        if best.is_none_or(|b| cand.2 > b.2) {
            best = Some(cand);
        }
    }
    Ok(match best {
        Some((c, index, score)) => FinalDetection::Single {
            bbox: c.bbox,
            score,
            source: c.source,
            index,
        },
        None => FinalDetection::NoDetection,
    })
}
