//! Retrieval evaluation: mean average precision and CMC top-k under an IoU
//! correctness criterion, plus the Davies-Bouldin clustering index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::linalg::{euclidean, Embedding};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub gallery_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub gallery_id: u64,
    pub bbox: BBox,
}

/// Ranked detections for one query and the target's ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub ranked: Vec<RankedEntry>,
    pub ground_truth: Vec<GroundTruth>,
}

fn rank_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.gallery_id.cmp(&b.gallery_id))
}

impl QueryResult {
    /// Sorts entries by descending score, ties by ascending gallery id
    /// (stable otherwise).
    pub fn new(
        query_id: u64,
        mut ranked: Vec<RankedEntry>,
        ground_truth: Vec<GroundTruth>,
    ) -> Result<Self> {
        if ranked.iter().any(|e| !e.score.is_finite()) {
            return Err(Error::NonFinite("ranked score"));
        }
        ranked.sort_by(rank_order);
        Ok(QueryResult {
            query_id,
            ranked,
            ground_truth,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranked.iter().any(|e| !e.score.is_finite()) {
            return Err(Error::NonFinite("ranked score"));
        }
        if self
            .ranked
            .windows(2)
            .any(|w| rank_order(&w[0], &w[1]) == Ordering::Greater)
        {
            return Err(Error::arg(format!(
                "query {} ranked list is not sorted",
                self.query_id
            )));
        }
        Ok(())
    }

    fn gt_by_gallery(&self) -> HashMap<u64, Vec<usize>> {
        let mut map: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, g) in self.ground_truth.iter().enumerate() {
            map.entry(g.gallery_id).or_default().push(i);
        }
        map
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::arg(format!(
            "IoU threshold must lie in (0, 1), got {t}"
        )));
    }
    Ok(())
}

/// True iff `pred` overlaps some ground truth with IoU at or above the
/// threshold (inclusive).
pub fn is_correct(pred: &BBox, gts: &[BBox], iou_threshold: f64) -> Result<bool> {
    check_threshold(iou_threshold)?;
    for g in gts {
        if iou(pred, g)? >= iou_threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Precision at every correct hit, averaged over all ground truths.
    #[default]
    Raw,
    /// Interpolated precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// Relevance flags along the ranked list; each ground truth is credited at
/// most once, to the first detection that overlaps it (highest IoU among the
/// uncredited ones).
fn relevance(result: &QueryResult, iou_threshold: f64) -> Result<Vec<bool>> {
    let by_gallery = result.gt_by_gallery();
    let mut credited = vec![false; result.ground_truth.len()];
    let mut rel = Vec::with_capacity(result.ranked.len());
    for entry in &result.ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(idxs) = by_gallery.get(&entry.gallery_id) {
            for &gi in idxs {
                if credited[gi] {
                    continue;
                }
                let o = iou(&entry.bbox, &result.ground_truth[gi].bbox)?;
                if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((gi, o));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                credited[gi] = true;
                rel.push(true);
            }
            None => rel.push(false),
        }
    }
    Ok(rel)
}

pub fn average_precision(result: &QueryResult, iou_threshold: f64) -> Result<f64> {
    average_precision_with(result, iou_threshold, ApMode::Raw)
}

pub fn average_precision_with(
    result: &QueryResult,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<f64> {
    check_threshold(iou_threshold)?;
    if result.ground_truth.is_empty() {
        return Err(Error::arg(format!(
            "query {} has no ground truth",
            result.query_id
        )));
    }
    let rel = relevance(result, iou_threshold)?;
    let n_gt = result.ground_truth.len() as f64;
    match mode {
        ApMode::Raw => {
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (k, r) in rel.iter().enumerate() {
                if *r {
                    hits += 1;
                    ap += hits as f64 / (k + 1) as f64;
                }
            }
            Ok(ap / n_gt)
        }
        ApMode::ElevenPoint => {
            let mut hits = 0usize;
            let mut curve = Vec::with_capacity(rel.len());
            for (k, r) in rel.iter().enumerate() {
                hits += *r as usize;
                curve.push((hits as f64 / n_gt, hits as f64 / (k + 1) as f64));
            }
            let mut total = 0.0;
            for step in 0..=10 {
                let level = step as f64 / 10.0;
                let p = curve
                    .iter()
                    .filter(|(rec, _)| *rec >= level - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            Ok(total / 11.0)
        }
    }
}

/// 1-based rank of the first correct detection.
pub fn first_correct_rank(result: &QueryResult, iou_threshold: f64) -> Result<Option<usize>> {
    check_threshold(iou_threshold)?;
    let by_gallery = result.gt_by_gallery();
    for (k, entry) in result.ranked.iter().enumerate() {
        if let Some(idxs) = by_gallery.get(&entry.gallery_id) {
            for &gi in idxs {
                if iou(&entry.bbox, &result.ground_truth[gi].bbox)? >= iou_threshold {
                    return Ok(Some(k + 1));
                }
            }
        }
    }
    Ok(None)
}

/// Fraction of queries whose first correct detection is within the top `k`.
pub fn cmc_at_k(results: &[QueryResult], k: usize, iou_threshold: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("CMC rank k must be at least 1"));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in results {
        if first_correct_rank(r, iou_threshold)?.is_some_and(|rank| rank <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub queries: usize,
}

/// mAP and CMC@{1,5,10}; per-query work runs in parallel and is reduced in
/// query order.
pub fn evaluate(results: &[QueryResult], iou_threshold: f64) -> Result<RetrievalSummary> {
    let per_query: Vec<(f64, Option<usize>)> = results
        .par_iter()
        .map(|r| {
            Ok((
                average_precision(r, iou_threshold)?,
                first_correct_rank(r, iou_threshold)?,
            ))
        })
        .collect::<Result<_>>()?;
    let n = per_query.len().max(1) as f64;
    let map = per_query.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    let within = |k: usize| {
        per_query
            .iter()
            .filter(|(_, r)| r.is_some_and(|r| r <= k))
            .count() as f64
            / n
    };
    Ok(RetrievalSummary {
        map,
        top1: within(1),
        top5: within(5),
        top10: within(10),
        queries: per_query.len(),
    })
}

/// Davies-Bouldin index: mean over clusters of the worst
/// `(s_i + s_j) / d(c_i, c_j)`, with `s` the mean distance to the centroid.
pub fn davies_bouldin(points: &[Embedding], labels: &[u64]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape("one label per point is required"));
    }
    let dim = points.first().map_or(0, Embedding::dim);
    if points.iter().any(|p| p.dim() != dim) {
        return Err(Error::shape("points differ in dimension"));
    }
    let mut clusters: BTreeMap<u64, Vec<&Embedding>> = BTreeMap::new();
    for (p, l) in points.iter().zip(labels) {
        clusters.entry(*l).or_default().push(p);
    }
    if clusters.len() < 2 {
        return Err(Error::arg("Davies-Bouldin needs at least two clusters"));
    }
    let stats: Vec<(Vec<f64>, f64)> = clusters
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for m in members {
                for (ci, x) in c.iter_mut().zip(m.iter()) {
                    *ci += x;
                }
            }
            let n = members.len() as f64;
            c.iter_mut().for_each(|v| *v /= n);
            let scatter = members.iter().map(|m| euclidean(m, &c)).sum::<f64>() / n;
            (c, scatter)
        })
        .collect();
    let mut total = 0.0;
    for (i, (ci, si)) in stats.iter().enumerate() {
        let mut worst = f64::NEG_INFINITY;
        for (j, (cj, sj)) in stats.iter().enumerate() {
            if i == j {
                continue;
            }
            let d = euclidean(ci, cj);
            if d == 0.0 {
                return Err(Error::arg("two clusters share a centroid"));
            }
            worst = worst.max((si + sj) / d);
        }
        total += worst;
    }
    Ok(total / stats.len() as f64)
}
