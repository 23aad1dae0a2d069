//! Finite-difference verification of every analytic gradient at random
//! points. Loss values come from the forward implementations; gradients from
//! the hand-derived backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::assignment::{match_predictions, mue_loss_with_matching, MueConfig, Prediction};
use crate::error::Result;
use crate::geometry::{box_loss, BBox};
use crate::linalg::Embedding;
use crate::pud::ptc_loss;
use crate::reid::{
    infonce_loss, oim_loss, sdm_kl_loss, CircularQueue, LookupTable, SimMatrix, Temperatures,
};
use crate::synth::{rng_for, stream};

use super::fd::{fd_check, DEFAULT_STEP};
use super::grad::{
    box_loss_grad, infonce_grad, mue_grad_with_matching, oim_grad, ptc_grad, sdm_kl_grad,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Points with a min/max or L1 kink closer than this along any perturbed
/// coordinate are skipped; the central difference would straddle the kink.
pub const TIE_MARGIN: f64 = 10.0 * DEFAULT_STEP;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub loss: &'static str,
    pub points: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOLERANCE
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn split(x: &[f64], dim: usize) -> Vec<Embedding> {
    x.chunks(dim).map(|c| Embedding::new(c.to_vec())).collect()
}

fn flatten(parts: &[Vec<f64>]) -> Vec<f64> {
    parts.iter().flatten().copied().collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (w, h) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
    let (x, y) = (
        rng.random_range(0.0..1.0 - w),
        rng.random_range(0.0..1.0 - h),
    );
    BBox::new(x, y, x + w, y + h).expect("valid sample")
}

/// True when some pair of same-axis corner coordinates lies within `margin`.
pub fn near_box_tie(a: &BBox, b: &BBox, margin: f64) -> bool {
    let (p, g) = (a.as_array(), b.as_array());
    [(0, 2), (1, 3)].iter().any(|&(lo, hi)| {
        let xs = [p[lo], p[hi], g[lo], g[hi]];
        (0..4).any(|i| (i + 1..4).any(|j| (xs[i] - xs[j]).abs() < margin))
    })
}

fn run(
    name: &'static str,
    points: usize,
    mut one: impl FnMut() -> Result<Option<f64>>,
) -> Result<CheckReport> {
    let mut report = CheckReport {
        loss: name,
        points: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    while report.points < points {
        match one()? {
            Some(err) => {
                report.points += 1;
                report.max_rel_err = report.max_rel_err.max(err);
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

pub fn check_ptc(points: usize, seed: u64) -> Result<CheckReport> {
    let (k, dim, tau) = (8, 16, 0.07);
    let mut rng = rng_for(seed, stream::GRADCHECK, 0);
    run("ptc_loss", points, || {
        let x = gaussian(&mut rng, 2 * k * dim);
        let eval = |x: &[f64]| {
            let (p, t) = (split(&x[..k * dim], dim), split(&x[k * dim..], dim));
            let g = ptc_grad(&p, &t, tau)?;
            Ok((
                ptc_loss(&p, &t, tau)?,
                [flatten(&g.d_rows), flatten(&g.d_cols)].concat(),
            ))
        };
        fd_check(eval, &x, DEFAULT_STEP).map(Some)
    })
}

pub fn check_infonce(points: usize, seed: u64) -> Result<CheckReport> {
    let (n, dim, eps) = (8, 16, 0.07);
    let mut rng = rng_for(seed, stream::GRADCHECK, 1);
    run("infonce_loss", points, || {
        let x = gaussian(&mut rng, 2 * n * dim);
        let eval = |x: &[f64]| {
            let (v, t) = (split(&x[..n * dim], dim), split(&x[n * dim..], dim));
            let g = infonce_grad(&v, &t, eps)?;
            Ok((
                infonce_loss(&SimMatrix::from_embeddings(&v, &t)?, eps)?,
                [flatten(&g.d_rows), flatten(&g.d_cols)].concat(),
            ))
        };
        fd_check(eval, &x, DEFAULT_STEP).map(Some)
    })
}

pub fn check_sdm_kl(points: usize, seed: u64) -> Result<CheckReport> {
    let (n, dim) = (8, 16);
    let temps = Temperatures::default();
    let mut rng = rng_for(seed, stream::GRADCHECK, 2);
    run("sdm_kl_loss", points, || {
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let positives: Vec<Vec<bool>> = labels
            .iter()
            .map(|a| labels.iter().map(|b| a == b).collect())
            .collect();
        let x = gaussian(&mut rng, 2 * n * dim);
        let eval = |x: &[f64]| {
            let (v, t) = (split(&x[..n * dim], dim), split(&x[n * dim..], dim));
            let g = sdm_kl_grad(&v, &t, &positives, &temps)?;
            Ok((
                sdm_kl_loss(&SimMatrix::from_embeddings(&v, &t)?, &positives, &temps)?,
                [flatten(&g.d_rows), flatten(&g.d_cols)].concat(),
            ))
        };
        fd_check(eval, &x, DEFAULT_STEP).map(Some)
    })
}

pub fn check_box_loss(points: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng_for(seed, stream::GRADCHECK, 3);
    run("box_loss", points, || {
        let (pred, gt) = (random_box(&mut rng), random_box(&mut rng));
        if near_box_tie(&pred, &gt, TIE_MARGIN) {
            return Ok(None);
        }
        let eval = |x: &[f64]| {
            let p = BBox::new(x[0], x[1], x[2], x[3])?;
            Ok((box_loss(&p, &gt)?, box_loss_grad(&p, &gt)?.grad.to_vec()))
        };
        fd_check(eval, &pred.as_array(), DEFAULT_STEP).map(Some)
    })
}

pub fn check_oim(points: usize, seed: u64) -> Result<CheckReport> {
    let (dim, ids, queued, temp) = (16, 10, 5, 0.07);
    let mut rng = rng_for(seed, stream::GRADCHECK, 4);
    run("oim_loss", points, || {
        let mut lut = LookupTable::new(0.5, ids)?;
        for id in 0..ids as u64 {
            lut.insert(id, &Embedding::new(gaussian(&mut rng, dim)).normalized()?)?;
        }
        let mut cq = CircularQueue::new(queued)?;
        for _ in 0..queued {
            cq.push(Embedding::new(gaussian(&mut rng, dim)).normalized()?)?;
        }
        let label = rng.random_range(0..ids as u64);
        let x = gaussian(&mut rng, dim);
        let eval = |x: &[f64]| {
            let (_, g) = oim_grad(x, label, &lut, &cq, temp)?;
            Ok((
                oim_loss(
                    &Embedding::new(x.to_vec()).normalized()?,
                    Some(label),
                    &lut,
                    &cq,
                    temp,
                )?,
                g,
            ))
        };
        fd_check(eval, &x, DEFAULT_STEP).map(Some)
    })
}

/// Boxes and class logits of four slots against two targets, under the
/// matching found at the sampled point.
pub fn check_mue(points: usize, seed: u64) -> Result<CheckReport> {
    let (slots, targets) = (4, 2);
    let config = MueConfig::default();
    let mut rng = rng_for(seed, stream::GRADCHECK, 5);
    run("mue_loss", points, || {
        let preds: Vec<Prediction> = (0..slots)
            .map(|_| Prediction {
                bbox: random_box(&mut rng),
                class_logits: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            })
            .collect();
        let gts: Vec<BBox> = (0..targets).map(|_| random_box(&mut rng)).collect();
        let matching = match_predictions(&preds, &gts, &config)?;
        if matching
            .pairs
            .iter()
            .any(|&(r, c)| near_box_tie(&preds[r].bbox, &gts[c], TIE_MARGIN))
        {
            return Ok(None);
        }
        let x: Vec<f64> = preds
            .iter()
            .flat_map(|p| p.bbox.as_array().into_iter().chain(p.class_logits))
            .collect();
        let eval = |x: &[f64]| {
            let preds = x
                .chunks(6)
                .map(|c| {
                    Ok(Prediction {
                        bbox: BBox::new(c[0], c[1], c[2], c[3])?,
                        class_logits: [c[4], c[5]],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let g = mue_grad_with_matching(&preds, &gts, &matching, config.no_object_weight)?;
            let grad = g
                .d_boxes
                .iter()
                .zip(&g.d_logits)
                .flat_map(|(b, l)| b.iter().chain(l).copied())
                .collect();
            Ok((
                mue_loss_with_matching(&preds, &gts, &matching, config.no_object_weight)?,
                grad,
            ))
        };
        fd_check(eval, &x, DEFAULT_STEP).map(Some)
    })
}

/// Every check at `points` accepted points each.
pub fn gradcheck(points: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_ptc(points, seed)?,
        check_infonce(points, seed)?,
        check_sdm_kl(points, seed)?,
        check_box_loss(points, seed)?,
        check_oim(points, seed)?,
        check_mue(points, seed)?,
    ])
}
