//! Analytic gradients. Discrete choices (matchings, prototype assignments,
//! queue contents) are constants; at a tie the selected branch's gradient is
//! returned and the tie is flagged.

use crate::assignment::{
    match_predictions, Matching, MueConfig, Prediction, LOG_PROB_FLOOR, NO_OBJECT, PERSON,
};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{box_loss, overlap, BBox};
use crate::linalg::{
    check_dims, cosine_matrix, cross_entropy_at, dot, log_softmax, normalize_backward, softmax,
    Embedding,
};
use crate::pud::{HEAD_OUTPUTS, LOGIT_CAP};
use crate::reid::{CircularQueue, LookupTable, Temperatures};

fn check_temp(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::arg(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_square(sim: &[Vec<f64>]) -> Result<usize> {
    let n = sim.len();
    if n == 0 || sim.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "similarity matrix must be square and nonempty",
        ));
    }
    if sim.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity matrix"));
    }
    Ok(n)
}

/// Gradients of a loss over a cosine-similarity matrix with respect to the
/// row and column embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub d_rows: Vec<Vec<f64>>,
    pub d_cols: Vec<Vec<f64>>,
}

/// Mean diagonal InfoNCE and its gradient w.r.t. the similarity matrix:
/// `(p_ij - [i = j]) / (eps * N)`.
pub fn infonce_sim_grad(sim: &[Vec<f64>], eps: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_temp(eps)?;
    let n = check_square(sim)?;
    let nf = n as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; n]; n];
    for (i, row) in sim.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|s| s / eps).collect();
        loss += cross_entropy_at(&logits, i);
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            grad[i][j] = (p - if i == j { 1.0 } else { 0.0 }) / (eps * nf);
        }
    }
    Ok((loss / nf, grad))
}

/// One KL direction over rows of `logits`; returns the loss and its gradient
/// w.r.t. the logits: `p_k (c_k - sum_j p_j c_j) / N` with
/// `c_j = log p_j - log(q_j + eps)`.
fn kl_rows_grad(
    logits: &[Vec<f64>],
    positives: &[Vec<bool>],
    eps: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let nf = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, (row, pos)) in logits.iter().zip(positives).enumerate() {
        let count = pos.iter().filter(|p| **p).count();
        if count == 0 {
            return Err(Error::arg(format!("row {i} has no positive pair")));
        }
        let (ln_pos, ln_neg) = ((1.0 / count as f64 + eps).ln(), eps.ln());
        let lp = log_softmax(row);
        let c: Vec<f64> = lp
            .iter()
            .zip(pos)
            .map(|(l, is_pos)| l - if *is_pos { ln_pos } else { ln_neg })
            .collect();
        let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        let mean_c: f64 = p.iter().zip(&c).map(|(a, b)| a * b).sum();
        loss += mean_c;
        grad.push(
            p.iter()
                .zip(&c)
                .map(|(pk, ck)| pk * (ck - mean_c) / nf)
                .collect(),
        );
    }
    Ok((loss / nf, grad))
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| m.iter().map(|r| r[j]).collect())
        .collect()
}

/// Two-direction similarity-distribution KL and its gradient w.r.t. the
/// similarity matrix.
pub fn sdm_kl_sim_grad(
    sim: &[Vec<f64>],
    positives: &[Vec<bool>],
    temps: &Temperatures,
) -> Result<(f64, Vec<Vec<f64>>)> {
    temps.validate()?;
    let n = check_square(sim)?;
    if positives.len() != n || positives.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "positive mask must match the similarity matrix",
        ));
    }
    let logits: Vec<Vec<f64>> = sim
        .iter()
        .map(|r| r.iter().map(|s| s / temps.rho).collect())
        .collect();
    let (l1, g1) = kl_rows_grad(&logits, positives, temps.kl_eps)?;
    let pos_t: Vec<Vec<bool>> = (0..n)
        .map(|j| positives.iter().map(|r| r[j]).collect())
        .collect();
    let (l2, g2) = kl_rows_grad(&transpose(&logits), &pos_t, temps.kl_eps)?;
    let mut grad = g1;
    for (i, row) in grad.iter_mut().enumerate() {
        for (j, g) in row.iter_mut().enumerate() {
            *g = (*g + g2[j][i]) / temps.rho;
        }
    }
    Ok((l1 + l2, grad))
}

/// Symmetric prototype/text contrastive loss and its gradient w.r.t. the
/// similarity matrix.
pub fn ptc_sim_grad(sim: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    check_temp(tau)?;
    let k = check_square(sim)?;
    let kf = k as f64;
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; k]; k];
    let scale = 1.0 / (2.0 * kf * tau);
    let mut buf = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            buf[j] = sim[i][j] / tau;
        }
        loss += cross_entropy_at(&buf, i);
        for (j, p) in softmax(&buf).into_iter().enumerate() {
            grad[i][j] += (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
        for j in 0..k {
            buf[j] = sim[j][i] / tau;
        }
        loss += cross_entropy_at(&buf, i);
        for (j, p) in softmax(&buf).into_iter().enumerate() {
            grad[j][i] += (p - if i == j { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok((loss / (2.0 * kf), grad))
}

/// Chains a similarity-matrix gradient through `sim_ij = cos(rows_i, cols_j)`:
/// `d rows_i = sum_j g_ij (c^_j - s_ij r^_i) / |rows_i|` and symmetrically
/// for the columns. Zero vectors receive zero gradient.
pub fn cosine_backward(
    rows: &[Embedding],
    cols: &[Embedding],
    d_sim: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let unit = |e: &Embedding| -> (Vec<f64>, f64) {
        let n = e.norm();
        if n > 0.0 {
            (e.iter().map(|x| x / n).collect(), n)
        } else {
            (vec![0.0; e.dim()], 0.0)
        }
    };
    let ru: Vec<(Vec<f64>, f64)> = rows.iter().map(unit).collect();
    let cu: Vec<(Vec<f64>, f64)> = cols.iter().map(unit).collect();
    let side = |a: &[(Vec<f64>, f64)],
                b: &[(Vec<f64>, f64)],
                g_at: &(dyn Fn(usize, usize) -> f64 + Sync)| {
        a.par_iter()
            .enumerate()
            .map(|(i, (ui, ni))| {
                let mut d = vec![0.0; ui.len()];
                if *ni == 0.0 {
                    return d;
                }
                let mut self_coef = 0.0;
                for (j, (wj, nj)) in b.iter().enumerate() {
                    let g = g_at(i, j);
                    if g == 0.0 || *nj == 0.0 {
                        continue;
                    }
                    let s = dot(ui, wj);
                    self_coef += g * s;
                    for (x, w) in d.iter_mut().zip(wj) {
                        *x += g * w;
                    }
                }
                for (x, u) in d.iter_mut().zip(ui) {
                    *x = (*x - self_coef * u) / ni;
                }
                d
            })
            .collect::<Vec<_>>()
    };
    let d_rows = side(&ru, &cu, &|i, j| d_sim[i][j]);
    let d_cols = side(&cu, &ru, &|j, i| d_sim[i][j]);
    (d_rows, d_cols)
}

fn check_pairs(rows: &[Embedding], cols: &[Embedding]) -> Result<()> {
    if rows.len() != cols.len() || rows.is_empty() {
        return Err(Error::shape(
            "paired embedding lists must be nonempty and equally long",
        ));
    }
    let dim = rows[0].dim();
    check_dims(rows, dim, "row")?;
    check_dims(cols, dim, "column")?;
    if rows.iter().chain(cols).any(|e| !(e.norm() > 0.0)) {
        return Err(Error::arg("cosine similarity needs nonzero embeddings"));
    }
    Ok(())
}

pub fn infonce_grad(visual: &[Embedding], text: &[Embedding], eps: f64) -> Result<PairGrad> {
    check_pairs(visual, text)?;
    let (loss, d_sim) = infonce_sim_grad(&cosine_matrix(visual, text), eps)?;
    let (d_rows, d_cols) = cosine_backward(visual, text, &d_sim);
    Ok(PairGrad {
        loss,
        d_rows,
        d_cols,
    })
}

pub fn sdm_kl_grad(
    visual: &[Embedding],
    text: &[Embedding],
    positives: &[Vec<bool>],
    temps: &Temperatures,
) -> Result<PairGrad> {
    check_pairs(visual, text)?;
    let (loss, d_sim) = sdm_kl_sim_grad(&cosine_matrix(visual, text), positives, temps)?;
    let (d_rows, d_cols) = cosine_backward(visual, text, &d_sim);
    Ok(PairGrad {
        loss,
        d_rows,
        d_cols,
    })
}

pub fn ptc_grad(protos: &[Embedding], texts: &[Embedding], tau: f64) -> Result<PairGrad> {
    check_pairs(protos, texts)?;
    let (loss, d_sim) = ptc_sim_grad(&cosine_matrix(protos, texts), tau)?;
    let (d_rows, d_cols) = cosine_backward(protos, texts, &d_sim);
    Ok(PairGrad {
        loss,
        d_rows,
        d_cols,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGrad {
    pub loss: f64,
    /// Gradient w.r.t. the predicted corners `(x1, y1, x2, y2)`.
    pub grad: [f64; 4],
    /// A min/max selection or an L1 kink was evaluated at equality.
    pub at_tie: bool,
}

/// `box_loss(pred, gt)` and its gradient w.r.t. the predicted corners.
///
/// Ties in the intersection/enclosure selections take the ground-truth
/// branch and L1 kinks take subgradient 0.
pub fn box_loss_grad(pred: &BBox, gt: &BBox) -> Result<BoxGrad> {
    let loss = box_loss(pred, gt)?;
    let p = pred.as_array();
    let g = gt.as_array();
    let o = overlap(pred, gt);
    let (w, h) = (p[2] - p[0], p[3] - p[1]);
    let mut at_tie = p.iter().zip(&g).any(|(a, b)| a == b);

    // d(area_pred)
    let d_area = [-h, -w, h, w];
    // Intersection extents and their corner derivatives.
    let iw = p[2].min(g[2]) - p[0].max(g[0]);
    let ih = p[3].min(g[3]) - p[1].max(g[1]);
    let mut d_iw = [0.0; 4];
    let mut d_ih = [0.0; 4];
    if iw > 0.0 && ih > 0.0 {
        if p[0] > g[0] {
            d_iw[0] = -1.0;
        }
        if p[2] < g[2] {
            d_iw[2] = 1.0;
        }
        if p[1] > g[1] {
            d_ih[1] = -1.0;
        }
        if p[3] < g[3] {
            d_ih[3] = 1.0;
        }
    } else if iw == 0.0 || ih == 0.0 {
        at_tie = true;
    }
    let (iw, ih) = (iw.max(0.0), ih.max(0.0));
    let d_inter: Vec<f64> = (0..4).map(|k| d_iw[k] * ih + iw * d_ih[k]).collect();
    let d_union: Vec<f64> = (0..4).map(|k| d_area[k] - d_inter[k]).collect();
    let ew = p[2].max(g[2]) - p[0].min(g[0]);
    let eh = p[3].max(g[3]) - p[1].min(g[1]);
    let mut d_ew = [0.0; 4];
    let mut d_eh = [0.0; 4];
    if p[0] < g[0] {
        d_ew[0] = -1.0;
    }
    if p[2] > g[2] {
        d_ew[2] = 1.0;
    }
    if p[1] < g[1] {
        d_eh[1] = -1.0;
    }
    if p[3] > g[3] {
        d_eh[3] = 1.0;
    }
    let d_encl: Vec<f64> = (0..4).map(|k| d_ew[k] * eh + ew * d_eh[k]).collect();
    let (i, u, e) = (o.inter, o.union, o.enclosing);
    let mut grad = [0.0; 4];
    for k in 0..4 {
        // giou = I/U - 1 + U/E
        let d_giou =
            d_inter[k] / u - i * d_union[k] / (u * u) + d_union[k] / e - u * d_encl[k] / (e * e);
        let d_l1 = (p[k] - g[k]).signum() * if p[k] == g[k] { 0.0 } else { 1.0 };
        grad[k] = -d_giou + d_l1;
    }
    Ok(BoxGrad { loss, grad, at_tie })
}

/// Back-propagates a corner gradient through the capped-sigmoid decoder.
/// The confidence logit receives zero.
pub fn decode_box_backward(
    logits: &[f64; HEAD_OUTPUTS],
    d_corners: &[f64; 4],
) -> [f64; HEAD_OUTPUTS] {
    let s: Vec<f64> = logits
        .iter()
        .map(|z| crate::linalg::sigmoid(z.clamp(-LOGIT_CAP, LOGIT_CAP)))
        .collect();
    let ds: Vec<f64> = logits
        .iter()
        .zip(&s)
        .map(|(z, v)| {
            if z.abs() < LOGIT_CAP {
                v * (1.0 - v)
            } else {
                0.0
            }
        })
        .collect();
    let pass = |v: f64| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 };
    let (cx, cy, w, h) = (s[0], s[1], s[2], s[3]);
    let gx1 = d_corners[0] * pass(cx - w / 2.0);
    let gy1 = d_corners[1] * pass(cy - h / 2.0);
    let gx2 = d_corners[2] * pass(cx + w / 2.0);
    let gy2 = d_corners[3] * pass(cy + h / 2.0);
    [
        (gx1 + gx2) * ds[0],
        (gy1 + gy2) * ds[1],
        0.5 * (gx2 - gx1) * ds[2],
        0.5 * (gy2 - gy1) * ds[3],
        0.0,
    ]
}

/// Set-prediction loss under a fixed matching, with gradients w.r.t. each
/// predicted box and each pair of class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MueGrad {
    pub loss: f64,
    pub d_boxes: Vec<[f64; 4]>,
    pub d_logits: Vec<[f64; 2]>,
    pub matching: Matching,
    pub at_tie: bool,
}

fn class_ce_grad(logits: &[f64; 2], class: usize) -> (f64, [f64; 2]) {
    let lp = log_softmax(logits);
    if lp[class] < LOG_PROB_FLOOR {
        return (-LOG_PROB_FLOOR, [0.0; 2]);
    }
    let p = [lp[0].exp(), lp[1].exp()];
    let mut g = p;
    g[class] -= 1.0;
    (-lp[class], g)
}

pub fn mue_grad_with_matching(
    preds: &[Prediction],
    gts: &[BBox],
    matching: &Matching,
    no_object_weight: f64,
) -> Result<MueGrad> {
    let mut loss = 0.0;
    let mut d_boxes = vec![[0.0; 4]; preds.len()];
    let mut d_logits = vec![[0.0; 2]; preds.len()];
    let mut at_tie = false;
    for &(r, c) in &matching.pairs {
        let (l, g) = class_ce_grad(&preds[r].class_logits, PERSON);
        let b = box_loss_grad(&preds[r].bbox, &gts[c])?;
        loss += l + b.loss;
        d_logits[r] = g;
        d_boxes[r] = b.grad;
        at_tie |= b.at_tie;
    }
    for &r in &matching.unmatched_rows {
        let (l, g) = class_ce_grad(&preds[r].class_logits, NO_OBJECT);
        loss += no_object_weight * l;
        d_logits[r] = [no_object_weight * g[0], no_object_weight * g[1]];
    }
    Ok(MueGrad {
        loss,
        d_boxes,
        d_logits,
        matching: matching.clone(),
        at_tie,
    })
}

pub fn mue_grad(preds: &[Prediction], gts: &[BBox], config: &MueConfig) -> Result<MueGrad> {
    if !(config.no_object_weight >= 0.0) {
        return Err(Error::arg("no_object_weight must be nonnegative"));
    }
    let matching = match_predictions(preds, gts, config)?;
    mue_grad_with_matching(preds, gts, &matching, config.no_object_weight)
}

/// OIM cross-entropy of `x / |x|` and its gradient w.r.t. the raw `x`.
pub fn oim_grad(
    x: &[f64],
    label: u64,
    lut: &LookupTable,
    cq: &CircularQueue,
    temp: f64,
) -> Result<(f64, Vec<f64>)> {
    check_temp(temp)?;
    let n = crate::linalg::norm(x);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::arg("OIM feature must be nonzero and finite"));
    }
    let f: Vec<f64> = x.iter().map(|v| v / n).collect();
    let target = lut.index_of(label).ok_or(Error::MissingLabel(label))?;
    let stored: Vec<&Embedding> = lut.iter().map(|(_, v)| v).chain(cq.iter()).collect();
    if stored.iter().any(|v| v.dim() != x.len()) {
        return Err(Error::shape(
            "OIM feature dimension differs from the stored features",
        ));
    }
    let logits: Vec<f64> = stored.iter().map(|v| dot(&f, v) / temp).collect();
    let loss = cross_entropy_at(&logits, target);
    let p = softmax(&logits);
    let mut d_f = vec![0.0; x.len()];
    for (k, (pk, v)) in p.iter().zip(&stored).enumerate() {
        let coef = (pk - if k == target { 1.0 } else { 0.0 }) / temp;
        for (d, vi) in d_f.iter_mut().zip(v.iter()) {
            *d += coef * vi;
        }
    }
    Ok((loss, normalize_backward(x, &d_f)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pud::{decode_box, ptc_loss};
    use crate::reid::{infonce_loss, oim_loss, sdm_kl_loss, SimMatrix};

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec())
    }

    #[test]
    fn infonce_symmetric_point() {
        let n = 3;
        let eps = 0.07;
        let sim = vec![vec![0.2; n]; n];
        let (loss, g) = infonce_sim_grad(&sim, eps).unwrap();
        assert!((loss - (n as f64).ln()).abs() < 1e-12);
        let p = 1.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { (p - 1.0) / eps } else { p / eps } / n as f64;
                assert!((g[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn values_match_the_loss_functions() {
        let v = vec![
            e(&[0.3, 0.1, -0.2]),
            e(&[0.0, 0.5, 0.4]),
            e(&[-0.6, 0.2, 0.1]),
        ];
        let t = vec![
            e(&[0.2, 0.2, -0.1]),
            e(&[0.1, 0.4, 0.5]),
            e(&[-0.3, -0.1, 0.2]),
        ];
        let pos: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|j| i == j).collect()).collect();
        let sim = SimMatrix::from_embeddings(&v, &t).unwrap();
        let temps = Temperatures::default();
        assert!(
            (infonce_grad(&v, &t, 0.07).unwrap().loss - infonce_loss(&sim, 0.07).unwrap()).abs()
                < 1e-12
        );
        assert!(
            (sdm_kl_grad(&v, &t, &pos, &temps).unwrap().loss
                - sdm_kl_loss(&sim, &pos, &temps).unwrap())
            .abs()
                < 1e-9
        );
        assert!(
            (ptc_grad(&v, &t, 0.07).unwrap().loss - ptc_loss(&v, &t, 0.07).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn box_gradient_vanishes_at_the_target() {
        let b = BBox::new(0.1, 0.2, 0.4, 0.7).unwrap();
        let g = box_loss_grad(&b, &b).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| v.abs() < 1e-15));
        assert!(g.at_tie);
    }

    #[test]
    fn box_gradient_for_disjoint_boxes() {
        let p = BBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let gt = BBox::new(0.5, 0.5, 0.7, 0.7).unwrap();
        let g = box_loss_grad(&p, &gt).unwrap();
        assert!(!g.at_tie);
        // Moving the far corner toward the target lowers the loss.
        assert!(g.grad[2] < 0.0 && g.grad[3] < 0.0);
    }

    #[test]
    fn decode_backward_matches_differences() {
        let z = [0.3, -0.4, -1.0, 0.2, 0.0];
        let d = [0.7, -0.2, 0.4, 1.1];
        let f = |z: &[f64; 5]| {
            let b = decode_box(z).unwrap().bbox.as_array();
            (0..4).map(|k| b[k] * d[k]).sum::<f64>()
        };
        let g = decode_box_backward(&z, &d);
        for k in 0..4 {
            let mut zp = z;
            zp[k] += 1e-6;
            let mut zm = z;
            zm[k] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "coordinate {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn oim_value_matches_loss() {
        let mut lut = LookupTable::new(0.5, 10).unwrap();
        lut.insert(1, &e(&[1.0, 0.0])).unwrap();
        lut.insert(2, &e(&[0.0, 1.0])).unwrap();
        let cq = CircularQueue::new(5).unwrap();
        let x = [2.0, 1.0];
        let (l, _) = oim_grad(&x, 1, &lut, &cq, 0.07).unwrap();
        let f = e(&x).normalized().unwrap();
        assert!((l - oim_loss(&f, Some(1), &lut, &cq, 0.07).unwrap()).abs() < 1e-12);
        assert!(matches!(
            oim_grad(&x, 9, &lut, &cq, 0.07),
            Err(Error::MissingLabel(9))
        ));
    }
}
