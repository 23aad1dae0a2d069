//! Minimum-cost bipartite matching and the set-prediction detection loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_loss, BBox};
use crate::linalg::log_softmax;

/// Floor applied to log-probabilities, `ln(1e-12)`.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547;

/// Dense row-major cost matrix: rows are predictions, columns are targets.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "cost matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        if data.iter().any(|v| *v < 0.0) {
            return Err(Error::arg("cost matrix entries must be nonnegative"));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("cost matrix rows have unequal length"));
        }
        CostMatrix::new(n, m, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Result of [`solve_assignment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Rows left without a column, ascending.
    pub unmatched_rows: Vec<usize>,
    pub total_cost: f64,
}

impl Matching {
    fn empty(rows: usize) -> Self {
        Matching {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            total_cost: 0.0,
        }
    }

    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|(_, c)| *c)
    }
}

/// Hungarian (Kuhn-Munkres with potentials), `O(n^2 m)` for `n <= m`.
///
/// The smaller side is assigned injectively into the larger one. Returns
/// `assign[row] = col` for a matrix with `n <= m`.
fn hungarian_rows_le_cols(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-indexed potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                // strict comparison keeps the lowest column on ties
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Minimum-total-cost matching of `min(N, M)` pairs.
///
/// An empty matrix yields an empty matching. The total cost is summed over
/// pairs in row order.
pub fn solve_assignment(cost: &CostMatrix) -> Matching {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Matching::empty(n);
    }
    let mut pairs: Vec<(usize, usize)> = if n <= m {
        hungarian_rows_le_cols(n, m, |r, c| cost.get(r, c))
            .into_iter()
            .enumerate()
            .collect()
    } else {
        hungarian_rows_le_cols(m, n, |r, c| cost.get(c, r))
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    let mut matched = vec![false; n];
    for &(r, _) in &pairs {
        matched[r] = true;
    }
    let unmatched_rows = (0..n).filter(|r| !matched[*r]).collect();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Matching {
        pairs,
        unmatched_rows,
        total_cost,
    }
}

/// Index of the person class in [`Prediction::class_logits`].
pub const PERSON: usize = 0;
/// Index of the no-object class.
pub const NO_OBJECT: usize = 1;

/// One decoder slot: a box and two class logits `[person, no-object]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub class_logits: [f64; 2],
}

impl Prediction {
    pub fn log_probs(&self) -> [f64; 2] {
        let lp = log_softmax(&self.class_logits);
        [lp[0].max(LOG_PROB_FLOOR), lp[1].max(LOG_PROB_FLOOR)]
    }

    pub fn person_prob(&self) -> f64 {
        log_softmax(&self.class_logits)[PERSON].exp()
    }
}

/// How the class term enters the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassCost {
    /// `1 - p(person)`, the usual set-prediction convention.
    #[default]
    Probability,
    /// `-log p(person)`, identical to the loss term.
    LogProbability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MueConfig {
    pub no_object_weight: f64,
    pub class_cost: ClassCost,
}

impl Default for MueConfig {
    fn default() -> Self {
        MueConfig {
            no_object_weight: 0.1,
            class_cost: ClassCost::Probability,
        }
    }
}

fn validate_predictions(preds: &[Prediction], gts: &[BBox]) -> Result<()> {
    if gts.len() > preds.len() {
        return Err(Error::arg(format!(
            "{} ground-truth boxes but only {} prediction slots",
            gts.len(),
            preds.len()
        )));
    }
    for p in preds {
        p.bbox.validate()?;
        if p.class_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class logits"));
        }
    }
    for g in gts {
        g.validate()?;
    }
    Ok(())
}

/// Builds the prediction-by-target matching cost.
pub fn matching_cost(
    preds: &[Prediction],
    gts: &[BBox],
    class_cost: ClassCost,
) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let class_term = match class_cost {
            ClassCost::Probability => 1.0 - p.person_prob(),
            ClassCost::LogProbability => -p.log_probs()[PERSON],
        };
        for g in gts {
            data.push(class_term.max(0.0) + box_loss(&p.bbox, g)?);
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Optimal prediction-to-target matching used by [`mue_loss`].
pub fn match_predictions(
    preds: &[Prediction],
    gts: &[BBox],
    config: &MueConfig,
) -> Result<Matching> {
    validate_predictions(preds, gts)?;
    Ok(solve_assignment(&matching_cost(
        preds,
        gts,
        config.class_cost,
    )?))
}

/// Loss for a fixed matching; matched slots pay `-log p(person) + box_loss`,
/// unmatched slots pay the weighted `-log p(no-object)`.
pub fn mue_loss_with_matching(
    preds: &[Prediction],
    gts: &[BBox],
    matching: &Matching,
    no_object_weight: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for &(r, c) in &matching.pairs {
        loss += -preds[r].log_probs()[PERSON] + box_loss(&preds[r].bbox, &gts[c])?;
    }
    for &r in &matching.unmatched_rows {
        loss += no_object_weight * -preds[r].log_probs()[NO_OBJECT];
    }
    Ok(loss)
}

/// Set-prediction detection loss under the optimal matching.
pub fn mue_loss(preds: &[Prediction], gts: &[BBox], config: &MueConfig) -> Result<f64> {
    if !(config.no_object_weight >= 0.0) {
        return Err(Error::arg("no_object_weight must be nonnegative"));
    }
    let matching = match_predictions(preds, gts, config)?;
    mue_loss_with_matching(preds, gts, &matching, config.no_object_weight)
}
