use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, cosine_matrix, cross_entropy_at, softmax, Embedding};

/// Square or rectangular cosine-similarity matrix, rows visual, columns text.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    rows: Vec<Vec<f64>>,
}

impl SimMatrix {
    /// Wraps raw similarities, which must be finite and within `[-1, 1]`.
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("similarity rows differ in length"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("similarity matrix"));
        }
        if rows.iter().flatten().any(|v| v.abs() > 1.0 + 1e-12) {
            return Err(Error::arg("cosine similarities must lie in [-1, 1]"));
        }
        Ok(SimMatrix { rows })
    }

    pub fn from_embeddings(visual: &[Embedding], text: &[Embedding]) -> Result<Self> {
        if let Some(first) = visual.first().or(text.first()) {
            check_dims(visual, first.dim(), "visual")?;
            check_dims(text, first.dim(), "text")?;
        }
        SimMatrix::new(cosine_matrix(visual, text))
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn require_square(&self) -> Result<usize> {
        let n = self.n_rows();
        if n == 0 || self.n_cols() != n {
            return Err(Error::shape(
                "in-batch similarity matrix must be square and nonempty",
            ));
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    /// Softmax temperature of the distribution-matching loss.
    pub rho: f64,
    /// Temperature of the instance-level contrastive loss.
    pub itc: f64,
    /// Stabilizer added to the target distribution inside the log.
    pub kl_eps: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            rho: 0.02,
            itc: 0.07,
            kl_eps: 1e-8,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rho", self.rho),
            ("itc", self.itc),
            ("kl_eps", self.kl_eps),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::arg(format!(
                    "temperature `{name}` must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `(1/N) Σ_i Σ_j p_ij log(p_ij / (q_ij + eps))` for one direction, where
/// `p` is the row softmax of `logits` and `q` is uniform over the positives.
pub(crate) fn kl_rows(logits: &[Vec<f64>], positives: &[Vec<bool>], eps: f64) -> Result<f64> {
    let n = logits.len();
    let mut total = 0.0;
    for (i, (row, pos)) in logits.iter().zip(positives).enumerate() {
        let count = pos.iter().filter(|p| **p).count();
        if count == 0 {
            return Err(Error::arg(format!("row {i} has no positive pair")));
        }
        let q = 1.0 / count as f64;
        let p = softmax(row);
        for (pj, is_pos) in p.iter().zip(pos) {
            let qj = if *is_pos { q } else { 0.0 };
            total += pj * (pj.ln() - (qj + eps).ln());
        }
    }
    Ok(total / n as f64)
}

pub(crate) fn transpose<T: Copy>(m: &[Vec<T>]) -> Vec<Vec<T>> {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| m.iter().map(|r| r[j]).collect())
        .collect()
}

/// Class-level similarity-distribution matching: image-to-text plus
/// text-to-image KL divergence between the softmax similarity distribution
/// and the uniform distribution over each row's (column's) positives.
pub fn sdm_kl_loss(sim: &SimMatrix, positives: &[Vec<bool>], temps: &Temperatures) -> Result<f64> {
    temps.validate()?;
    let n = sim.require_square()?;
    if positives.len() != n || positives.iter().any(|r| r.len() != n) {
        return Err(Error::shape(
            "positive mask must match the similarity matrix",
        ));
    }
    let logits: Vec<Vec<f64>> = sim
        .rows
        .iter()
        .map(|r| r.iter().map(|s| s / temps.rho).collect())
        .collect();
    let i2t = kl_rows(&logits, positives, temps.kl_eps)?;
    let t2i = kl_rows(&transpose(&logits), &transpose(positives), temps.kl_eps)?;
    Ok(i2t + t2i)
}

/// Instance-level InfoNCE with positives on the diagonal.
pub fn infonce_loss(sim: &SimMatrix, eps_itc: f64) -> Result<f64> {
    if !(eps_itc > 0.0) || !eps_itc.is_finite() {
        return Err(Error::arg(format!(
            "temperature must be positive, got {eps_itc}"
        )));
    }
    let n = sim.require_square()?;
    let mut total = 0.0;
    for (i, row) in sim.rows.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|s| s / eps_itc).collect();
        total += cross_entropy_at(&logits, i);
    }
    Ok(total / n as f64)
}

/// Cross-modal feature alignment: class-level plus instance-level terms.
pub fn cfa_loss(class_level: f64, instance_level: f64) -> f64 {
    class_level + instance_level
}
