//! Dense vector helpers and the [`Embedding`] newtype shared by every module.
//!
//! All arithmetic is `f64` with a fixed left-to-right summation order so that
//! results are reproducible across runs and thread counts.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when a caller promises a unit-norm vector.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// A fixed-dimension real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    /// Standard basis vector `e_index` in `dim` dimensions.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Embedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOL
    }

    /// Returns the L2-normalized copy, or an error for a zero vector.
    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::arg("cannot normalize a zero or non-finite vector"));
        }
        Ok(Embedding(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn scaled(&self, s: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * s).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Embedding {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding(values)
    }
}

/// Four interleaved partial sums, combined pairwise.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[k] += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    euclidean_sq(a, b).sqrt()
}

pub fn normalize_in_place(a: &mut [f64]) -> f64 {
    let n = norm(a);
    if n > 0.0 {
        for v in a.iter_mut() {
            *v /= n;
        }
    }
    n
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// `-log softmax(logits)[target]`, accurate when the target dominates.
pub fn cross_entropy_at(logits: &[f64], target: usize) -> f64 {
    let anchor = logits[target];
    let max_other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_other <= anchor {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != target)
            .map(|(_, v)| (v - anchor).exp())
            .sum();
        rest.ln_1p()
    } else {
        logsumexp(logits) - anchor
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// Gradient of `cosine(a, b)` with respect to `a` and `b`.
///
/// Both vectors must be nonzero.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let c = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    (ga, gb)
}

/// Back-propagates `grad_unit` (w.r.t. `x / |x|`) to `x`.
pub fn normalize_backward(x: &[f64], grad_unit: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let u: Vec<f64> = x.iter().map(|v| v / n).collect();
    let proj = dot(&u, grad_unit);
    grad_unit
        .iter()
        .zip(&u)
        .map(|(g, ui)| (g - proj * ui) / n)
        .collect()
}

pub(crate) fn check_dims(rows: &[Embedding], dim: usize, what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.dim() != dim {
            return Err(Error::shape(format!(
                "{what} row {i} has dimension {} (expected {dim})",
                r.dim()
            )));
        }
        if !r.is_finite() {
            return Err(Error::NonFinite("embedding"));
        }
    }
    Ok(())
}

/// Full cosine-similarity matrix `rows × cols`.
pub fn cosine_matrix(rows: &[Embedding], cols: &[Embedding]) -> Vec<Vec<f64>> {
    let col_norms: Vec<f64> = cols.iter().map(|c| c.norm()).collect();
    rows.iter()
        .map(|r| {
            let na = r.norm();
            cols.iter()
                .zip(&col_norms)
                .map(|(c, &nb)| {
                    if na == 0.0 || nb == 0.0 {
                        0.0
                    } else {
                        dot(r, c) / (na * nb)
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let q = softmax(&[101.0, 102.0, 103.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn normalize_backward_is_orthogonal_to_input() {
        let x = [3.0, -1.0, 2.0];
        let g = normalize_backward(&x, &[0.3, 0.7, -0.2]);
        assert!(dot(&g, &x).abs() < 1e-14);
    }

    #[test]
    fn zero_vector_cannot_be_normalized() {
        assert!(Embedding::zeros(3).normalized().is_err());
    }
}
