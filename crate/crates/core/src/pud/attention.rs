use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, cosine, dot, softmax, Embedding};

/// Bandwidth of the region-scaling kernel; must stay positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ScaleParam(f64);

impl ScaleParam {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::arg(format!(
                "scale parameter must be positive, got {mu}"
            )));
        }
        Ok(ScaleParam(mu))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for ScaleParam {
    fn default() -> Self {
        ScaleParam(0.5)
    }
}

impl TryFrom<f64> for ScaleParam {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        ScaleParam::new(v)
    }
}

impl From<ScaleParam> for f64 {
    fn from(s: ScaleParam) -> f64 {
        s.0
    }
}

fn shared_dim(visual: &[Embedding], text: &[Embedding]) -> Result<usize> {
    let dim = text
        .first()
        .ok_or_else(|| Error::arg("text token list is empty"))?
        .dim();
    check_dims(text, dim, "text")?;
    check_dims(visual, dim, "visual")?;
    Ok(dim)
}

/// Parameter-free scaled dot-product cross-attention with visual rows as
/// queries and text tokens as keys and values.
pub fn cross_attend(visual: &[Embedding], text: &[Embedding]) -> Result<Vec<Embedding>> {
    let dim = shared_dim(visual, text)?;
    let scale = (dim as f64).sqrt();
    Ok(visual
        .iter()
        .map(|v| {
            let scores: Vec<f64> = text.iter().map(|t| dot(v, t) / scale).collect();
            let weights = softmax(&scores);
            let mut out = vec![0.0; dim];
            for (w, t) in weights.iter().zip(text) {
                for (o, x) in out.iter_mut().zip(t.iter()) {
                    *o += w * x;
                }
            }
            Embedding::new(out)
        })
        .collect())
}

/// Per-row scaling `t = exp(-(1 - cos(v, s)) / (2 mu^2))`, in `(0, 1]`.
pub fn region_scale(
    visual: &[Embedding],
    salient: &[Embedding],
    mu: ScaleParam,
) -> Result<Vec<f64>> {
    if visual.len() != salient.len() {
        return Err(Error::shape(format!(
            "{} visual rows but {} salient rows",
            visual.len(),
            salient.len()
        )));
    }
    let denom = 2.0 * mu.get() * mu.get();
    visual
        .iter()
        .zip(salient)
        .map(|(v, s)| {
            if v.dim() != s.dim() {
                return Err(Error::shape("visual and salient rows differ in dimension"));
            }
            if v.norm() == 0.0 || s.norm() == 0.0 {
                return Err(Error::arg("region scaling needs nonzero rows"));
            }
            Ok((-(1.0 - cosine(v, s)) / denom).exp())
        })
        .collect()
}

/// Row-wise scaling of the visual features.
pub fn augment(visual: &[Embedding], scales: &[f64]) -> Result<Vec<Embedding>> {
    if visual.len() != scales.len() {
        return Err(Error::shape(format!(
            "{} visual rows but {} scales",
            visual.len(),
            scales.len()
        )));
    }
    Ok(visual
        .iter()
        .zip(scales)
        .map(|(v, t)| v.scaled(*t))
        .collect())
}

/// Text tokens pooled by relevance to the mean augmented visual feature:
/// returns the pooled vector and the softmax weights.
pub fn pooled_text(
    augmented: &[Embedding],
    text: &[Embedding],
    tau_fuse: f64,
) -> Result<(Embedding, Vec<f64>)> {
    let dim = shared_dim(augmented, text)?;
    if !(tau_fuse > 0.0) {
        return Err(Error::arg("fusion temperature must be positive"));
    }
    let mut mean = vec![0.0; dim];
    for row in augmented {
        for (m, x) in mean.iter_mut().zip(row.iter()) {
            *m += x;
        }
    }
    if !augmented.is_empty() {
        let n = augmented.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    let scores: Vec<f64> = text.iter().map(|t| cosine(&mean, t) / tau_fuse).collect();
    let weights = softmax(&scores);
    let mut pooled = vec![0.0; dim];
    for (w, t) in weights.iter().zip(text) {
        for (p, x) in pooled.iter_mut().zip(t.iter()) {
            *p += w * x;
        }
    }
    Ok((Embedding::new(pooled), weights))
}

/// `tanh(F_pro) ⊙ pooled_text`, row by row.
pub fn fuse_multimodal(
    augmented: &[Embedding],
    text: &[Embedding],
    tau_fuse: f64,
) -> Result<Vec<Embedding>> {
    let (pooled, _) = pooled_text(augmented, text, tau_fuse)?;
    Ok(augmented
        .iter()
        .map(|row| {
            Embedding::new(
                row.iter()
                    .zip(pooled.iter())
                    .map(|(x, w)| x.tanh() * w)
                    .collect(),
            )
        })
        .collect())
}
