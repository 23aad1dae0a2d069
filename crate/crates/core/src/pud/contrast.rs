use crate::error::{Error, Result};
use crate::linalg::{check_dims, cosine_matrix, cross_entropy_at, Embedding};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Symmetric prototype/text contrastive loss from a precomputed `K × K`
/// similarity matrix (rows: prototypes, columns: texts).
pub fn ptc_from_similarity(sim: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::arg(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let k = sim.len();
    if k == 0 {
        return Err(Error::arg("contrastive loss needs at least one pair"));
    }
    if sim.iter().any(|r| r.len() != k) {
        return Err(Error::shape("similarity matrix must be square"));
    }
    let mut proto_to_text = 0.0;
    let mut text_to_proto = 0.0;
    let mut buf = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            buf[j] = sim[i][j] / tau;
        }
        proto_to_text += cross_entropy_at(&buf, i);
        for j in 0..k {
            buf[j] = sim[j][i] / tau;
        }
        text_to_proto += cross_entropy_at(&buf, i);
    }
    let kf = k as f64;
    Ok((proto_to_text / kf + text_to_proto / kf) / 2.0)
}

/// Average of the prototype-to-text and text-to-prototype InfoNCE terms under
/// cosine similarity. Row `i` of `protos` pairs with row `i` of `texts`.
pub fn ptc_loss(protos: &[Embedding], texts: &[Embedding], tau: f64) -> Result<f64> {
    if protos.len() != texts.len() {
        return Err(Error::shape(format!(
            "{} prototypes but {} texts",
            protos.len(),
            texts.len()
        )));
    }
    let dim = protos
        .first()
        .ok_or_else(|| Error::arg("contrastive loss needs at least one pair"))?
        .dim();
    check_dims(protos, dim, "prototype")?;
    check_dims(texts, dim, "text")?;
    ptc_from_similarity(&cosine_matrix(protos, texts), tau)
}
