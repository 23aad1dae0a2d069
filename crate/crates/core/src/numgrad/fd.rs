use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::arg(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        probe[k] = x[k] + h;
        let up = f(&probe)?;
        probe[k] = x[k] - h;
        let down = f(&probe)?;
        probe[k] = x[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_k |a_k - fd_k| / max(1, |a_k|)` where `a` is the analytic gradient
/// returned by `eval` at `x` and `fd` the central difference of its loss.
pub fn fd_check(
    eval: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
    x: &[f64],
    h: f64,
) -> Result<f64> {
    let (loss, analytic) = eval(x)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "analytic gradient length differs from the point",
        ));
    }
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic gradient"));
    }
    let fd = central_difference(|p| eval(p).map(|r| r.0), x, h)?;
    Ok(analytic
        .iter()
        .zip(&fd)
        .map(|(a, d)| (a - d).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
