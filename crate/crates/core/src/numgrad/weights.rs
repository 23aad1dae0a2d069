use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_WARMUP: usize = 10;
/// Added to the loss magnitude before inversion.
pub const WEIGHT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightMode {
    Fixed {
        alphas: [f64; 3],
    },
    /// `alpha_i = 1 / (EMA(L_i) + eps)`, held at 1 for the first `warmup`
    /// observations.
    Adaptive {
        decay: f64,
        warmup: usize,
    },
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Adaptive {
            decay: DEFAULT_EMA_DECAY,
            warmup: DEFAULT_WARMUP,
        }
    }
}

impl WeightMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightMode::Fixed { alphas } => {
                if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
                    return Err(Error::config("weights.alphas", "must be finite and >= 0"));
                }
                if alphas.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::config("weights.alphas", "must not all be zero"));
                }
            }
            WeightMode::Adaptive { decay, .. } => {
                if !(0.0..1.0).contains(&decay) {
                    return Err(Error::config("weights.decay", "must lie in [0, 1)"));
                }
            }
        }
        Ok(())
    }
}

/// Weights of the detection, decoupling and re-identification losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    mode: WeightMode,
    alphas: [f64; 3],
    ema: Option<[f64; 3]>,
    observed: usize,
}

impl LossWeights {
    pub fn new(mode: WeightMode) -> Result<Self> {
        mode.validate()?;
        let alphas = match mode {
            WeightMode::Fixed { alphas } => alphas,
            WeightMode::Adaptive { .. } => [1.0; 3],
        };
        Ok(LossWeights {
            mode,
            alphas,
            ema: None,
            observed: 0,
        })
    }

    pub fn fixed(alphas: [f64; 3]) -> Result<Self> {
        Self::new(WeightMode::Fixed { alphas })
    }

    pub fn alphas(&self) -> [f64; 3] {
        self.alphas
    }

    pub fn ema(&self) -> Option<[f64; 3]> {
        self.ema
    }

    /// `alpha_i / sum(alpha)`.
    pub fn normalized(&self) -> [f64; 3] {
        let s: f64 = self.alphas.iter().sum();
        self.alphas.map(|a| a / s)
    }

    /// Folds one step's losses into the running magnitudes and refreshes the
    /// weights. The EMA starts at the first observation.
    pub fn observe(&mut self, losses: [f64; 3]) -> Result<()> {
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("observed losses"));
        }
        let WeightMode::Adaptive { decay, warmup } = self.mode else {
            return Ok(());
        };
        let ema = match self.ema {
            None => losses.map(f64::abs),
            Some(prev) => {
                let mut next = prev;
                for (e, l) in next.iter_mut().zip(losses) {
                    *e = decay * *e + (1.0 - decay) * l.abs();
                }
                next
            }
        };
        self.ema = Some(ema);
        self.observed += 1;
        if self.observed > warmup {
            self.alphas = ema.map(|e| 1.0 / (e + WEIGHT_EPS));
        }
        Ok(())
    }
}

/// `sum(alpha_i L_i) / sum(alpha_i)`.
pub fn total_loss_with(losses: [f64; 3], alphas: [f64; 3]) -> Result<f64> {
    if losses.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::arg(format!(
            "losses must be finite and >= 0, got {losses:?}"
        )));
    }
    if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::arg("weights must be finite and >= 0"));
    }
    let s: f64 = alphas.iter().sum();
    if s <= 0.0 {
        return Err(Error::arg("loss weights are all zero"));
    }
    Ok(losses.iter().zip(alphas).map(|(l, a)| a * l).sum::<f64>() / s)
}

pub fn total_loss(l_mue: f64, l_pud: f64, l_reid: f64, weights: &LossWeights) -> Result<f64> {
    total_loss_with([l_mue, l_pud, l_reid], weights.alphas())
}
