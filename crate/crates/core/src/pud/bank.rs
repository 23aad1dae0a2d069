use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{euclidean_sq, normalize_in_place, Embedding};

pub const DEFAULT_PROTOTYPES: usize = 2048;
pub const DEFAULT_BANK_MOMENTUM: f64 = 0.9;

/// Fixed-size set of unit-norm prototypes updated by momentum averaging.
///
/// Single writer: callers serialize [`PrototypeBank::update`] calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    prototypes: Vec<Embedding>,
    momentum: f64,
    usage: Vec<u64>,
}

impl PrototypeBank {
    /// Prototypes drawn as normalized standard Gaussians.
    pub fn random<R: Rng + ?Sized>(
        k: usize,
        dim: usize,
        momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("prototype dimension must be positive"));
        }
        let prototypes = (0..k)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                normalize_in_place(&mut v);
                Embedding::new(v)
            })
            .collect();
        PrototypeBank::from_prototypes(prototypes, momentum)
    }

    /// Wraps existing prototypes; each is normalized.
    pub fn from_prototypes(prototypes: Vec<Embedding>, momentum: f64) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(Error::arg("prototype bank must be nonempty"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::arg(format!(
                "bank momentum must lie in [0, 1), got {momentum}"
            )));
        }
        let dim = prototypes[0].dim();
        let prototypes = prototypes
            .into_iter()
            .map(|p| {
                if p.dim() != dim {
                    return Err(Error::shape("prototypes differ in dimension"));
                }
                p.normalized()
            })
            .collect::<Result<Vec<_>>>()?;
        let usage = vec![0; prototypes.len()];
        Ok(PrototypeBank {
            prototypes,
            momentum,
            usage,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn prototypes(&self) -> &[Embedding] {
        &self.prototypes
    }

    pub fn prototype(&self, index: usize) -> &Embedding {
        &self.prototypes[index]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Nearest prototype by Euclidean distance; see [`assign_prototype`].
    pub fn assign(&self, f: &[f64]) -> Result<usize> {
        if f.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature has dimension {} but bank has {}",
                f.len(),
                self.dim()
            )));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.prototypes.iter().enumerate() {
            let d = euclidean_sq(f, p);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }

    /// For every prototype with assignments,
    /// `p <- normalize(m p + (1 - m) mean(features))`.
    ///
    /// Indices are validated before any prototype changes. A prototype whose
    /// blended vector vanishes keeps its previous value.
    pub fn update(&mut self, assigned: &[(usize, Embedding)]) -> Result<()> {
        let dim = self.dim();
        for (idx, f) in assigned {
            if *idx >= self.len() {
                return Err(Error::arg(format!(
                    "prototype index {idx} out of range for bank of {}",
                    self.len()
                )));
            }
            if f.dim() != dim {
                return Err(Error::shape("assigned feature dimension differs from bank"));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite("assigned feature"));
            }
        }
        let mut groups: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
        for (idx, f) in assigned {
            let entry = groups.entry(*idx).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, x) in entry.0.iter_mut().zip(f.iter()) {
                *s += x;
            }
            entry.1 += 1;
        }
        let m = self.momentum;
        for (idx, (sum, count)) in groups {
            let p = &mut self.prototypes[idx];
            let mut blended: Vec<f64> = p
                .iter()
                .zip(&sum)
                .map(|(pv, s)| m * pv + (1.0 - m) * s / count as f64)
                .collect();
            if normalize_in_place(&mut blended) > 1e-12 {
                *p = Embedding::new(blended);
            }
            self.usage[idx] += count;
        }
        Ok(())
    }

    /// Row-major `K × D` snapshot as a JSON array of arrays.
    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.prototypes)?)
    }

    /// Restores prototypes from a [`PrototypeBank::snapshot_json`] string.
    pub fn from_snapshot_json(json: &str, momentum: f64) -> Result<Self> {
        let prototypes: Vec<Embedding> = serde_json::from_str(json)?;
        PrototypeBank::from_prototypes(prototypes, momentum)
    }
}

/// Index of the prototype nearest to `f`; ties go to the lowest index.
pub fn assign_prototype(f: &Embedding, bank: &PrototypeBank) -> Result<usize> {
    bank.assign(f)
}
