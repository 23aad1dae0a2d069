use std::collections::VecDeque;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cross_entropy_at, dot, sigmoid, Embedding};

pub const DEFAULT_LUT_CAPACITY: usize = 5000;
pub const DEFAULT_QUEUE_CAPACITY: usize = 500;
pub const DEFAULT_LUT_MOMENTUM: f64 = 0.5;
pub const DEFAULT_OIM_TEMPERATURE: f64 = 0.07;

fn require_unit(f: &Embedding, what: &str) -> Result<()> {
    if !f.is_finite() || !f.is_unit() {
        return Err(Error::arg(format!(
            "{what} must be a finite unit vector (norm {})",
            f.norm()
        )));
    }
    Ok(())
}

/// Labeled identity features, one unit vector per identity, in insertion
/// order. The position of a label is its class index in the OIM softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    entries: IndexMap<u64, Embedding>,
    momentum: f64,
    capacity: usize,
}

impl LookupTable {
    pub fn new(momentum: f64, capacity: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::arg(format!(
                "lookup momentum must lie in [0, 1], got {momentum}"
            )));
        }
        Ok(LookupTable {
            entries: IndexMap::new(),
            momentum,
            capacity,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, label: u64) -> bool {
        self.entries.contains_key(&label)
    }

    pub fn get(&self, label: u64) -> Option<&Embedding> {
        self.entries.get(&label)
    }

    pub fn index_of(&self, label: u64) -> Option<usize> {
        self.entries.get_index_of(&label)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Embedding)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Registers a new identity with the normalized `f`.
    pub fn insert(&mut self, label: u64, f: &Embedding) -> Result<()> {
        if self.entries.contains_key(&label) {
            return Err(Error::arg(format!("label {label} already present")));
        }
        if self.entries.len() >= self.capacity {
            return Err(Error::arg(format!(
                "lookup table is full ({} entries)",
                self.capacity
            )));
        }
        self.entries.insert(label, f.normalized()?);
        Ok(())
    }

    /// Momentum update with the table's own momentum.
    pub fn update(&mut self, label: u64, f: &Embedding) -> Result<()> {
        let gamma = self.momentum;
        lut_update(self, label, f, gamma)
    }
}

/// FIFO store of unit vectors for unlabeled identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircularQueue {
    capacity: usize,
    items: VecDeque<Embedding>,
}

impl CircularQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::arg("queue capacity must be positive"));
        }
        Ok(CircularQueue {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Embedding> {
        self.items.iter()
    }

    pub fn push(&mut self, f: Embedding) -> Result<()> {
        require_unit(&f, "queued feature")?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(f);
        Ok(())
    }
}

/// Splits a raw feature into a detection confidence `sigmoid((|f| - a) / b)`
/// and its unit direction.
pub fn nae_split(f: &Embedding, a: f64, b: f64) -> Result<(f64, Embedding)> {
    if !(b > 0.0) {
        return Err(Error::arg(format!(
            "norm scale b must be positive, got {b}"
        )));
    }
    let r = f.norm();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::arg(
            "norm-aware split needs a nonzero finite feature",
        ));
    }
    Ok((sigmoid((r - a) / b), f.scaled(1.0 / r)))
}

/// Concatenated `[LUT ; CQ]` logits of `f` divided by `temp`.
pub(crate) fn oim_logits(f: &[f64], lut: &LookupTable, cq: &CircularQueue, temp: f64) -> Vec<f64> {
    lut.entries
        .values()
        .chain(cq.items.iter())
        .map(|v| dot(f, v) / temp)
        .collect()
}

/// OIM cross-entropy of `f` against the lookup-table class of `label`.
///
/// Unlabeled features (`None`) contribute zero; the caller queues them with
/// [`cq_push`].
pub fn oim_loss(
    f: &Embedding,
    label: Option<u64>,
    lut: &LookupTable,
    cq: &CircularQueue,
    temp: f64,
) -> Result<f64> {
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::arg(format!(
            "OIM temperature must be positive, got {temp}"
        )));
    }
    require_unit(f, "OIM feature")?;
    let Some(label) = label else {
        return Ok(0.0);
    };
    let target = lut.index_of(label).ok_or(Error::MissingLabel(label))?;
    if lut
        .entries
        .values()
        .chain(cq.items.iter())
        .any(|v| v.dim() != f.dim())
    {
        return Err(Error::shape(
            "OIM feature dimension differs from the stored features",
        ));
    }
    Ok(cross_entropy_at(&oim_logits(f, lut, cq, temp), target))
}

/// `v <- normalize(gamma v + (1 - gamma) f)` for the entry of `label`.
///
/// If the blend vanishes the entry is left unchanged.
pub fn lut_update(lut: &mut LookupTable, label: u64, f: &Embedding, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::arg(format!(
            "lookup momentum must lie in [0, 1], got {gamma}"
        )));
    }
    require_unit(f, "lookup update feature")?;
    let v = lut
        .entries
        .get_mut(&label)
        .ok_or(Error::MissingLabel(label))?;
    if v.dim() != f.dim() {
        return Err(Error::shape(
            "lookup update dimension differs from the table",
        ));
    }
    let blended = Embedding::new(
        v.iter()
            .zip(f.iter())
            .map(|(a, b)| gamma * a + (1.0 - gamma) * b)
            .collect(),
    );
    if blended.norm() > 1e-12 {
        *v = blended.normalized()?;
    }
    Ok(())
}

pub fn cq_push(cq: &mut CircularQueue, f: Embedding) -> Result<()> {
    cq.push(f)
}

/// Re-identification loss: feature alignment plus norm-aware embedding.
pub fn reid_loss(cfa: f64, nae: f64) -> f64 {
    cfa + nae
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(dim: usize, i: usize) -> Embedding {
        Embedding::basis(dim, i)
    }

    fn lut_with(entries: &[(u64, Embedding)]) -> LookupTable {
        let mut lut = LookupTable::new(DEFAULT_LUT_MOMENTUM, DEFAULT_LUT_CAPACITY).unwrap();
        for (l, v) in entries {
            lut.insert(*l, v).unwrap();
        }
        lut
    }

    #[test]
    fn single_class_oim_is_zero() {
        let lut = lut_with(&[(0, e(3, 0))]);
        let cq = CircularQueue::new(4).unwrap();
        for temp in [0.07, 1.0, 5.0] {
            assert_eq!(oim_loss(&e(3, 0), Some(0), &lut, &cq, temp).unwrap(), 0.0);
        }
    }

    #[test]
    fn two_class_oim_value() {
        let lut = lut_with(&[(0, e(2, 0)), (1, e(2, 1))]);
        let cq = CircularQueue::new(4).unwrap();
        let l = oim_loss(&e(2, 0), Some(0), &lut, &cq, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-15);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn queue_entries_act_as_negatives() {
        let lut = lut_with(&[(0, e(2, 0))]);
        let mut cq = CircularQueue::new(4).unwrap();
        cq.push(e(2, 1)).unwrap();
        let l = oim_loss(&e(2, 0), Some(0), &lut, &cq, 1.0).unwrap();
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn unknown_label_contributes_nothing() {
        let lut = lut_with(&[(0, e(2, 0))]);
        let before = lut.clone();
        let cq = CircularQueue::new(4).unwrap();
        assert_eq!(oim_loss(&e(2, 1), None, &lut, &cq, 0.07).unwrap(), 0.0);
        assert_eq!(lut, before);
    }

    #[test]
    fn missing_label_is_an_error() {
        let lut = lut_with(&[(0, e(2, 0))]);
        let cq = CircularQueue::new(4).unwrap();
        assert!(matches!(
            oim_loss(&e(2, 0), Some(9), &lut, &cq, 0.07),
            Err(Error::MissingLabel(9))
        ));
        let mut lut = lut;
        assert!(lut_update(&mut lut, 9, &e(2, 0), 0.5).is_err());
    }

    #[test]
    fn lut_update_endpoints_and_midpoint() {
        let mut lut = lut_with(&[(3, e(2, 0))]);
        lut_update(&mut lut, 3, &e(2, 1), 1.0).unwrap();
        assert_eq!(lut.get(3).unwrap(), &e(2, 0));
        lut_update(&mut lut, 3, &e(2, 1), 0.0).unwrap();
        assert_eq!(lut.get(3).unwrap(), &e(2, 1));
        let mut lut = lut_with(&[(3, e(2, 0))]);
        lut_update(&mut lut, 3, &e(2, 1), 0.5).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = lut.get(3).unwrap();
        assert!((v[0] - s).abs() < 1e-15 && (v[1] - s).abs() < 1e-15);
    }

    #[test]
    fn queue_is_fifo_and_bounded() {
        let mut cq = CircularQueue::new(2).unwrap();
        cq_push(&mut cq, e(3, 0)).unwrap();
        assert_eq!(cq.len(), 1);
        cq_push(&mut cq, e(3, 1)).unwrap();
        cq_push(&mut cq, e(3, 2)).unwrap();
        let items: Vec<_> = cq.iter().cloned().collect();
        assert_eq!(items, vec![e(3, 1), e(3, 2)]);
        assert!(cq.push(Embedding::new(vec![2.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn queue_at_default_capacity_stays_full() {
        let mut cq = CircularQueue::new(DEFAULT_QUEUE_CAPACITY).unwrap();
        for i in 0..DEFAULT_QUEUE_CAPACITY {
            cq.push(e(4, i % 4)).unwrap();
        }
        assert_eq!(cq.len(), 500);
        cq.push(e(4, 0)).unwrap();
        assert_eq!(cq.len(), 500);
    }

    #[test]
    fn nae_split_values() {
        let (c, d) = nae_split(&Embedding::new(vec![0.6, 0.8]), 1.0, 0.3).unwrap();
        assert_eq!(c, 0.5);
        assert_eq!(d.as_slice(), &[0.6, 0.8]);
        let (c, d) = nae_split(&e(3, 0).scaled(3.0), 1.0, 0.25).unwrap();
        assert!((c - sigmoid(8.0)).abs() < 1e-15);
        assert!((c - 0.99966).abs() < 1e-5);
        assert_eq!(d, e(3, 0));
        let (_, d2) = nae_split(&e(3, 0).scaled(0.1), 1.0, 0.25).unwrap();
        assert_eq!(d, d2);
        assert!(nae_split(&Embedding::zeros(3), 1.0, 0.25).is_err());
    }

    #[test]
    fn reid_loss_is_a_sum() {
        assert_eq!(reid_loss(0.0, 0.0), 0.0);
        assert_eq!(reid_loss(1.0, 2.0), 3.0);
    }
}
