//! Full-batch gradient descent on free per-person embeddings.
//!
//! Each step evaluates three component losses over the labeled scenes, each
//! the mean of its per-unit terms: detection (set prediction per scene),
//! decoupling (prototype contrast plus box regression per identity-disjoint
//! group) and re-identification (distribution matching, InfoNCE and OIM per
//! batch). Parameters move along the weight-normalized gradient; prototype
//! bank, lookup table and queue are then refreshed from the updated features.
//!
//! With `norm_confidence` the detection logit is read off the feature norm,
//! so the class term moves norms while identity lives in the direction.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_assignment, CostMatrix, MueConfig, Prediction};
use crate::error::{Error, Result};
use crate::geometry::{box_loss, BBox};
use crate::linalg::{cosine, cosine_grad, Embedding};
use crate::metrics::davies_bouldin;
use crate::pud::{
    augment, cross_attend, decode_box, fuse_multimodal, pud_loss, region_scale, BoxHeadParams,
    PrototypeBank, ScaleParam, HEAD_OUTPUTS,
};
use crate::reid::{
    cfa_loss, lut_update, reid_loss, CircularQueue, LookupTable, Temperatures, DEFAULT_LUT_CAPACITY,
};
use crate::synth::{rng_for, stream, World};

use super::grad::{
    box_loss_grad, decode_box_backward, infonce_grad, mue_grad, oim_grad, ptc_grad, sdm_kl_grad,
};
use super::weights::{total_loss_with, LossWeights, WeightMode};

/// Lower bound kept on the region-scale bandwidth.
pub const MU_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub record_every: usize,
    pub weights: WeightMode,
    pub ptc_temperature: f64,
    pub temperatures: Temperatures,
    pub oim_temperature: f64,
    pub lut_momentum: f64,
    pub queue_capacity: usize,
    pub num_prototypes: usize,
    pub bank_momentum: f64,
    /// Initial region-scale bandwidth.
    pub mu: f64,
    pub fuse_temperature: f64,
    /// Contrast `prototype + instance feature` rather than the prototype alone.
    pub instance_prototypes: bool,
    /// Text features also enter the OIM loss and refresh the lookup table.
    pub text_updates_lut: bool,
    /// Extra prediction slots per scene beyond one per person.
    pub background_slots: usize,
    pub mue: MueConfig,
    /// Occurrences of each identity per re-identification batch; 0 puts
    /// every labeled instance in one batch.
    pub reid_per_identity: usize,
    /// Detection logit `(|x| - norm_offset) / norm_scale` taken from the
    /// feature norm instead of a head output.
    pub norm_confidence: bool,
    pub norm_offset: f64,
    pub norm_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            record_every: 10,
            weights: WeightMode::default(),
            ptc_temperature: 0.07,
            temperatures: Temperatures::default(),
            oim_temperature: 0.07,
            lut_momentum: 0.5,
            queue_capacity: 500,
            num_prototypes: 128,
            bank_momentum: 0.9,
            mu: 0.5,
            fuse_temperature: 0.07,
            instance_prototypes: true,
            text_updates_lut: true,
            background_slots: 1,
            mue: MueConfig::default(),
            reid_per_identity: 0,
            norm_confidence: true,
            norm_offset: 1.0,
            norm_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be finite and >= 0"));
        }
        if self.record_every == 0 {
            return Err(Error::config("train.record_every", "must be positive"));
        }
        self.weights.validate()?;
        for (f, v) in [
            ("train.ptc_temperature", self.ptc_temperature),
            ("train.oim_temperature", self.oim_temperature),
            ("train.fuse_temperature", self.fuse_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(f, "must be finite and > 0"));
            }
        }
        self.temperatures
            .validate()
            .map_err(|e| Error::config("train.temperatures", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.lut_momentum) {
            return Err(Error::config("train.lut_momentum", "must lie in [0, 1]"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("train.queue_capacity", "must be positive"));
        }
        if self.num_prototypes == 0 {
            return Err(Error::config("train.num_prototypes", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return Err(Error::config("train.bank_momentum", "must lie in [0, 1)"));
        }
        ScaleParam::new(self.mu)
            .map_err(|_| Error::config("train.mu", "must be finite and > 0"))?;
        if !(self.norm_scale > 0.0) || !self.norm_scale.is_finite() {
            return Err(Error::config("train.norm_scale", "must be finite and > 0"));
        }
        if !self.norm_offset.is_finite() {
            return Err(Error::config("train.norm_offset", "must be finite"));
        }
        if !(self.mue.no_object_weight >= 0.0) {
            return Err(Error::config("train.mue.no_object_weight", "must be >= 0"));
        }
        Ok(())
    }
}

/// Everything the trainer mutates; serializes as a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    /// One embedding per person in the labeled scenes.
    pub visual: Vec<Embedding>,
    /// One embedding per labeled person.
    pub text: Vec<Embedding>,
    /// Background prediction slots, `background_slots` per scene.
    pub slots: Vec<Embedding>,
    pub mu: f64,
    pub mue_head: BoxHeadParams,
    pub pud_head: BoxHeadParams,
    pub weights: LossWeights,
    pub bank: PrototypeBank,
    pub lut: LookupTable,
    pub cq: CircularQueue,
    /// Weighted total loss of every completed step.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn is_finite(&self) -> bool {
        let heads = [&self.mue_head, &self.pud_head];
        self.mu.is_finite()
            && self
                .visual
                .iter()
                .chain(&self.text)
                .chain(&self.slots)
                .all(|e| {
                    let n = e.norm();
                    n.is_finite() && n > 0.0
                })
            && heads.iter().all(|h| h.validate().is_ok())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub l_total: f64,
    pub l_mue: f64,
    pub l_pud: f64,
    pub l_reid: f64,
    pub alpha_mue: f64,
    pub alpha_pud: f64,
    pub alpha_reid: f64,
    pub db_image: f64,
    pub db_text: f64,
    /// Gradient evaluations that hit a discrete-choice tie.
    pub ties: usize,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub records: Vec<TrainRecord>,
}

pub fn write_curves(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
struct PersonRef {
    gt: BBox,
    identity: Option<u64>,
    /// Index into the labeled list.
    labeled: Option<usize>,
}

#[derive(Debug, Clone)]
struct Data {
    persons: Vec<PersonRef>,
    /// Person indices per scene.
    scenes: Vec<Vec<usize>>,
    /// Person index of each labeled entry.
    labeled: Vec<usize>,
    /// Identity-disjoint groups of labeled indices.
    groups: Vec<Vec<usize>>,
    /// Batches for the re-identification term.
    reid_groups: Vec<Vec<usize>>,
}

/// Dense gradient over every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Grads {
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub slots: Vec<Vec<f64>>,
    pub mu: f64,
    pub mue_w: Vec<Vec<f64>>,
    pub mue_b: [f64; HEAD_OUTPUTS],
    pub pud_w: Vec<Vec<f64>>,
    pub pud_b: [f64; HEAD_OUTPUTS],
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

impl Grads {
    fn zeros(state: &TrainState) -> Self {
        let dim = state.mue_head.dim();
        let z = |n: usize| vec![vec![0.0; dim]; n];
        Grads {
            visual: z(state.visual.len()),
            text: z(state.text.len()),
            slots: z(state.slots.len()),
            mu: 0.0,
            mue_w: z(HEAD_OUTPUTS),
            mue_b: [0.0; HEAD_OUTPUTS],
            pud_w: z(HEAD_OUTPUTS),
            pud_b: [0.0; HEAD_OUTPUTS],
        }
    }

    fn add_scaled(&mut self, a: f64, o: &Grads) {
        let pairs = [
            (&mut self.visual, &o.visual),
            (&mut self.text, &o.text),
            (&mut self.slots, &o.slots),
            (&mut self.mue_w, &o.mue_w),
            (&mut self.pud_w, &o.pud_w),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                axpy(d, a, s);
            }
        }
        self.mu += a * o.mu;
        axpy(&mut self.mue_b, a, &o.mue_b);
        axpy(&mut self.pud_b, a, &o.pud_b);
    }
}

/// Sparse contribution of one scene or group.
#[derive(Default)]
struct Partial {
    loss: f64,
    visual: Vec<(usize, Vec<f64>)>,
    text: Vec<(usize, Vec<f64>)>,
    slots: Vec<(usize, Vec<f64>)>,
    mu: f64,
    head_w: Vec<Vec<f64>>,
    head_b: [f64; HEAD_OUTPUTS],
    ties: usize,
    /// `(prototype, F_pro)` per member, for the bank refresh.
    assigned: Vec<(usize, Embedding)>,
}

/// Losses and per-component gradients at the current parameters.
pub(crate) struct Evaluation {
    pub losses: [f64; 3],
    pub grads: [Grads; 3],
    pub ties: usize,
    pub assigned: Vec<(usize, Embedding)>,
}

impl Evaluation {
    pub fn combined(&self, weights: [f64; 3], template: &TrainState) -> Grads {
        let mut g = Grads::zeros(template);
        for (w, c) in weights.iter().zip(&self.grads) {
            g.add_scaled(*w, c);
        }
        g
    }
}

fn head_backward(
    head: &BoxHeadParams,
    x: &[f64],
    dz: &[f64; HEAD_OUTPUTS],
    p: &mut Partial,
) -> Vec<f64> {
    if p.head_w.is_empty() {
        p.head_w = vec![vec![0.0; x.len()]; HEAD_OUTPUTS];
    }
    let mut dx = vec![0.0; x.len()];
    for r in 0..HEAD_OUTPUTS {
        if dz[r] == 0.0 {
            continue;
        }
        axpy(&mut p.head_w[r], dz[r], x);
        p.head_b[r] += dz[r];
        axpy(&mut dx, dz[r], &head.weights[r]);
    }
    dx
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Data,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(world: &World, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = world.dim();
        let mut persons = Vec::new();
        let mut scenes = Vec::new();
        let mut labeled = Vec::new();
        let mut visual = Vec::new();
        let mut text = Vec::new();
        for scene in world.main_scenes() {
            let mut ids = Vec::new();
            for p in &scene.persons {
                let idx = persons.len();
                let lab = match (&p.identity, &p.description) {
                    (Some(_), Some(d)) => {
                        labeled.push(idx);
                        text.push(d.clone());
                        Some(labeled.len() - 1)
                    }
                    _ => None,
                };
                persons.push(PersonRef {
                    gt: p.bbox,
                    identity: p.identity,
                    labeled: lab,
                });
                visual.push(p.appearance.clone());
                ids.push(idx);
            }
            scenes.push(ids);
        }
        if labeled.is_empty() {
            return Err(Error::arg("training needs at least one labeled person"));
        }
        let mut occurrences: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, &i) in labeled.iter().enumerate() {
            occurrences
                .entry(persons[i].identity.expect("labeled"))
                .or_default()
                .push(k);
        }
        let depth = occurrences.values().map(Vec::len).max().unwrap_or(0);
        let groups: Vec<Vec<usize>> = (0..depth)
            .map(|g| {
                occurrences
                    .values()
                    .filter_map(|occ| occ.get(g).copied())
                    .collect()
            })
            .collect();

        let seed = world.config.seed;
        let mut rng = rng_for(seed, stream::TRAIN, 0);
        let slot_bank = PrototypeBank::random(
            (scenes.len() * cfg.background_slots).max(1),
            dim,
            0.0,
            &mut rng,
        )?;
        let slots = slot_bank.prototypes()[..scenes.len() * cfg.background_slots].to_vec();
        let bank = PrototypeBank::random(
            cfg.num_prototypes,
            dim,
            cfg.bank_momentum,
            &mut rng_for(seed, stream::TRAIN, 1),
        )?;
        let mut lut = LookupTable::new(
            cfg.lut_momentum,
            DEFAULT_LUT_CAPACITY.max(occurrences.len()),
        )?;
        for (&id, occ) in &occurrences {
            let mut mean = vec![0.0; dim];
            for &k in occ {
                axpy(&mut mean, 1.0, &visual[labeled[k]].normalized()?);
            }
            lut.insert(id, &Embedding::new(mean).normalized()?)?;
        }
        let state = TrainState {
            step: 0,
            lr: cfg.lr,
            visual,
            text,
            slots,
            mu: cfg.mu,
            mue_head: BoxHeadParams::zeros(dim),
            pud_head: BoxHeadParams::zeros(dim),
            weights: LossWeights::new(cfg.weights)?,
            bank,
            lut,
            cq: CircularQueue::new(cfg.queue_capacity)?,
            loss_history: Vec::new(),
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            data: Data {
                persons,
                scenes,
                reid_groups: if cfg.reid_per_identity == 0 {
                    vec![(0..labeled.len()).collect()]
                } else {
                    let k = cfg.reid_per_identity;
                    (0..depth.div_ceil(k))
                        .map(|g| {
                            occurrences
                                .values()
                                .flat_map(|occ| occ.iter().skip(g * k).take(k).copied())
                                .collect()
                        })
                        .collect()
                },
                labeled,
                groups,
            },
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn scene_mue(&self, s: usize) -> Result<Partial> {
        let st = &self.state;
        let members = &self.data.scenes[s];
        let nb = self.cfg.background_slots;
        let feats: Vec<&Embedding> = members
            .iter()
            .map(|&i| &st.visual[i])
            .chain(st.slots[s * nb..(s + 1) * nb].iter())
            .collect();
        let gts: Vec<BBox> = members.iter().map(|&i| self.data.persons[i].gt).collect();
        let cfg = &self.cfg;
        let logits: Vec<[f64; HEAD_OUTPUTS]> = feats
            .iter()
            .map(|x| {
                let mut z = st.mue_head.logits(x);
                if cfg.norm_confidence {
                    z[4] = (x.norm() - cfg.norm_offset) / cfg.norm_scale;
                }
                z
            })
            .collect();
        let preds = logits
            .iter()
            .map(|z| {
                Ok(Prediction {
                    bbox: decode_box(z)?.bbox,
                    class_logits: [z[4], 0.0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mg = mue_grad(&preds, &gts, &self.cfg.mue)?;
        let mut p = Partial {
            loss: mg.loss,
            ties: usize::from(mg.at_tie),
            ..Partial::default()
        };
        for (k, x) in feats.iter().enumerate() {
            let mut dz = decode_box_backward(&logits[k], &mg.d_boxes[k]);
            let d_class = mg.d_logits[k][0];
            if !cfg.norm_confidence {
                dz[4] += d_class;
            }
            let mut dx = head_backward(&st.mue_head, x, &dz, &mut p);
            let n = x.norm();
            if cfg.norm_confidence && n > 0.0 {
                axpy(&mut dx, d_class / (cfg.norm_scale * n), x);
            }
            if k < members.len() {
                p.visual.push((members[k], dx));
            } else {
                p.slots.push((s * nb + k - members.len(), dx));
            }
        }
        Ok(p)
    }

    fn group_pud(&self, group: &[usize]) -> Result<Partial> {
        let st = &self.state;
        let cfg = &self.cfg;
        let mu = ScaleParam::new(st.mu)?;
        let mu2 = st.mu * st.mu;
        let mut p = Partial::default();
        let mut queries = Vec::with_capacity(group.len());
        let mut texts = Vec::with_capacity(group.len());
        let mut fwd = Vec::with_capacity(group.len());
        for &k in group {
            let i = self.data.labeled[k];
            let v = &st.visual[i];
            let w = &st.text[k];
            let salient = cross_attend(std::slice::from_ref(v), std::slice::from_ref(w))?;
            let t = region_scale(std::slice::from_ref(v), &salient, mu)?[0];
            let f_pro = augment(std::slice::from_ref(v), &[t])?.remove(0);
            let f_multi = fuse_multimodal(
                std::slice::from_ref(&f_pro),
                std::slice::from_ref(w),
                cfg.fuse_temperature,
            )?
            .remove(0);
            let j = st.bank.assign(&f_pro)?;
            let proto = st.bank.prototype(j);
            let q: Vec<f64> = if cfg.instance_prototypes {
                proto.iter().zip(f_pro.iter()).map(|(a, b)| a + b).collect()
            } else {
                proto.to_vec()
            };
            queries.push(Embedding::new(q));
            texts.push(w.clone());
            let z = st.pud_head.logits(&f_multi);
            let pred = decode_box(&z)?.bbox;
            p.assigned.push((j, f_pro.clone()));
            fwd.push((i, k, t, f_pro, f_multi, z, pred));
        }
        let pg = ptc_grad(&queries, &texts, cfg.ptc_temperature)?;
        let preds: Vec<BBox> = fwd.iter().map(|f| f.6).collect();
        let gts: Vec<BBox> = fwd.iter().map(|f| self.data.persons[f.0].gt).collect();
        let mut cost = Vec::with_capacity(preds.len() * gts.len());
        for a in &preds {
            for b in &gts {
                cost.push(box_loss(a, b)?);
            }
        }
        let matching = solve_assignment(&CostMatrix::new(preds.len(), gts.len(), cost)?);
        p.loss = pud_loss(pg.loss, &preds, &gts)?;
        let mut d_multi: Vec<Vec<f64>> = vec![Vec::new(); fwd.len()];
        for &(r, c) in &matching.pairs {
            let bg = box_loss_grad(&preds[r], &gts[c])?;
            p.ties += usize::from(bg.at_tie);
            let dz = decode_box_backward(&fwd[r].5, &bg.grad);
            d_multi[r] = head_backward(&st.pud_head, &fwd[r].4, &dz, &mut p);
        }
        for (m, (i, k, t, f_pro, _, _, _)) in fwd.iter().enumerate() {
            let v = &st.visual[*i];
            let w = &st.text[*k];
            let dim = v.len();
            let mut d_fpro = if cfg.instance_prototypes {
                pg.d_rows[m].clone()
            } else {
                vec![0.0; dim]
            };
            let mut dw = pg.d_cols[m].clone();
            if !d_multi[m].is_empty() {
                for d in 0..dim {
                    let th = f_pro[d].tanh();
                    d_fpro[d] += d_multi[m][d] * w[d] * (1.0 - th * th);
                    dw[d] += d_multi[m][d] * th;
                }
            }
            let mut dv: Vec<f64> = d_fpro.iter().map(|g| t * g).collect();
            let d_t: f64 = d_fpro.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let s = cosine(v, w);
            let ds = d_t * t / (2.0 * mu2);
            p.mu += d_t * t * (1.0 - s) / (mu2 * st.mu);
            let (gv, gw) = cosine_grad(v, w);
            axpy(&mut dv, ds, &gv);
            axpy(&mut dw, ds, &gw);
            p.visual.push((*i, dv));
            p.text.push((*k, dw));
        }
        Ok(p)
    }

    fn group_reid(&self, group: &[usize]) -> Result<Partial> {
        let st = &self.state;
        let cfg = &self.cfg;
        let idx: Vec<usize> = group.iter().map(|&k| self.data.labeled[k]).collect();
        let vis: Vec<Embedding> = idx.iter().map(|&i| st.visual[i].clone()).collect();
        let txt: Vec<Embedding> = group.iter().map(|&k| st.text[k].clone()).collect();
        let ids: Vec<u64> = idx
            .iter()
            .map(|&i| self.data.persons[i].identity.expect("labeled"))
            .collect();
        let positives: Vec<Vec<bool>> = ids
            .iter()
            .map(|a| ids.iter().map(|b| a == b).collect())
            .collect();
        let sdm = sdm_kl_grad(&vis, &txt, &positives, &cfg.temperatures)?;
        let inf = infonce_grad(&vis, &txt, cfg.temperatures.itc)?;
        let b = group.len() as f64;
        let mut nae = 0.0;
        let mut p = Partial::default();
        for m in 0..group.len() {
            let mut dv = sdm.d_rows[m].clone();
            axpy(&mut dv, 1.0, &inf.d_rows[m]);
            let mut dw = sdm.d_cols[m].clone();
            axpy(&mut dw, 1.0, &inf.d_cols[m]);
            let (l, g) = oim_grad(&vis[m], ids[m], &st.lut, &st.cq, cfg.oim_temperature)?;
            nae += l / b;
            axpy(&mut dv, 1.0 / b, &g);
            if cfg.text_updates_lut {
                let (l, g) = oim_grad(&txt[m], ids[m], &st.lut, &st.cq, cfg.oim_temperature)?;
                nae += l / b;
                axpy(&mut dw, 1.0 / b, &g);
            }
            p.visual.push((idx[m], dv));
            p.text.push((group[m], dw));
        }
        p.loss = reid_loss(cfa_loss(sdm.loss, inf.loss), nae);
        Ok(p)
    }

    fn reduce(
        &self,
        parts: Vec<Partial>,
        head: Option<bool>,
    ) -> (f64, Grads, usize, Vec<(usize, Embedding)>) {
        let mut g = Grads::zeros(&self.state);
        let mut loss = 0.0;
        let mut ties = 0;
        let mut assigned = Vec::new();
        let count = parts.len().max(1);
        for p in parts {
            loss += p.loss;
            ties += p.ties;
            for (i, d) in &p.visual {
                axpy(&mut g.visual[*i], 1.0, d);
            }
            for (k, d) in &p.text {
                axpy(&mut g.text[*k], 1.0, d);
            }
            for (k, d) in &p.slots {
                axpy(&mut g.slots[*k], 1.0, d);
            }
            g.mu += p.mu;
            if !p.head_w.is_empty() {
                let (w, b) = match head {
                    Some(true) => (&mut g.mue_w, &mut g.mue_b),
                    _ => (&mut g.pud_w, &mut g.pud_b),
                };
                for (dst, src) in w.iter_mut().zip(&p.head_w) {
                    axpy(dst, 1.0, src);
                }
                axpy(b, 1.0, &p.head_b);
            }
            assigned.extend(p.assigned);
        }
        let k = 1.0 / count as f64;
        let mut mean = Grads::zeros(&self.state);
        mean.add_scaled(k, &g);
        (loss * k, mean, ties, assigned)
    }

    /// Component losses and gradients at the current parameters; scenes and
    /// groups run in parallel and are reduced in index order.
    pub(crate) fn evaluate(&self) -> Result<Evaluation> {
        let mue_parts = (0..self.data.scenes.len())
            .into_par_iter()
            .map(|s| self.scene_mue(s))
            .collect::<Result<Vec<_>>>()?;
        let pud_parts = self
            .data
            .groups
            .par_iter()
            .map(|g| self.group_pud(g))
            .collect::<Result<Vec<_>>>()?;
        let reid_parts = self
            .data
            .reid_groups
            .par_iter()
            .map(|g| self.group_reid(g))
            .collect::<Result<Vec<_>>>()?;
        let (l_mue, g_mue, t1, _) = self.reduce(mue_parts, Some(true));
        let (l_pud, g_pud, t2, assigned) = self.reduce(pud_parts, Some(false));
        let (l_reid, g_reid, t3, _) = self.reduce(reid_parts, None);
        Ok(Evaluation {
            losses: [l_mue, l_pud, l_reid],
            grads: [g_mue, g_pud, g_reid],
            ties: t1 + t2 + t3,
            assigned,
        })
    }

    /// Davies-Bouldin indices of the normalized labeled image and text
    /// features.
    pub fn db_indices(&self) -> Result<(f64, f64)> {
        let labels: Vec<u64> = self
            .data
            .labeled
            .iter()
            .map(|&i| self.data.persons[i].identity.expect("labeled"))
            .collect();
        let img = self
            .data
            .labeled
            .iter()
            .map(|&i| self.state.visual[i].normalized())
            .collect::<Result<Vec<_>>>()?;
        let txt = self
            .state
            .text
            .iter()
            .map(Embedding::normalized)
            .collect::<Result<Vec<_>>>()?;
        Ok((
            davies_bouldin(&img, &labels)?,
            davies_bouldin(&txt, &labels)?,
        ))
    }

    fn record(&self, eval: &Evaluation, l_total: f64) -> Result<TrainRecord> {
        let (db_image, db_text) = self.db_indices()?;
        let a = self.state.weights.alphas();
        Ok(TrainRecord {
            step: self.state.step,
            l_total,
            l_mue: eval.losses[0],
            l_pud: eval.losses[1],
            l_reid: eval.losses[2],
            alpha_mue: a[0],
            alpha_pud: a[1],
            alpha_reid: a[2],
            db_image,
            db_text,
            ties: eval.ties,
        })
    }

    fn diverged(&self, detail: impl Into<String>) -> Error {
        Error::Diverged {
            step: self.state.step,
            detail: detail.into(),
        }
    }

    /// Evaluates, updates the weights and parameters, refreshes the memories
    /// and returns the weighted total loss of this step. A zero learning rate
    /// evaluates only and leaves every piece of state untouched.
    pub fn step(&mut self) -> Result<(f64, Option<TrainRecord>)> {
        let eval = self.evaluate()?;
        if eval.losses.iter().any(|l| !l.is_finite()) {
            return Err(self.diverged(format!("non-finite loss {:?}", eval.losses)));
        }
        let wants_record = self.state.step.is_multiple_of(self.cfg.record_every);
        if self.state.lr == 0.0 {
            let total = total_loss_with(eval.losses, self.state.weights.alphas())?;
            let rec = if wants_record {
                Some(self.record(&eval, total)?)
            } else {
                None
            };
            self.state.loss_history.push(total);
            self.state.step += 1;
            return Ok((total, rec));
        }
        self.state.weights.observe(eval.losses)?;
        let total = total_loss_with(eval.losses, self.state.weights.alphas())?;
        let rec = if wants_record {
            Some(self.record(&eval, total)?)
        } else {
            None
        };
        let g = eval.combined(self.state.weights.normalized(), &self.state);
        let lr = self.state.lr;
        let st = &mut self.state;
        for (dst, src) in [
            (&mut st.visual, &g.visual),
            (&mut st.text, &g.text),
            (&mut st.slots, &g.slots),
        ] {
            for (x, d) in dst.iter_mut().zip(src) {
                axpy(x, -lr, d);
            }
        }
        for (head, gw, gb) in [
            (&mut st.mue_head, &g.mue_w, &g.mue_b),
            (&mut st.pud_head, &g.pud_w, &g.pud_b),
        ] {
            for (w, d) in head.weights.iter_mut().zip(gw) {
                axpy(w, -lr, d);
            }
            axpy(&mut head.bias, -lr, gb);
        }
        st.mu = (st.mu - lr * g.mu).max(MU_FLOOR);
        if !st.is_finite() {
            return Err(self.diverged("non-finite parameters after update"));
        }
        if !eval.assigned.is_empty() {
            self.state.bank.update(&eval.assigned)?;
        }
        for (k, &i) in self.data.labeled.iter().enumerate() {
            let id = self.data.persons[i].identity.expect("labeled");
            lut_update(
                &mut self.state.lut,
                id,
                &self.state.visual[i].normalized()?,
                self.cfg.lut_momentum,
            )?;
            if self.cfg.text_updates_lut {
                lut_update(
                    &mut self.state.lut,
                    id,
                    &self.state.text[k].normalized()?,
                    self.cfg.lut_momentum,
                )?;
            }
        }
        for (i, p) in self.data.persons.iter().enumerate() {
            if p.labeled.is_none() {
                let f = self.state.visual[i].normalized()?;
                self.state.cq.push(f)?;
            }
        }
        self.state.loss_history.push(total);
        self.state.step += 1;
        Ok((total, rec))
    }

    /// Record at the current parameters without updating anything.
    pub fn snapshot(&self) -> Result<TrainRecord> {
        let eval = self.evaluate()?;
        if eval.losses.iter().any(|l| !l.is_finite()) {
            return Err(self.diverged(format!("non-finite loss {:?}", eval.losses)));
        }
        let total = total_loss_with(eval.losses, self.state.weights.alphas())?;
        self.record(&eval, total)
    }
}

/// Runs `steps` updates, recording every `record_every` steps and once more
/// after the last step.
pub fn train_toy(world: &World, cfg: &TrainConfig, steps: usize) -> Result<TrainRun> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    let mut trainer = Trainer::new(world, cfg)?;
    let mut records = Vec::new();
    for _ in 0..steps {
        if let (_, Some(r)) = trainer.step()? {
            records.push(r);
        }
    }
    records.push(trainer.snapshot()?);
    Ok(TrainRun {
        state: trainer.state,
        records,
    })
}
