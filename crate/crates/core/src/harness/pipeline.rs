use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fusion::{fuse_candidates, select_final, FinalDetection, ScoredCandidate, Source};
use crate::geometry::BBox;
use crate::linalg::{cosine, Embedding};
use crate::metrics::{GroundTruth, QueryResult, RankedEntry};
use crate::pud::{cross_attend, region_scale, PrototypeBank, ScaleParam};
use crate::reid::nae_split;
use crate::synth::{generate_proposals, rng_for, stream, Query, World};

use super::config::{ModelConfig, Toggles};

/// Orthogonal map `W` minimizing `sum |W t - v|^2` over (text, visual) pairs.
pub fn fit_alignment(pairs: &[(&Embedding, &Embedding)]) -> Result<DMatrix<f64>> {
    let dim = pairs
        .first()
        .ok_or_else(|| Error::arg("alignment needs at least one pair"))?
        .0
        .dim();
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for (t, v) in pairs {
        if t.dim() != dim || v.dim() != dim {
            return Err(Error::shape("alignment pairs differ in dimension"));
        }
        m += DVector::from_column_slice(v) * DVector::from_column_slice(t).transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::arg("alignment decomposition failed")),
    };
    Ok(u * vt)
}

#[derive(Debug, Clone)]
struct Feature {
    bbox: BBox,
    det_conf: f64,
    direction: Embedding,
    /// `normalize(direction + nearest prototype)`.
    refined: Embedding,
}

#[derive(Debug, Clone)]
struct SceneFeatures {
    mue: Vec<Feature>,
    pud: Vec<Feature>,
}

/// A world with its fitted alignment, prototype bank and per-scene proposal
/// features. Immutable once built; shared read-only across grid points.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub world: World,
    pub alignment: DMatrix<f64>,
    pub bank: PrototypeBank,
    features: Vec<SceneFeatures>,
}

fn fit_bank(world: &World, model: &ModelConfig) -> Result<PrototypeBank> {
    let data: Vec<&Embedding> = world
        .main_scenes()
        .flat_map(|s| s.persons.iter().map(|p| &p.appearance))
        .collect();
    let mut rng = rng_for(world.config.seed, stream::BANK, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut protos: Vec<Embedding> = order
        .iter()
        .take(model.num_prototypes)
        .map(|&i| data[i].clone())
        .collect();
    if protos.len() < model.num_prototypes {
        let extra = PrototypeBank::random(
            model.num_prototypes - protos.len(),
            world.dim(),
            0.0,
            &mut rng,
        )?;
        protos.extend(extra.prototypes().iter().cloned());
    }
    let mut bank = PrototypeBank::from_prototypes(protos, model.bank_momentum)?;
    for _ in 0..model.bank_epochs {
        for scene in world.main_scenes() {
            let assigned = scene
                .persons
                .iter()
                .map(|p| Ok((bank.assign(&p.appearance)?, p.appearance.clone())))
                .collect::<Result<Vec<_>>>()?;
            bank.update(&assigned)?;
        }
    }
    Ok(bank)
}

impl Prepared {
    pub fn new(world: World, model: &ModelConfig) -> Result<Self> {
        model.validate()?;
        let pairs: Vec<(&Embedding, &Embedding)> = world
            .main_scenes()
            .flat_map(|s| s.persons.iter())
            .filter_map(|p| p.description.as_ref().map(|d| (d, &p.appearance)))
            .collect();
        let alignment = fit_alignment(&pairs)?;
        let bank = fit_bank(&world, model)?;
        let (a, b) = (
            world.config.feature_norm_offset,
            world.config.feature_norm_scale,
        );
        let features = world
            .scenes
            .par_iter()
            .map(|scene| {
                let props = generate_proposals(scene, &world.config)?;
                let convert = |list: &[crate::synth::Proposal]| -> Result<Vec<Feature>> {
                    list.iter()
                        .map(|p| {
                            let (det_conf, direction) = nae_split(&p.feature, a, b)?;
                            let proto = bank.prototype(bank.assign(&direction)?);
                            let sum: Vec<f64> = direction
                                .iter()
                                .zip(proto.iter())
                                .map(|(x, y)| x + y)
                                .collect();
                            let refined = Embedding::new(sum)
                                .normalized()
                                .unwrap_or_else(|_| direction.clone());
                            Ok(Feature {
                                bbox: p.bbox,
                                det_conf,
                                direction,
                                refined,
                            })
                        })
                        .collect()
                };
                Ok(SceneFeatures {
                    mue: convert(&props.mue)?,
                    pud: convert(&props.pud)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            world,
            alignment,
            bank,
            features,
        })
    }

    /// Query text mapped into the visual space.
    pub fn aligned_query(&self, q: &Query) -> Result<Embedding> {
        let v = &self.alignment * DVector::from_column_slice(&q.text);
        Embedding::new(v.iter().copied().collect()).normalized()
    }

    fn gate(
        &self,
        det_conf: f64,
        relevance: f64,
        toggles: &Toggles,
        model: &ModelConfig,
    ) -> Option<f64> {
        let relevance = relevance.clamp(0.0, 1.0);
        if toggles.nae {
            Some(det_conf * relevance)
        } else if det_conf >= model.detection_threshold {
            Some(relevance)
        } else {
            None
        }
    }

    fn mue_candidates(
        &self,
        feats: &[Feature],
        q: &Embedding,
        toggles: &Toggles,
        model: &ModelConfig,
    ) -> Vec<ScoredCandidate> {
        feats
            .iter()
            .filter_map(|f| {
                let rel = cosine(&f.direction, q).max(0.0);
                self.gate(f.det_conf, rel, toggles, model)
                    .map(|c| ScoredCandidate {
                        bbox: f.bbox,
                        confidence: c,
                        source: Source::Mue,
                    })
            })
            .collect()
    }

    fn pud_candidates(
        &self,
        feats: &[Feature],
        q: &Embedding,
        toggles: &Toggles,
        model: &ModelConfig,
    ) -> Result<Vec<ScoredCandidate>> {
        if feats.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Embedding> = feats
            .iter()
            .map(|f| {
                if toggles.instance_prototypes {
                    f.refined.clone()
                } else {
                    f.direction.clone()
                }
            })
            .collect();
        let salient = cross_attend(&rows, std::slice::from_ref(q))?;
        let scales = region_scale(&rows, &salient, ScaleParam::new(model.mu)?)?;
        Ok(feats
            .iter()
            .zip(scales)
            .filter_map(|(f, t)| {
                self.gate(f.det_conf, t, toggles, model)
                    .map(|c| ScoredCandidate {
                        bbox: f.bbox,
                        confidence: c,
                        source: Source::Pud,
                    })
            })
            .collect())
    }

    /// Ranked detections of one scene for an aligned query.
    fn scene_entries(
        &self,
        scene_id: u64,
        q: &Embedding,
        toggles: &Toggles,
        beta: f64,
        model: &ModelConfig,
    ) -> Result<Vec<RankedEntry>> {
        let feats = &self.features[scene_id as usize];
        let mue = if toggles.mue {
            self.mue_candidates(&feats.mue, q, toggles, model)
        } else {
            Vec::new()
        };
        let pud = if toggles.pud {
            self.pud_candidates(&feats.pud, q, toggles, model)?
        } else {
            Vec::new()
        };
        let entry = |bbox: BBox, score: f64| RankedEntry {
            gallery_id: scene_id,
            bbox,
            score,
        };
        if !(toggles.mue && toggles.pud) {
            return Ok(mue
                .iter()
                .chain(&pud)
                .map(|c| entry(c.bbox, c.confidence))
                .collect());
        }
        let fused = fuse_candidates(&mue, &pud, model.fusion_iou, beta)?;
        if !fused.is_empty() {
            return Ok(fused.iter().map(|f| entry(f.bbox, f.score)).collect());
        }
        Ok(match select_final(&fused, &mue, &pud, beta)? {
            FinalDetection::NoDetection => Vec::new(),
            d => vec![entry(
                d.bbox().expect("detection"),
                d.score().expect("detection"),
            )],
        })
    }

    /// Ranked gallery detections and ground truth for one query.
    pub fn score_query(
        &self,
        query: &Query,
        toggles: &Toggles,
        beta: f64,
        gallery_size: usize,
        model: &ModelConfig,
    ) -> Result<QueryResult> {
        toggles.validate()?;
        let q = self.aligned_query(query)?;
        let gallery = self.world.gallery(query, gallery_size)?;
        let mut ranked = Vec::new();
        let mut ground_truth = Vec::new();
        for &sid in &gallery {
            ranked.extend(self.scene_entries(sid, &q, toggles, beta, model)?);
            ground_truth.extend(self.world.scene(sid).boxes_of(query.target).map(|bbox| {
                GroundTruth {
                    gallery_id: sid,
                    bbox,
                }
            }));
        }
        QueryResult::new(query.id, ranked, ground_truth)
    }
}
