//! Deterministic synthetic worlds: identities, scenes, queries and detection
//! proposals.
//!
//! Every random draw flows from [`GenConfig::seed`] through named sub-seeds,
//! so scene `k` is identical no matter how many scenes are generated.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ScoredCandidate, Source};
use crate::geometry::{iou, BBox};
use crate::linalg::{normalize_in_place, Embedding};

/// Smallest side length of an emitted box.
pub const MIN_EXTENT: f64 = 1e-3;
/// Confidences are clamped to `[CONF_EPS, 1 - CONF_EPS]` before being encoded
/// in a feature norm.
pub const CONF_EPS: f64 = 1e-6;
const PLACEMENT_TRIES: usize = 100;
const MAX_PLACEMENT_IOU: f64 = 0.3;
const FORMAT_VERSION: u32 = 1;

/// Named sub-seed streams.
pub mod stream {
    pub const IDENTITY: u64 = 1;
    pub const MODALITY: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const QUERY: u64 = 4;
    pub const MUE: u64 = 5;
    pub const PUD: u64 = 6;
    pub const GALLERY: u64 = 7;
    pub const BANK: u64 = 8;
    pub const TRAIN: u64 = 9;
    pub const GRADCHECK: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Platform-independent seed for item `index` of stream `stream`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ stream) ^ index)
}

pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Parameters of one proposal channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub miss_rate: f64,
    /// Expected false positives per ground-truth person.
    pub fp_rate: f64,
    /// Per-corner localization jitter.
    pub sigma_box: f64,
    pub conf_base: f64,
    /// Confidence gain per unit of IoU with the nearest ground truth.
    pub conf_iou_gain: f64,
    pub conf_noise: f64,
    /// Per-coordinate noise added to the appearance of a detected person.
    pub sigma_embed: f64,
}

impl ChannelConfig {
    fn validate(&self, name: &str) -> Result<()> {
        let field = |f: &str| format!("{name}.{f}");
        for (f, v) in [("miss_rate", self.miss_rate), ("fp_rate", self.fp_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field(f), format!("{v} outside [0, 1]")));
            }
        }
        for (f, v) in [
            ("sigma_box", self.sigma_box),
            ("conf_noise", self.conf_noise),
            ("sigma_embed", self.sigma_embed),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    field(f),
                    format!("{v} must be finite and >= 0"),
                ));
            }
        }
        for (f, v) in [
            ("conf_base", self.conf_base),
            ("conf_iou_gain", self.conf_iou_gain),
        ] {
            if !v.is_finite() {
                return Err(Error::config(field(f), "must be finite"));
            }
        }
        Ok(())
    }
}

/// Detector-like channel: high recall, noisy confidence.
impl ChannelConfig {
    pub fn mue_default() -> Self {
        ChannelConfig {
            miss_rate: 0.05,
            fp_rate: 0.3,
            sigma_box: 0.01,
            conf_base: 0.2,
            conf_iou_gain: 0.7,
            conf_noise: 0.25,
            sigma_embed: 0.2,
        }
    }

    /// Text-conditioned channel: lower recall, fewer false positives.
    pub fn pud_default() -> Self {
        ChannelConfig {
            miss_rate: 0.15,
            fp_rate: 0.1,
            sigma_box: 0.01,
            conf_base: 0.2,
            conf_iou_gain: 0.7,
            conf_noise: 0.1,
            sigma_embed: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub dim: usize,
    pub num_identities: usize,
    /// Scenes that contain labeled identities.
    pub num_scenes: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Probability that a person slot holds an unlabeled bystander.
    pub background_rate: f64,
    pub sigma_visual: f64,
    pub sigma_text: f64,
    /// Apply a seeded orthogonal map between visual and text latents.
    pub modality_gap: bool,
    pub queries_per_identity: usize,
    /// Largest gallery the world must support; bystander-only scenes pad the
    /// world up to this many scenes.
    pub gallery_size: usize,
    pub mue: ChannelConfig,
    pub pud: ChannelConfig,
    /// Raw proposal feature norm is `offset + scale * logit(confidence)`.
    pub feature_norm_offset: f64,
    pub feature_norm_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            dim: 256,
            num_identities: 50,
            num_scenes: 200,
            min_persons: 1,
            max_persons: 4,
            background_rate: 0.2,
            sigma_visual: 0.05,
            sigma_text: 0.05,
            modality_gap: true,
            queries_per_identity: 2,
            gallery_size: 100,
            mue: ChannelConfig::mue_default(),
            pud: ChannelConfig::pud_default(),
            feature_norm_offset: 10.0,
            feature_norm_scale: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.num_identities == 0 {
            return Err(Error::config("num_identities", "must be positive"));
        }
        if self.num_scenes == 0 {
            return Err(Error::config("num_scenes", "must be positive"));
        }
        if self.min_persons == 0 {
            return Err(Error::config("min_persons", "must be positive"));
        }
        if self.max_persons < self.min_persons {
            return Err(Error::config("max_persons", "must be >= min_persons"));
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return Err(Error::config("background_rate", "outside [0, 1]"));
        }
        for (f, v) in [
            ("sigma_visual", self.sigma_visual),
            ("sigma_text", self.sigma_text),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(f, format!("{v} must be finite and >= 0")));
            }
        }
        if self.queries_per_identity == 0 {
            return Err(Error::config("queries_per_identity", "must be positive"));
        }
        if self.gallery_size == 0 {
            return Err(Error::config("gallery_size", "must be positive"));
        }
        self.mue.validate("mue")?;
        self.pud.validate("pud")?;
        if !(self.feature_norm_scale > 0.0 && self.feature_norm_scale.is_finite()) {
            return Err(Error::config(
                "feature_norm_scale",
                "must be finite and > 0",
            ));
        }
        let lowest = self.feature_norm_offset + self.feature_norm_scale * logit(CONF_EPS);
        if !(lowest > 0.0 && self.feature_norm_offset.is_finite()) {
            return Err(Error::config(
                "feature_norm_offset",
                "must keep every encoded feature norm positive",
            ));
        }
        Ok(())
    }

    /// Total scenes in the world: labeled scenes plus bystander-only padding.
    pub fn total_scenes(&self) -> usize {
        self.num_scenes.max(self.gallery_size)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    /// `None` for unlabeled bystanders.
    pub identity: Option<u64>,
    pub bbox: BBox,
    pub appearance: Embedding,
    /// Per-person text embedding, present for labeled persons.
    pub description: Option<Embedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    /// True for bystander-only padding scenes.
    pub distractor: bool,
    pub persons: Vec<Person>,
}

impl Scene {
    pub fn contains(&self, identity: u64) -> bool {
        self.persons.iter().any(|p| p.identity == Some(identity))
    }

    pub fn boxes_of(&self, identity: u64) -> impl Iterator<Item = BBox> + '_ {
        self.persons
            .iter()
            .filter(move |p| p.identity == Some(identity))
            .map(|p| p.bbox)
    }

    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.persons.iter().map(|p| p.bbox).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub target: u64,
    pub text: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: GenConfig,
    /// Unit-norm latent per identity, indexed by identity id.
    pub latents: Vec<Embedding>,
    /// Indexed by scene id.
    pub scenes: Vec<Scene>,
    pub queries: Vec<Query>,
}

/// Seeded orthogonal matrix: Q factor of a Gaussian matrix with the sign of
/// each column fixed by the diagonal of R.
pub fn orthogonal_map(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_for(seed, stream::MODALITY, 0);
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = m.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut v) > 0.0 {
            return v;
        }
    }
}

/// `normalize(base + N(0, sigma^2))`, redrawn in the measure-zero event of a
/// zero vector.
fn noisy_unit<R: Rng + ?Sized>(base: &[f64], sigma: f64, rng: &mut R) -> Embedding {
    loop {
        let mut v: Vec<f64> = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("sigma validated");
            base.iter().map(|b| b + rng.sample(n)).collect()
        } else {
            base.to_vec()
        };
        if normalize_in_place(&mut v) > 0.0 {
            return Embedding::new(v);
        }
    }
}

fn place_box<R: Rng + ?Sized>(existing: &[BBox], rng: &mut R) -> BBox {
    let mut candidate = None;
    for _ in 0..PLACEMENT_TRIES {
        let w = rng.random_range(0.08..0.2);
        let h = rng.random_range(0.25..0.6);
        let x1 = rng.random_range(0.0..1.0 - w);
        let y1 = rng.random_range(0.0..1.0 - h);
        let b = BBox::new(x1, y1, x1 + w, y1 + h).expect("placed inside the unit square");
        let crowded = existing
            .iter()
            .any(|e| iou(e, &b).expect("valid boxes") > MAX_PLACEMENT_IOU);
        candidate = Some(b);
        if !crowded {
            break;
        }
    }
    candidate.expect("at least one placement attempt")
}

/// Sorts, clamps to the unit square and widens to [`MIN_EXTENT`].
pub fn repair_box(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    fn axis(a: f64, b: f64) -> (f64, f64) {
        let lo = a.min(b).clamp(0.0, 1.0);
        let hi = a.max(b).clamp(0.0, 1.0);
        if hi - lo >= MIN_EXTENT {
            (lo, hi)
        } else if lo + MIN_EXTENT <= 1.0 {
            (lo, lo + MIN_EXTENT)
        } else {
            (1.0 - MIN_EXTENT, 1.0)
        }
    }
    let (x1, x2) = axis(x1, x2);
    let (y1, y2) = axis(y1, y2);
    BBox::new(x1, y1, x2, y2).expect("repaired box is valid")
}

fn generate_scene(
    config: &GenConfig,
    id: u64,
    latents: &[Embedding],
    text_latents: &[Vec<f64>],
) -> Scene {
    let mut rng = rng_for(config.seed, stream::SCENE, id);
    let distractor = id as usize >= config.num_scenes;
    let count = rng.random_range(config.min_persons..=config.max_persons);
    let mut persons: Vec<Person> = Vec::with_capacity(count);
    let mut boxes = Vec::with_capacity(count);
    for _ in 0..count {
        let bbox = place_box(&boxes, &mut rng);
        boxes.push(bbox);
        let labeled = !distractor && !rng.random_bool(config.background_rate);
        let identity = if labeled {
            let taken: Vec<u64> = persons.iter().filter_map(|p| p.identity).collect();
            let free: Vec<u64> = (0..config.num_identities as u64)
                .filter(|i| !taken.contains(i))
                .collect();
            if free.is_empty() {
                None
            } else {
                Some(free[rng.random_range(0..free.len())])
            }
        } else {
            None
        };
        let person = match identity {
            Some(ident) => Person {
                identity,
                bbox,
                appearance: noisy_unit(&latents[ident as usize], config.sigma_visual, &mut rng),
                description: Some(noisy_unit(
                    &text_latents[ident as usize],
                    config.sigma_text,
                    &mut rng,
                )),
            },
            None => {
                let latent = random_unit(config.dim, &mut rng);
                Person {
                    identity: None,
                    bbox,
                    appearance: noisy_unit(&latent, config.sigma_visual, &mut rng),
                    description: None,
                }
            }
        };
        persons.push(person);
    }
    Scene {
        id,
        distractor,
        persons,
    }
}

pub fn generate_world(config: &GenConfig) -> Result<World> {
    config.validate()?;
    let dim = config.dim;
    let latents: Vec<Embedding> = (0..config.num_identities as u64)
        .map(|i| {
            Embedding::new(random_unit(
                dim,
                &mut rng_for(config.seed, stream::IDENTITY, i),
            ))
        })
        .collect();
    let text_latents: Vec<Vec<f64>> = if config.modality_gap {
        let r = orthogonal_map(dim, config.seed);
        latents
            .iter()
            .map(|l| {
                let v = &r * nalgebra::DVector::from_column_slice(l);
                v.iter().copied().collect()
            })
            .collect()
    } else {
        latents.iter().map(|l| l.to_vec()).collect()
    };
    let scenes: Vec<Scene> = (0..config.total_scenes() as u64)
        .into_par_iter()
        .map(|id| generate_scene(config, id, &latents, &text_latents))
        .collect();
    let mut queries = Vec::new();
    for ident in 0..config.num_identities as u64 {
        if !scenes.iter().any(|s| s.contains(ident)) {
            continue;
        }
        for k in 0..config.queries_per_identity as u64 {
            let id = ident * config.queries_per_identity as u64 + k;
            let mut rng = rng_for(config.seed, stream::QUERY, id);
            queries.push(Query {
                id,
                target: ident,
                text: noisy_unit(&text_latents[ident as usize], config.sigma_text, &mut rng),
            });
        }
    }
    Ok(World {
        config: config.clone(),
        latents,
        scenes,
        queries,
    })
}

/// One detection proposal. The raw feature's norm encodes its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub confidence: f64,
    pub feature: Embedding,
    /// Index of the detected person within its scene; `None` for false positives.
    pub person: Option<usize>,
}

impl Proposal {
    pub fn candidate(&self, source: Source) -> ScoredCandidate {
        ScoredCandidate {
            bbox: self.bbox,
            confidence: self.confidence,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProposals {
    pub mue: Vec<Proposal>,
    pub pud: Vec<Proposal>,
}

fn channel_proposals(
    scene: &Scene,
    ch: &ChannelConfig,
    config: &GenConfig,
    stream_id: u64,
) -> Vec<Proposal> {
    let mut rng = rng_for(config.seed, stream_id, scene.id);
    let gts = scene.gt_boxes();
    let conf_noise = Normal::new(0.0, ch.conf_noise).expect("validated");
    let jitter = Normal::new(0.0, ch.sigma_box).expect("validated");
    let mut out = Vec::new();
    let mut emit =
        |bbox: BBox, direction: Embedding, person: Option<usize>, rng: &mut ChaCha8Rng| {
            let nearest = gts
                .iter()
                .map(|g| iou(&bbox, g).expect("valid boxes"))
                .fold(0.0, f64::max);
            let noise = if ch.conf_noise > 0.0 {
                rng.sample(conf_noise)
            } else {
                0.0
            };
            let confidence = (ch.conf_base + ch.conf_iou_gain * nearest + noise).clamp(0.0, 1.0);
            let encoded = confidence.clamp(CONF_EPS, 1.0 - CONF_EPS);
            let norm = config.feature_norm_offset + config.feature_norm_scale * logit(encoded);
            out.push(Proposal {
                bbox,
                confidence,
                feature: direction.scaled(norm),
                person,
            });
        };
    for (idx, person) in scene.persons.iter().enumerate() {
        if !rng.random_bool(1.0 - ch.miss_rate) {
            continue;
        }
        let b = person.bbox;
        let mut j = || {
            if ch.sigma_box > 0.0 {
                rng.sample(jitter)
            } else {
                0.0
            }
        };
        let (d1, d2, d3, d4) = (j(), j(), j(), j());
        let bbox = repair_box(b.x1 + d1, b.y1 + d2, b.x2 + d3, b.y2 + d4);
        let direction = noisy_unit(&person.appearance, ch.sigma_embed, &mut rng);
        emit(bbox, direction, Some(idx), &mut rng);
    }
    for _ in 0..scene.persons.len() {
        if !rng.random_bool(ch.fp_rate) {
            continue;
        }
        let bbox = place_box(&[], &mut rng);
        let direction = Embedding::new(random_unit(config.dim, &mut rng));
        emit(bbox, direction, None, &mut rng);
    }
    out
}

/// Proposals of both channels for one scene, drawn from independent streams.
pub fn generate_proposals(scene: &Scene, config: &GenConfig) -> Result<SceneProposals> {
    config.validate()?;
    for p in &scene.persons {
        p.bbox.validate()?;
    }
    Ok(SceneProposals {
        mue: channel_proposals(scene, &config.mue, config, stream::MUE),
        pud: channel_proposals(scene, &config.pud, config, stream::PUD),
    })
}

impl World {
    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn scene(&self, id: u64) -> &Scene {
        &self.scenes[id as usize]
    }

    /// Labeled scenes (non-distractors).
    pub fn main_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.scenes.iter().filter(|s| !s.distractor)
    }

    /// Scene ids searched for `query` with a nominal gallery of `size` scenes.
    ///
    /// All scenes containing the target are included; negatives fill the
    /// remaining `size - positives` slots, main-scene negatives first in a
    /// seeded order, then distractor scenes by id. Galleries for growing
    /// `size` are nested.
    pub fn gallery(&self, query: &Query, size: usize) -> Result<Vec<u64>> {
        if size > self.scenes.len() {
            return Err(Error::arg(format!(
                "gallery of {size} scenes exceeds the world's {} scenes",
                self.scenes.len()
            )));
        }
        let positives: Vec<u64> = self
            .scenes
            .iter()
            .filter(|s| s.contains(query.target))
            .map(|s| s.id)
            .collect();
        let mut main_neg: Vec<(u64, u64)> = self
            .main_scenes()
            .filter(|s| !s.contains(query.target))
            .map(|s| {
                let key = derive_seed(
                    self.config.seed,
                    stream::GALLERY,
                    query.id.wrapping_mul(1 << 32) ^ s.id,
                );
                (key, s.id)
            })
            .collect();
        main_neg.sort_unstable();
        let negatives = main_neg
            .into_iter()
            .map(|(_, id)| id)
            .chain(self.scenes.iter().filter(|s| s.distractor).map(|s| s.id));
        let need = size.saturating_sub(positives.len());
        let mut ids = positives;
        ids.extend(negatives.take(need));
        Ok(ids)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Record::Header {
            version: FORMAT_VERSION,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (id, latent) in self.latents.iter().enumerate() {
            serde_json::to_writer(
                &mut out,
                &Record::Identity {
                    id: id as u64,
                    latent: latent.clone(),
                },
            )?;
            out.write_all(b"\n")?;
        }
        for scene in &self.scenes {
            serde_json::to_writer(&mut out, &Record::Scene(scene.clone()))?;
            out.write_all(b"\n")?;
        }
        for query in &self.queries {
            serde_json::to_writer(&mut out, &Record::Query(query.clone()))?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<World> {
        let mut config = None;
        let mut latents = Vec::new();
        let mut scenes = Vec::new();
        let mut queries = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<Record>(&line)? {
                Record::Header { version, config: c } => {
                    if version != FORMAT_VERSION {
                        return Err(Error::arg(format!("unsupported dataset version {version}")));
                    }
                    if config.is_some() {
                        return Err(Error::arg(format!(
                            "duplicate header at line {}",
                            lineno + 1
                        )));
                    }
                    c.validate()?;
                    config = Some(c);
                }
                Record::Identity { id, latent } => {
                    if id as usize != latents.len() {
                        return Err(Error::arg(format!("identity {id} out of order")));
                    }
                    latents.push(latent);
                }
                Record::Scene(s) => {
                    if s.id as usize != scenes.len() {
                        return Err(Error::arg(format!("scene {} out of order", s.id)));
                    }
                    scenes.push(s);
                }
                Record::Query(q) => queries.push(q),
            }
        }
        let config = config.ok_or_else(|| Error::arg("dataset has no header record"))?;
        let world = World {
            config,
            latents,
            scenes,
            queries,
        };
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.latents.len() != c.num_identities {
            return Err(Error::arg("identity count disagrees with header"));
        }
        if self.scenes.len() != c.total_scenes() {
            return Err(Error::arg("scene count disagrees with header"));
        }
        for s in &self.scenes {
            for p in &s.persons {
                p.bbox.validate()?;
                if p.appearance.dim() != c.dim {
                    return Err(Error::shape(format!(
                        "appearance in scene {} has wrong dimension",
                        s.id
                    )));
                }
                if let Some(i) = p.identity {
                    if i as usize >= c.num_identities {
                        return Err(Error::arg(format!(
                            "unknown identity {i} in scene {}",
                            s.id
                        )));
                    }
                }
            }
        }
        for q in &self.queries {
            if q.target as usize >= c.num_identities {
                return Err(Error::arg(format!(
                    "query {} targets unknown identity",
                    q.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header { version: u32, config: GenConfig },
    Identity { id: u64, latent: Embedding },
    Scene(Scene),
    Query(Query),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine, dot};

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    fn small() -> GenConfig {
        GenConfig {
            dim: 16,
            num_identities: 10,
            num_scenes: 30,
            gallery_size: 40,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        let (mut sa, mut sb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut sa).unwrap();
        b.write_jsonl(&mut sb).unwrap();
        assert_eq!(sa, sb);
    }

    #[test]
    fn scenes_do_not_depend_on_world_size() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&GenConfig {
            gallery_size: 60,
            ..small()
        })
        .unwrap();
        assert_eq!(a.scenes[..], b.scenes[..40]);
    }

    #[test]
    fn jsonl_round_trip() {
        let w = generate_world(&small()).unwrap();
        let mut buf = Vec::new();
        w.write_jsonl(&mut buf).unwrap();
        let back = World::read_jsonl(&buf[..]).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn missing_header_is_rejected() {
        let w = generate_world(&small()).unwrap();
        let mut buf = Vec::new();
        w.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert!(World::read_jsonl(body.as_bytes()).is_err());
    }

    #[test]
    fn orthogonal_map_is_orthogonal() {
        let q = orthogonal_map(12, 3);
        let eye = q.transpose() * &q;
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_scene_identities_distinct() {
        let w = generate_world(&small()).unwrap();
        for l in &w.latents {
            assert!(l.is_unit());
        }
        for s in &w.scenes {
            let ids: Vec<u64> = s.persons.iter().filter_map(|p| p.identity).collect();
            let mut dedup = ids.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(ids.len(), dedup.len());
            assert!(!s.persons.is_empty());
            for p in &s.persons {
                assert!(p.appearance.is_unit());
                assert_eq!(p.description.is_some(), p.identity.is_some());
            }
            if s.distractor {
                assert!(ids.is_empty());
            }
        }
        for q in &w.queries {
            assert!(q.text.is_unit());
        }
    }

    #[test]
    fn noiseless_world_without_gap_matches_latents() {
        let cfg = GenConfig {
            sigma_visual: 0.0,
            sigma_text: 0.0,
            modality_gap: false,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for q in &w.queries {
            assert!(close(&q.text, &w.latents[q.target as usize]));
        }
        for p in w.scenes.iter().flat_map(|s| &s.persons) {
            if let Some(i) = p.identity {
                assert!(close(&p.appearance, &w.latents[i as usize]));
            }
        }
    }

    #[test]
    fn gap_rotates_text_away_from_appearance() {
        let cfg = GenConfig {
            sigma_visual: 0.0,
            sigma_text: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        let q = &w.queries[0];
        let latent = &w.latents[q.target as usize];
        assert!(dot(&q.text, latent) < 0.9);
        let r = orthogonal_map(cfg.dim, cfg.seed);
        let back = r.transpose() * nalgebra::DVector::from_column_slice(&q.text);
        assert!((cosine(back.as_slice(), latent) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_channel_reproduces_ground_truth() {
        let exact = ChannelConfig {
            miss_rate: 0.0,
            fp_rate: 0.0,
            sigma_box: 0.0,
            conf_base: 0.3,
            conf_iou_gain: 0.5,
            conf_noise: 0.0,
            sigma_embed: 0.0,
        };
        let cfg = GenConfig {
            mue: exact.clone(),
            pud: exact,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for s in &w.scenes {
            let p = generate_proposals(s, &cfg).unwrap();
            for ch in [&p.mue, &p.pud] {
                assert_eq!(ch.len(), s.persons.len());
                for (prop, person) in ch.iter().zip(&s.persons) {
                    assert_eq!(prop.bbox, person.bbox);
                    assert_eq!(prop.confidence, 0.8);
                    assert!((cosine(&prop.feature, &person.appearance) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_miss_without_false_positives_is_empty() {
        let none = ChannelConfig {
            miss_rate: 1.0,
            fp_rate: 0.0,
            ..ChannelConfig::mue_default()
        };
        let cfg = GenConfig {
            mue: none.clone(),
            pud: none,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for s in &w.scenes {
            let p = generate_proposals(s, &cfg).unwrap();
            assert!(p.mue.is_empty() && p.pud.is_empty());
        }
    }

    #[test]
    fn feature_norm_encodes_confidence() {
        let cfg = small();
        let w = generate_world(&cfg).unwrap();
        let p = generate_proposals(&w.scenes[0], &cfg).unwrap();
        for prop in p.mue.iter().chain(&p.pud) {
            let (conf, dir) = crate::reid::nae_split(
                &prop.feature,
                cfg.feature_norm_offset,
                cfg.feature_norm_scale,
            )
            .unwrap();
            let want = prop.confidence.clamp(CONF_EPS, 1.0 - CONF_EPS);
            assert!((conf - want).abs() < 1e-9);
            assert!(dir.is_unit());
        }
    }

    #[test]
    fn gallery_contains_positives_and_nests() {
        let w = generate_world(&small()).unwrap();
        let q = &w.queries[0];
        let small_g = w.gallery(q, 10).unwrap();
        let large_g = w.gallery(q, 40).unwrap();
        assert_eq!(large_g.len(), 40);
        assert!(large_g.starts_with(&small_g));
        for s in &w.scenes {
            if s.contains(q.target) {
                assert!(small_g.contains(&s.id));
            }
        }
        assert!(w.gallery(q, 41).is_err());
    }

    #[test]
    fn repair_box_handles_inverted_and_outside_corners() {
        let b = repair_box(0.5, 1.2, 0.2, -0.1);
        assert_eq!(b.as_array(), [0.2, 0.0, 0.5, 1.0]);
        let d = repair_box(1.0, 0.3, 1.0, 0.3);
        assert!(d.validate().is_ok());
        assert!((d.x2 - d.x1 - MIN_EXTENT).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_names_the_field() {
        let cfg = GenConfig {
            background_rate: 1.5,
            ..small()
        };
        match generate_world(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "background_rate"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = GenConfig {
            pud: ChannelConfig {
                miss_rate: -0.1,
                ..ChannelConfig::pud_default()
            },
            ..small()
        };
        match generate_world(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "pud.miss_rate"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
