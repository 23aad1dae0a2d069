use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{davies_bouldin, evaluate, QueryResult, RetrievalSummary};
use crate::numgrad::train_toy;
use crate::synth::{generate_world, World};

use super::config::{ExperimentConfig, ModelConfig, Toggles};
use super::pipeline::Prepared;

/// Build identifier stamped on every row; overridable at compile time.
pub const BUILD_ID: &str = match option_env!("TBPS_BUILD_ID") {
    Some(id) => id,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub exp_id: String,
    pub seed: u64,
    pub beta: f64,
    pub gallery_size: usize,
    pub toggles: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub db_image: f64,
    pub db_text: f64,
    pub wall_ms: u64,
    pub config_hash: String,
    pub build_id: String,
}

/// Mean metrics over seeds for one (toggles, beta, gallery size) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub exp_id: String,
    pub toggles: String,
    pub beta: f64,
    pub gallery_size: usize,
    pub seeds: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub db_image: f64,
    pub db_text: f64,
}

#[derive(Serialize)]
struct HashedPart<'a> {
    gen: crate::synth::GenConfig,
    model: &'a ModelConfig,
    train_steps: usize,
    train: Option<&'a crate::numgrad::TrainConfig>,
}

/// Hash of everything that affects a row besides its own grid coordinates,
/// so a sub-grid reproduces the matching rows of a full grid.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let part = HashedPart {
        gen: crate::synth::GenConfig {
            seed: 0,
            gallery_size: 0,
            ..cfg.gen.clone()
        },
        model: &cfg.model,
        train_steps: cfg.train_steps,
        train: (cfg.train_steps > 0).then_some(&cfg.train),
    };
    let json = serde_json::to_vec(&part).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

pub fn exp_id(toggles: &Toggles, beta: f64, gallery_size: usize) -> String {
    format!("{}_b{beta:.2}_g{gallery_size}", toggles.label())
}

/// Davies-Bouldin indices of labeled appearance and description features.
fn world_db(world: &World) -> Result<(f64, f64)> {
    let mut img = Vec::new();
    let mut txt = Vec::new();
    let mut labels = Vec::new();
    for p in world.main_scenes().flat_map(|s| s.persons.iter()) {
        if let (Some(id), Some(d)) = (p.identity, &p.description) {
            img.push(p.appearance.clone());
            txt.push(d.clone());
            labels.push(id);
        }
    }
    Ok((
        davies_bouldin(&img, &labels)?,
        davies_bouldin(&txt, &labels)?,
    ))
}

struct SeedStage {
    prepared: Prepared,
    db: (f64, f64),
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedStage> {
    stage_for(cfg, generate_world(&cfg.world_config(seed))?)
}

fn stage_for(cfg: &ExperimentConfig, world: World) -> Result<SeedStage> {
    let db = if cfg.train_steps > 0 {
        let run = train_toy(&world, &cfg.train, cfg.train_steps)?;
        let last = run
            .records
            .last()
            .ok_or_else(|| Error::arg("training recorded nothing"))?;
        (last.db_image, last.db_text)
    } else {
        world_db(&world)?
    };
    Ok(SeedStage {
        prepared: Prepared::new(world, &cfg.model)?,
        db,
    })
}

/// Query results of one grid point against a prepared world.
pub fn score_point(
    prep: &Prepared,
    toggles: &Toggles,
    beta: f64,
    gallery_size: usize,
    model: &ModelConfig,
) -> Result<Vec<QueryResult>> {
    prep.world
        .queries
        .iter()
        .map(|q| prep.score_query(q, toggles, beta, gallery_size, model))
        .collect()
}

pub fn evaluate_point(
    prep: &Prepared,
    toggles: &Toggles,
    beta: f64,
    gallery_size: usize,
    model: &ModelConfig,
) -> Result<RetrievalSummary> {
    evaluate(
        &score_point(prep, toggles, beta, gallery_size, model)?,
        model.eval_iou,
    )
}

#[derive(Clone, Copy)]
struct GridPoint {
    seed_index: usize,
    toggles: Toggles,
    beta: f64,
    gallery_size: usize,
}

fn grid(cfg: &ExperimentConfig, seeds: usize) -> Vec<GridPoint> {
    let mut points = Vec::new();
    for seed_index in 0..seeds {
        for &toggles in &cfg.toggles {
            for &beta in &cfg.beta_grid {
                for &gallery_size in &cfg.gallery_grid {
                    points.push(GridPoint {
                        seed_index,
                        toggles,
                        beta,
                        gallery_size,
                    });
                }
            }
        }
    }
    points
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(Error::config("jobs", "must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::arg(format!("worker pool: {e}")))
}

/// Rows for every grid point over already prepared seeds. Must run inside
/// the caller's pool.
fn rows_for(cfg: &ExperimentConfig, seeds: &[u64], stages: &[SeedStage]) -> Result<Vec<ResultRow>> {
    let hash = config_hash(cfg);
    grid(cfg, seeds.len())
        .into_par_iter()
        .map(|p| {
            let started = Instant::now();
            let stage = &stages[p.seed_index];
            let s = evaluate_point(
                &stage.prepared,
                &p.toggles,
                p.beta,
                p.gallery_size,
                &cfg.model,
            )?;
            let wall_ms = if cfg.timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            Ok(ResultRow {
                exp_id: exp_id(&p.toggles, p.beta, p.gallery_size),
                seed: seeds[p.seed_index],
                beta: p.beta,
                gallery_size: p.gallery_size,
                toggles: p.toggles.label(),
                map: s.map,
                top1: s.top1,
                top5: s.top5,
                top10: s.top10,
                db_image: stage.db.0,
                db_text: stage.db.1,
                wall_ms,
                config_hash: hash.clone(),
                build_id: BUILD_ID.to_string(),
            })
        })
        .collect()
}

/// Result rows of the full grid, in grid order (seed, toggles, beta, gallery).
pub fn compute_rows(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    pool(jobs)?.install(|| {
        let stages = cfg
            .seeds
            .par_iter()
            .map(|&seed| prepare_seed(cfg, seed))
            .collect::<Result<Vec<_>>>()?;
        rows_for(cfg, &cfg.seeds, &stages)
    })
}

/// Result rows of the toggle, beta and gallery grids over one given world.
/// The world's own generator settings replace `cfg.gen` and `cfg.seeds`.
pub fn compute_rows_for_world(
    cfg: &ExperimentConfig,
    world: World,
    jobs: usize,
) -> Result<Vec<ResultRow>> {
    let cfg = ExperimentConfig {
        gen: world.config.clone(),
        seeds: vec![world.config.seed],
        ..cfg.clone()
    };
    cfg.validate()?;
    let largest = cfg.gallery_grid.iter().copied().max().unwrap_or(0);
    if largest > world.scenes.len() {
        return Err(Error::config(
            "gallery_grid",
            format!(
                "{largest} exceeds the {} scenes of the dataset",
                world.scenes.len()
            ),
        ));
    }
    pool(jobs)?.install(|| {
        let stage = stage_for(&cfg, world)?;
        rows_for(&cfg, &cfg.seeds, std::slice::from_ref(&stage))
    })
}

/// Seed means per experiment id, in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<(SummaryRow, usize)> = Vec::new();
    for r in rows {
        let slot = match out.iter().position(|(s, _)| s.exp_id == r.exp_id) {
            Some(i) => i,
            None => {
                out.push((
                    SummaryRow {
                        exp_id: r.exp_id.clone(),
                        toggles: r.toggles.clone(),
                        beta: r.beta,
                        gallery_size: r.gallery_size,
                        seeds: 0,
                        map: 0.0,
                        top1: 0.0,
                        top5: 0.0,
                        top10: 0.0,
                        db_image: 0.0,
                        db_text: 0.0,
                    },
                    0,
                ));
                out.len() - 1
            }
        };
        let (s, n) = &mut out[slot];
        s.map += r.map;
        s.top1 += r.top1;
        s.top5 += r.top5;
        s.top10 += r.top10;
        s.db_image += r.db_image;
        s.db_text += r.db_text;
        *n += 1;
    }
    out.into_iter()
        .map(|(mut s, n)| {
            let k = n as f64;
            s.seeds = n;
            for v in [
                &mut s.map,
                &mut s.top1,
                &mut s.top5,
                &mut s.top10,
                &mut s.db_image,
                &mut s.db_text,
            ] {
                *v /= k;
            }
            s
        })
        .collect()
}

pub fn write_results(dir: &Path, rows: &[ResultRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("results.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary = summarize(rows);
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

/// Computes every grid point and writes `results.csv` and `summary.json`
/// into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let rows = compute_rows(cfg, jobs)?;
    write_results(&cfg.out_dir, &rows)?;
    Ok(rows)
}
