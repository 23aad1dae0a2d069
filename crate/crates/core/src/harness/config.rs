use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pud::ScaleParam;
use crate::synth::GenConfig;

/// Which parts of the inference pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub mue: bool,
    pub pud: bool,
    /// Refine text-path features with their nearest prototype.
    pub instance_prototypes: bool,
    /// Norm-aware confidence; plain OIM scoring otherwise.
    pub nae: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            mue: true,
            pud: true,
            instance_prototypes: true,
            nae: true,
        }
    }
}

impl Toggles {
    /// Stable short label, e.g. `mue+pud+proto+nae`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.mue {
            parts.push("mue");
        }
        if self.pud {
            parts.push("pud");
        }
        if self.instance_prototypes {
            parts.push("proto");
        }
        parts.push(if self.nae { "nae" } else { "oim" });
        parts.join("+")
    }

    /// The ablation ladder: each path alone, both paths, then the extras.
    pub fn ablation_ladder() -> Vec<Toggles> {
        let base = Toggles {
            mue: true,
            pud: false,
            instance_prototypes: false,
            nae: false,
        };
        vec![
            base,
            Toggles {
                mue: false,
                pud: true,
                ..base
            },
            Toggles { pud: true, ..base },
            Toggles {
                pud: true,
                instance_prototypes: true,
                ..base
            },
            Toggles::default(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mue && !self.pud {
            return Err(Error::config(
                "toggles",
                "at least one of mue and pud must be enabled",
            ));
        }
        Ok(())
    }
}

/// Inference-time parameters shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pairing threshold for fusing the two paths (strictly exceeded).
    pub fusion_iou: f64,
    /// Correctness threshold for evaluation (inclusive).
    pub eval_iou: f64,
    pub mu: f64,
    pub num_prototypes: usize,
    pub bank_momentum: f64,
    pub bank_epochs: usize,
    /// Without the norm-aware split, proposals below this detection
    /// confidence are discarded and the rest are scored by similarity alone.
    pub detection_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_iou: 0.5,
            eval_iou: 0.5,
            mu: 0.5,
            num_prototypes: 256,
            bank_momentum: 0.9,
            bank_epochs: 3,
            detection_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fusion_iou > 0.0 && self.fusion_iou < 1.0) {
            return Err(Error::config("model.fusion_iou", "must lie in (0, 1)"));
        }
        if !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::config("model.eval_iou", "must lie in (0, 1]"));
        }
        ScaleParam::new(self.mu)
            .map_err(|_| Error::config("model.mu", "must be finite and > 0"))?;
        if self.num_prototypes == 0 {
            return Err(Error::config("model.num_prototypes", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return Err(Error::config("model.bank_momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return Err(Error::config(
                "model.detection_threshold",
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// A full experiment grid. JSON field names match the struct fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// World parameters; `seed` and `gallery_size` are overridden per grid
    /// point.
    pub gen: GenConfig,
    pub toggles: Vec<Toggles>,
    pub beta_grid: Vec<f64>,
    pub gallery_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    /// Toy-training steps per grid point; 0 skips training.
    pub train_steps: usize,
    pub train: crate::numgrad::TrainConfig,
    /// Record wall-clock time per grid point; rows carry 0 otherwise.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            gen: GenConfig::default(),
            toggles: vec![Toggles::default()],
            beta_grid: vec![0.5],
            gallery_grid: vec![100],
            seeds: vec![0],
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train_steps: 0,
            train: crate::numgrad::TrainConfig::default(),
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        if self.toggles.is_empty() {
            return Err(Error::config("toggles", "grid is empty"));
        }
        for t in &self.toggles {
            t.validate()?;
        }
        if self.beta_grid.is_empty() {
            return Err(Error::config("beta_grid", "grid is empty"));
        }
        if let Some(b) = self.beta_grid.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::config("beta_grid", format!("{b} outside [0, 1]")));
        }
        if self.gallery_grid.is_empty() {
            return Err(Error::config("gallery_grid", "grid is empty"));
        }
        if self.gallery_grid.contains(&0) {
            return Err(Error::config(
                "gallery_grid",
                "gallery sizes must be positive",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "list is empty"));
        }
        if self.train_steps > 0 {
            self.train.validate()?;
        }
        Ok(())
    }

    /// World parameters for one seed, sized for the largest gallery.
    pub fn world_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            gallery_size: self.gallery_grid.iter().copied().max().unwrap_or(1),
            ..self.gen.clone()
        }
    }

    /// Preset for the β sweep on the default benchmark.
    pub fn beta_sweep() -> Self {
        ExperimentConfig {
            beta_grid: vec![0.0, 0.3, 0.5, 0.8, 1.0],
            seeds: (0..5).collect(),
            ..Self::default()
        }
    }

    /// Preset for the gallery-size sweep on the default benchmark.
    pub fn gallery_sweep() -> Self {
        ExperimentConfig {
            gallery_grid: vec![50, 100, 500, 1000, 2000, 4000],
            seeds: (0..5).collect(),
            ..Self::default()
        }
    }

    pub fn ablation() -> Self {
        ExperimentConfig {
            toggles: Toggles::ablation_ladder(),
            seeds: (0..5).collect(),
            ..Self::default()
        }
    }
}
