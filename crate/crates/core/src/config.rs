//! Run configuration shared by all pipeline stages. Every field has a
//! default; a JSON file may override any subset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::{BASE_THRESHOLD, CLUSTER_RADIUS_MM};
use crate::dataset::PhantomSpec;
use crate::error::{invalid_arg, Error, Result};
use crate::froc::HIT_RADIUS_MM;
use crate::imaging::PreprocessParams;
use crate::unet::UnetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    /// Loss weight of negative pixels; positives weigh 1.
    pub negative_weight: f32,
    /// Epochs without validation improvement before the rate is reduced.
    pub patience: u32,
    pub lr_factor: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patch_px: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            negative_weight: 0.25,
            patience: 5,
            lr_factor: 0.5,
            batch_size: 4,
            max_epochs: 50,
            patch_px: 344,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub base_threshold: f32,
    pub cluster_radius_mm: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            base_threshold: BASE_THRESHOLD,
            cluster_radius_mm: CLUSTER_RADIUS_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrocConfig {
    pub hit_radius_mm: f64,
}

impl Default for FrocConfig {
    fn default() -> Self {
        FrocConfig {
            hit_radius_mm: HIT_RADIUS_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub unet: UnetConfig,
    pub training: TrainingConfig,
    pub preprocessing: PreprocessParams,
    pub candidates: CandidateConfig,
    pub froc: FrocConfig,
    pub phantom: PhantomSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| invalid_arg!("bad configuration: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(msg) => invalid_arg!("{}: {msg}", path.display()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        let t = &self.training;
        if !(t.learning_rate > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(invalid_arg!("learning rate must be positive and momentum in [0, 1)"));
        }
        if !(t.negative_weight >= 0.0) || !(t.lr_factor > 0.0 && t.lr_factor < 1.0) || t.patience == 0 {
            return Err(invalid_arg!("negative weight, rate factor or patience out of range"));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(invalid_arg!("batch size and epoch count must be positive"));
        }
        let m = self.unet.grid_multiple();
        if t.patch_px == 0 || !t.patch_px.is_multiple_of(m) {
            return Err(invalid_arg!(
                "patch size {} must be a positive multiple of {m} for depth {}",
                t.patch_px,
                self.unet.depth
            ));
        }
        if !(self.candidates.cluster_radius_mm > 0.0) || !(self.froc.hit_radius_mm > 0.0) {
            return Err(invalid_arg!("cluster and hit radii must be positive"));
        }
        if !(self.preprocessing.target_spacing_mm > 0.0) {
            return Err(invalid_arg!("target spacing must be positive"));
        }
        Ok(())
    }
}
