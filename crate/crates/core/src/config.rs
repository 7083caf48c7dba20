//! Declarative training configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::model::{ModelConfig, Variant};
use crate::tensor::Tensor;
use crate::train::data::{load_directory, make_synthetic_dataset, Shape};
use crate::train::{LossWeights, StageSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Smoke,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecipe {
    pub shapes: Vec<Shape>,
    pub count: usize,
    #[serde(default = "one")]
    pub seed: u64,
}

fn one() -> u64 {
    1
}

/// Where training clouds come from. Exactly one field must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticRecipe>,
    pub root: Option<PathBuf>,
}

impl DataConfig {
    pub fn overfit_set() -> Self {
        DataConfig { synthetic: Some(SyntheticRecipe { shapes: Shape::ALL.to_vec(), count: 8, seed: 1 }), root: None }
    }

    fn describe(&self, points: usize) -> Result<String> {
        match (&self.synthetic, &self.root) {
            (Some(s), None) => Ok(format!("synthetic:{:?}:{}:{}:{points}", s.shapes, s.count, s.seed)),
            (None, Some(r)) => Ok(format!("root:{}:{points}", r.display())),
            _ => Err(Error::InvalidArgument("data needs exactly one of `synthetic` or `root`".into())),
        }
    }

    /// Loads (or generates) the clouds, each with exactly `points` points.
    /// With `cache` set, the resampled clouds are stored there and reused.
    pub fn load(&self, points: usize, cache: Option<&Path>) -> Result<Vec<PointCloud>> {
        let key = self.describe(points)?;
        let cache_file = cache.map(|d| d.join(format!("dataset-{:08x}.json", crc32fast::hash(key.as_bytes()))));
        if let Some(f) = cache_file.as_ref().filter(|f| f.exists()) {
            let cached: CachedDataset = serde_json::from_slice(&std::fs::read(f)?)?;
            if cached.key == key {
                return cached.clouds.into_iter().map(PointCloud::new).collect();
            }
        }
        let clouds = match (&self.synthetic, &self.root) {
            (Some(s), _) => make_synthetic_dataset(&s.shapes, s.count, points, s.seed)?,
            (_, Some(r)) => load_directory(r, points, 0)?,
            _ => unreachable!(),
        };
        if let Some(f) = cache_file {
            std::fs::create_dir_all(f.parent().unwrap())?;
            let c = CachedDataset { key, clouds: clouds.iter().map(|p| p.points().clone()).collect() };
            crate::checkpoint::write_atomic(&f, &serde_json::to_vec(&c)?)?;
        }
        Ok(clouds)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedDataset {
    key: String,
    clouds: Vec<Tensor>,
}

fn default_schedule(steps: usize, lr: f64) -> StageSchedule {
    StageSchedule { steps, batch_size: 4, lr, warmup: 50, final_lr_ratio: 0.05 }
}

fn default_ae() -> StageSchedule {
    default_schedule(1500, 3e-3)
}

fn default_diffusion() -> StageSchedule {
    default_schedule(10000, 5e-3)
}

fn default_lambda() -> f64 {
    LossWeights::default().lambda
}

fn default_gamma() -> f64 {
    LossWeights::default().gamma
}

fn default_ema() -> f64 {
    0.999
}

fn default_eval_steps() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub points_per_cloud: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda_comp: f64,
    #[serde(default = "default_gamma")]
    pub gamma_gmm: f64,
    #[serde(default)]
    pub finetune_ae: bool,
    /// Decay of the weight average used for sampling; 0 disables it.
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    /// Validation Chamfer distance is logged every this many steps (0 = never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_steps")]
    pub eval_ddim_steps: usize,
    #[serde(default = "default_ae")]
    pub ae: StageSchedule,
    #[serde(default = "default_diffusion")]
    pub diffusion: StageSchedule,
    pub data: DataConfig,
    /// Full model description; overrides the preset when present.
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

impl TrainConfig {
    /// The 8-shape, 512-point overfit setup.
    pub fn smoke(variant: Variant) -> Self {
        TrainConfig {
            preset: Preset::Smoke,
            variant,
            points_per_cloud: 512,
            seed: 0,
            lambda_comp: default_lambda(),
            gamma_gmm: default_gamma(),
            finetune_ae: false,
            ema_decay: default_ema(),
            eval_every: 0,
            eval_ddim_steps: default_eval_steps(),
            ae: default_ae(),
            diffusion: default_diffusion(),
            data: DataConfig::overfit_set(),
            model: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Model configuration for `points_per_cloud`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = match &self.model {
            Some(m) => m.clone(),
            None => match self.preset {
                Preset::Smoke => ModelConfig::smoke_with_points(self.variant, self.points_per_cloud),
                Preset::Full => ModelConfig::full_with_points(self.variant, self.points_per_cloud),
            },
        };
        if m.variant != self.variant || m.points != self.points_per_cloud {
            return Err(Error::ConfigMismatch(format!(
                "model section ({}, {} points) disagrees with variant {} / points_per_cloud {}",
                m.variant.name(),
                m.points,
                self.variant.name(),
                self.points_per_cloud
            )));
        }
        m.validate()?;
        Ok(m)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda_comp, gamma: self.gamma_gmm }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_comp >= 0.0) || !(self.gamma_gmm >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidArgument(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        for (name, s) in [("ae", &self.ae), ("diffusion", &self.diffusion)] {
            if s.batch_size == 0 || !(s.lr > 0.0) {
                return Err(Error::InvalidArgument(format!("{name}: batch_size and lr must be positive")));
            }
        }
        self.data.describe(self.points_per_cloud)?;
        self.model_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let text = r#"
preset = "smoke"
variant = "full"
points_per_cloud = 512
[data.synthetic]
shapes = ["sphere", "torus"]
count = 4
"#;
        let c = TrainConfig::from_toml(text).unwrap();
        assert_eq!(c.lambda_comp, 1e-3);
        assert_eq!(c.data.synthetic.as_ref().unwrap().seed, 1);
        assert_eq!(c.model_config().unwrap().points, 512);
        let again = TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = "preset = \"smoke\"\nvariant = \"full\"\n";
        let data = "[data.synthetic]\nshapes = [\"cube\"]\ncount = 1\n";
        assert!(matches!(TrainConfig::from_toml(&format!("{base}points_per_cloud = 4\n{data}")), Err(Error::ConfigMismatch(_))));
        assert!(TrainConfig::from_toml(&format!("{base}points_per_cloud = 100\n{data}")).is_ok());
        assert!(TrainConfig::from_toml(&format!("{base}points_per_cloud = 512\nlambda_comp = -1.0\n{data}")).is_err());
        assert!(TrainConfig::from_toml(&format!("{base}points_per_cloud = 512\n[data]\n")).is_err());
        assert!(TrainConfig::from_toml(&format!("{base}points_per_cloud = 512\nbogus = 1\n{data}")).is_err());
    }
}
