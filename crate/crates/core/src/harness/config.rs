//! TOML experiment configuration. Relative paths resolve against the
//! directory holding the config file; `FICABU_OUT_DIR` overrides the output
//! directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cau::{default_checkpoints, MacConvention, UnlearnConfig, UnlearnMode};
use crate::dampening::{DampeningParams, ProfileParams};
use crate::error::{Error, Result};
use crate::nn::Precision;
use crate::pipeline::{PipelineConfig, PowerTable};

use super::data::{BlobSpec, ImageDirSpec};
use super::train::TrainSpec;

pub const OUT_DIR_ENV: &str = "FICABU_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    Images(ImageDirSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    TinyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden widths of the MLP; the first entry is the dense width of the CNN.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

fn default_b_r() -> f64 {
    10.0
}

fn default_chunk() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSpec {
    pub forget_class: usize,
    #[serde(default)]
    pub mode: UnlearnMode,
    pub alpha: f32,
    pub lambda: f32,
    pub tau: f64,
    pub n: usize,
    /// Defaults to the first and last layers plus every `ceil(L/4)`-th.
    #[serde(default)]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default = "default_b_r")]
    pub b_r: f64,
    /// Derived from full-SSD selection counts when absent.
    #[serde(default)]
    pub c_m: Option<f64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub macs: MacConvention,
    /// Samples per chunk when estimating global importance.
    #[serde(default = "default_chunk")]
    pub global_chunk: usize,
}

impl UnlearnSpec {
    pub fn params(&self) -> Result<DampeningParams> {
        DampeningParams::new(self.alpha, self.lambda)
    }

    pub fn checkpoint_set(&self, depth: usize) -> BTreeSet<usize> {
        match &self.checkpoints {
            Some(list) => list.iter().copied().collect(),
            None => default_checkpoints(depth),
        }
    }

    /// Run configuration for `mode`; `c_m` is used when the spec leaves it open.
    pub fn config(&self, mode: UnlearnMode, depth: usize, c_m: f64) -> Result<UnlearnConfig> {
        Ok(UnlearnConfig {
            params: self.params()?,
            checkpoints: self.checkpoint_set(depth),
            tau: self.tau,
            n: self.n,
            profile: (mode == UnlearnMode::CauBalanced).then_some(ProfileParams {
                b_r: self.b_r,
                c_m: self.c_m.unwrap_or(c_m),
                depth,
            }),
            mode,
            precision: self.precision,
            macs: self.macs,
        })
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    pub unlearn: UnlearnSpec,
    /// Separate TOML file with a pipeline configuration; wins over `[pipeline]`.
    #[serde(default)]
    pub pipeline_config: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub power: PowerTable,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves its relative paths and loads the
    /// referenced pipeline file, if any.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Missing(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base)?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if let DatasetSpec::Images(spec) = &mut self.dataset {
            spec.path = join(&spec.path);
        }
        self.output_dir = match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => join(&self.output_dir),
        };
        if let Some(p) = &self.pipeline_config {
            let p = join(p);
            let text = fs::read_to_string(&p)
                .map_err(|e| Error::Missing(format!("pipeline config {}: {e}", p.display())))?;
            self.pipeline = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            self.pipeline_config = Some(p);
        }
        self.pipeline.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Blobs(b) = &self.dataset {
            if self.unlearn.forget_class >= b.classes {
                return Err(Error::Config(format!(
                    "forget class {} out of range for {} classes",
                    self.unlearn.forget_class, b.classes
                )));
            }
        }
        if self.model.kind == ModelKind::TinyCnn && self.model.hidden.is_empty() {
            return Err(Error::Config("tiny_cnn needs a dense hidden width".into()));
        }
        self.unlearn.params()?;
        if !(0.0..=1.0).contains(&self.unlearn.tau) {
            return Err(Error::Config("tau must lie in [0, 1]".into()));
        }
        if self.unlearn.n == 0 {
            return Err(Error::Config("forget batch size n must be at least 1".into()));
        }
        self.power.validate()?;
        self.pipeline.validate()
    }

    /// Re-seeds the dataset, initialisation and trainer from one seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        match &mut cfg.dataset {
            DatasetSpec::Blobs(b) => b.seed = seed,
            DatasetSpec::Images(i) => i.seed = seed,
        }
        cfg.model.seed = seed.wrapping_add(1_000);
        cfg.train.seed = seed.wrapping_add(2_000);
        cfg
    }
}
