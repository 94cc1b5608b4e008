//! The on-disk run configuration (TOML).
//!
//! ```toml
//! preset = "dynamic"
//! seed = 7
//!
//! [model]
//! filters = [8, 8, 8, 8]
//! stem_stages = 0
//!
//! [train]
//! iterations = 20
//! schedule = [[16, 3e-3], [4, 3e-4]]
//!
//! [paths]
//! data = "phantoms"
//! checkpoint = "run/model.ckpt"
//! ```
//!
//! Every table rejects unknown keys. Relative paths resolve against the
//! directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use r2u3d_core::model::{ModelConfig, Variant};
use r2u3d_core::nn::DownsampleConfig;
use r2u3d_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `default` or `dynamic`; the `[model]` table overrides single fields.
    pub preset: Option<String>,
    /// Seeds both parameter init and scan sampling; wins over `train.seed`.
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub model: ModelOverrides,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub preprocess: PreprocessSection,
    pub paths: Paths,
    /// Write the checkpoint every this many outer iterations.
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub variant: Option<Variant>,
    pub filters: Option<[usize; 4]>,
    pub depths: Option<[usize; 4]>,
    pub stem_stages: Option<usize>,
    pub encoder_dilation: Option<usize>,
    pub downsample: Option<DownsampleConfig>,
    pub se_reduction: Option<usize>,
    pub layers_per_unit: Option<usize>,
    pub transition_conv: Option<bool>,
}

impl ModelOverrides {
    pub fn apply(&self, base: ModelConfig) -> ModelConfig {
        let o = self.clone();
        ModelConfig {
            variant: o.variant.unwrap_or(base.variant),
            filters: o.filters.unwrap_or(base.filters),
            depths: o.depths.unwrap_or(base.depths),
            stem_stages: o.stem_stages.unwrap_or(base.stem_stages),
            encoder_dilation: o.encoder_dilation.unwrap_or(base.encoder_dilation),
            downsample: o.downsample.unwrap_or(base.downsample),
            se_reduction: o.se_reduction.unwrap_or(base.se_reduction),
            layers_per_unit: o.layers_per_unit.unwrap_or(base.layers_per_unit),
            transition_conv: o.transition_conv.unwrap_or(base.transition_conv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: DEFAULT_THRESHOLD }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub target_depth: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory of `<id>.image.vhdr` / `<id>.mask.vhdr` pairs.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Report or log destination.
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.data, &mut cfg.paths.checkpoint, &mut cfg.paths.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The preset named by `flag` (or the file, or `default`) with the
    /// `[model]` overrides applied.
    pub fn model_config(&self, flag: Option<&str>) -> CliResult<ModelConfig> {
        let name = flag.or(self.preset.as_deref()).unwrap_or("default");
        let cfg = self.model.apply(ModelConfig::preset(name)?);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(self.train.seed)
    }
}
