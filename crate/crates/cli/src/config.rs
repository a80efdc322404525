//! Run configuration file (TOML). Every field has a default, so an empty
//! file is a valid configuration.

use std::path::Path;

use runaway_core::augment::AugmentConfig;
use runaway_core::dataset::ImageSize;
use runaway_core::fusion::{InputKind, TempRange};
use runaway_core::models::{Architecture, CnnParams, Family, ResNetParams, VitParams};
use runaway_core::trainer::{ExperimentConfig, HyperGrid, SplitFractions, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for generation, splitting, initialization and shuffling.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub augment: AugmentConfig,
    pub training: TrainingSection,
    pub grid: GridSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub baseline: usize,
    pub runaway: usize,
    pub image_size: usize,
    pub ir_jitter: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { baseline: 412, runaway: 420, image_size: 128, ir_jitter: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub variant: Variant,
    pub upsample_factor: f64,
    pub fractions: SplitFractions,
    pub temp_range: TempRange,
    pub eval_batch: usize,
    pub latency_trials: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            epochs: e.epochs,
            variant: e.variant,
            upsample_factor: e.upsample_factor,
            fractions: e.fractions,
            temp_range: e.temp_range,
            eval_batch: e.eval_batch,
            latency_trials: e.latency_trials,
        }
    }
}

/// Shared optimizer grid plus per-family architecture choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub optimizers: Vec<runaway_core::tensor::OptimizerConfig>,
    pub cnn: Vec<CnnParams>,
    pub resnet: Vec<ResNetParams>,
    pub vit: Vec<VitParams>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = HyperGrid::default();
        Self {
            learning_rates: g.learning_rates,
            batch_sizes: g.batch_sizes,
            optimizers: g.optimizers,
            cnn: Vec::new(),
            resnet: Vec::new(),
            vit: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {}", path.display(), e.message())))
    }

    pub fn image_size(&self) -> ImageSize {
        ImageSize::square(self.dataset.image_size)
    }

    pub fn grid_for(&self, family: Family) -> HyperGrid {
        let architectures = match family {
            Family::ShallowCnn => self.grid.cnn.iter().cloned().map(Architecture::ShallowCnn).collect(),
            Family::MiniResNet => self.grid.resnet.iter().cloned().map(Architecture::MiniResNet).collect(),
            Family::MiniVit => self.grid.vit.iter().cloned().map(Architecture::MiniVit).collect(),
        };
        HyperGrid {
            learning_rates: self.grid.learning_rates.clone(),
            batch_sizes: self.grid.batch_sizes.clone(),
            optimizers: self.grid.optimizers.clone(),
            architectures,
        }
    }

    pub fn experiment(&self, family: Family, input: InputKind, variant: Variant) -> ExperimentConfig {
        let t = &self.training;
        ExperimentConfig {
            family,
            input,
            variant,
            epochs: t.epochs,
            seed: self.seed,
            grid: self.grid_for(family),
            fractions: t.fractions,
            upsample_factor: t.upsample_factor,
            augment: self.augment,
            temp_range: t.temp_range,
            eval_batch: t.eval_batch,
            latency_trials: t.latency_trials,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let parsed: RunConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.dataset.baseline + parsed.dataset.runaway, 832);
    }

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let text = r#"
            seed = 9
            [dataset]
            image_size = 64
            [training]
            epochs = 3
            variant = "upsampled_augmented"
            [grid]
            learning_rates = [0.001]
            batch_sizes = [8]
            optimizers = [{ kind = "adam", lr = 0.0, beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }]
            cnn = [{ widths = [4, 8], fc_hidden = 16 }]
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        let e = c.experiment(Family::ShallowCnn, InputKind::Fusion, c.training.variant);
        assert_eq!((e.seed, e.epochs, e.variant), (9, 3, Variant::UpsampledAugmented));
        assert_eq!(e.grid.architectures, vec![Architecture::ShallowCnn(CnnParams { widths: [4, 8], kernel: 3, fc_hidden: 16 })]);
        assert!(c.experiment(Family::MiniVit, InputKind::Optical, Variant::Raw).grid.architectures.is_empty());
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
    }
}
