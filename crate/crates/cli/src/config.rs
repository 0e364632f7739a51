//! Declarative run configuration. Every field is optional; defaults follow
//! the training recipe this pipeline ships with (learning rate 1e-5, batch
//! 12, 50 epochs, lambda 0.01 gated every 100 batches, epsilon 1e-7, real
//! 7x7 skip kernels, 512-voxel cubes). Unknown keys are rejected.

use anyhow::{Context, Result};
use serde::Deserialize;
use ssnet::losses::LossConfig;
use ssnet::networks::{GeneratorConfig, KernelMode};
use ssnet::phantom::PhantomSpec;
use ssnet::training::TrainConfig;
use ssnet::volume::ViewAxis;
use std::path::Path;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub train: TrainSection,
    pub loss: LossSection,
    pub generator: GeneratorSection,
    pub phantom: PhantomSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cube_side: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            cube_side: d.cube_side,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub epsilon: f64,
    pub lambda: f64,
    pub gate_period: u64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        LossSection {
            epsilon: d.epsilon,
            lambda: d.lambda,
            gate_period: d.gate_period,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub kernel_mode: KernelMode,
    pub num_classes: usize,
    pub encoder_stage_channels: [usize; 5],
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = GeneratorConfig::default();
        GeneratorSection {
            kernel_mode: d.kernel_mode,
            num_classes: d.num_classes,
            encoder_stage_channels: d.encoder_stage_channels,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub grid_side: Option<usize>,
    pub semi_axes_range: Option<(f64, f64)>,
    pub max_rotation_rad: Option<f64>,
    pub max_translation: Option<f64>,
    pub distractor_count: Option<(usize, usize)>,
    pub noise_sigma: Option<f64>,
    pub bias_amplitude: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))
            }
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn train_config(&self, view: ViewAxis, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            loss: LossConfig {
                epsilon: self.loss.epsilon,
                lambda: self.loss.lambda,
                gate_period: self.loss.gate_period,
                ..LossConfig::default()
            },
            view,
            seed,
            cube_side: self.train.cube_side,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: self.generator.num_classes,
            kernel_mode: self.generator.kernel_mode,
            input_side: self.train.cube_side,
            encoder_stage_channels: self.generator.encoder_stage_channels,
        }
    }

    /// Phantom spec with unset fields filled proportionally to the grid.
    pub fn phantom_spec(&self) -> PhantomSpec {
        let side = self.phantom.grid_side.unwrap_or(self.train.cube_side);
        let mut spec = PhantomSpec::sized(side);
        if let Some(v) = self.phantom.semi_axes_range {
            spec.semi_axes_range = v;
        }
        if let Some(v) = self.phantom.max_rotation_rad {
            spec.max_rotation_rad = v;
        }
        if let Some(v) = self.phantom.max_translation {
            spec.max_translation = v;
        }
        if let Some(v) = self.phantom.distractor_count {
            spec.distractor_count = v;
        }
        if let Some(v) = self.phantom.noise_sigma {
            spec.noise_sigma = v;
        }
        if let Some(v) = self.phantom.bias_amplitude {
            spec.bias_amplitude = v;
        }
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_recipe() {
        let cfg = RunConfig::default();
        let t = cfg.train_config(ViewAxis::Axial, 0);
        assert_eq!(t.learning_rate, 1e-5);
        assert_eq!(t.batch_size, 12);
        assert_eq!(t.epochs, 50);
        assert_eq!(t.cube_side, 512);
        assert_eq!(t.loss.lambda, 0.01);
        assert_eq!(t.loss.gate_period, 100);
        assert_eq!(t.loss.epsilon, 1e-7);
        let g = cfg.generator_config();
        assert_eq!(g.kernel_mode, KernelMode::Real7);
        assert_eq!(g.input_side, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("[train]\nlearning_rocket = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("learning_rocket"));
        assert!(toml::from_str::<RunConfig>("definitely_not_a_key = 1\n").is_err());
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg: RunConfig =
            toml::from_str("[train]\nbatch_size = 4\ncube_side = 64\n[loss]\nlambda = 0.0\n")
                .unwrap();
        let t = cfg.train_config(ViewAxis::Coronal, 9);
        assert_eq!(t.batch_size, 4);
        assert_eq!(t.cube_side, 64);
        assert_eq!(t.loss.lambda, 0.0);
        assert_eq!(t.learning_rate, 1e-5);
        assert_eq!(cfg.generator_config().input_side, 64);
    }
}
