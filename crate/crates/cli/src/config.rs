//! JSON run configuration. Every field is optional with a documented
//! default; unknown keys anywhere are rejected so hyperparameter typos
//! cannot pass silently. The all-defaults document reproduces the reference
//! configuration (T=1000, beta 1e-4 -> 0.02, lambda_h=100, lambda_f=0.5,
//! batch 16, lr 1e-5, image 32).

use std::path::Path;

use serde::{Deserialize, Serialize};

use emdiff::error::{Error, Result};
use emdiff::guidance::{HeatmapNetConfig, HighPassFilter};
use emdiff::schedule::NoiseSchedule;
use emdiff::score::ScoreNetConfig;
use emdiff::synth::GenParams;
use emdiff::trainer::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_max: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    LinearBank,
    TrainedNet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSection {
    pub kind: HeatmapKind,
    pub keypoints: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub heat_sigma: f64,
    pub train_steps: usize,
    pub train_batch: usize,
    pub train_learning_rate: f64,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        HeatmapSection {
            kind: HeatmapKind::TrainedNet,
            keypoints: 5,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 32,
            heat_sigma: 1.5,
            train_steps: 1500,
            train_batch: 8,
            train_learning_rate: 2e-3,
        }
    }
}

impl HeatmapSection {
    pub fn net_config(&self, image_size: usize, t_max: usize) -> HeatmapNetConfig {
        HeatmapNetConfig {
            image_size,
            keypoints: self.keypoints,
            base_channels: self.base_channels,
            depth: self.depth,
            time_embed_dim: self.time_embed_dim,
            heat_sigma: self.heat_sigma,
            t_max,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub lambda_h: f64,
    pub lambda_f: f64,
    pub filter: HighPassFilter,
    pub heatmap: HeatmapSection,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            lambda_h: 100.0,
            lambda_f: 0.5,
            filter: HighPassFilter::Laplacian3x3,
            heatmap: HeatmapSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    /// Reverse steps; null means one per schedule index.
    pub num_steps: Option<usize>,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            num_steps: None,
            seed: 0,
            record_trajectory: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Master seed for the paired dataset.
    pub seed: u64,
    pub params: GenParams,
    /// Master seed for the source-only extras dataset.
    pub extra_seed: u64,
    pub extra: GenParams,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            params: GenParams::default(),
            extra_seed: 1,
            extra: GenParams {
                n_subjects: 12,
                samples_per_subject: 15,
                subject_offset: 1000,
                vis_only: true,
                ..GenParams::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub classifier_iterations: usize,
    pub classifier_learning_rate: f64,
    /// Per-condition training images drawn from the train split for the
    /// augmentation comparison (0 = use all).
    pub fer_train_per_subject: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            classifier_iterations: 400,
            classifier_learning_rate: 0.5,
            fer_train_per_subject: 2,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub network: ScoreNetConfig,
    pub guidance: GuidanceSection,
    pub training: TrainConfig,
    pub sampling: SamplingSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::InvalidConfig(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.network.validate()?;
        self.training.validate()?;
        self.data.params.validate()?;
        self.data.extra.validate()?;
        if self.guidance.lambda_h < 0.0 || self.guidance.lambda_f < 0.0 {
            return Err(Error::InvalidConfig(
                "guidance weights must be non-negative".into(),
            ));
        }
        if let Some(n) = self.sampling.num_steps {
            if n == 0 || n > self.schedule.t_max {
                return Err(Error::InvalidConfig(format!(
                    "sampling.num_steps must be in 1..={}, got {n}",
                    self.schedule.t_max
                )));
            }
        }
        if self.network.image_size != self.data.params.image_size {
            return Err(Error::InvalidConfig(format!(
                "network.image_size {} does not match data.params.image_size {}",
                self.network.image_size, self.data.params.image_size
            )));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.sampling.num_steps.unwrap_or(self.schedule.t_max)
    }

    /// Budget-reduced overrides for smoke runs (`ablate --tiny`).
    pub fn apply_tiny(&mut self) {
        self.schedule.t_max = 40;
        self.schedule.beta_min = 5e-3;
        self.schedule.beta_max = 0.25;
        self.network.base_channels = 4;
        self.network.time_embed_dim = 8;
        self.training.max_steps = 40;
        self.training.batch_size = 4;
        self.training.learning_rate = 1e-3;
        self.guidance.heatmap.base_channels = 4;
        self.guidance.heatmap.time_embed_dim = 8;
        self.guidance.heatmap.train_steps = 40;
        self.guidance.heatmap.train_batch = 4;
        self.guidance.lambda_h = 4.0;
        self.guidance.lambda_f = 0.05;
        self.sampling.num_steps = None;
        self.data.params.n_subjects = 5;
        self.data.params.samples_per_subject = 6;
        self.eval.classifier_iterations = 100;
    }
}

/// Human-readable listing of every config key with its default.
pub fn config_reference() -> String {
    let default = serde_json::to_string_pretty(&RunConfig::default()).unwrap();
    format!(
        "CONFIG FILE (--config): JSON with the sections below. Every key is \
         optional; unknown keys are rejected. Defaults:\n{default}"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_reference_configuration() {
        let c = RunConfig::default();
        assert_eq!(c.schedule.t_max, 1000);
        assert_eq!(c.schedule.beta_min, 1e-4);
        assert_eq!(c.schedule.beta_max, 0.02);
        assert_eq!(c.guidance.lambda_h, 100.0);
        assert_eq!(c.guidance.lambda_f, 0.5);
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.training.learning_rate, 1e-5);
        assert_eq!(c.network.image_size, 32);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"bogus": 1}"#,
            r#"{"schedule": {"t_max": 100, "bogus": 1}}"#,
            r#"{"training": {"learninrate": 0.1}}"#,
            r#"{"guidance": {"heatmap": {"sigma": 2.0}}}"#,
        ] {
            let r: std::result::Result<RunConfig, _> = serde_json::from_str(text);
            assert!(r.is_err(), "accepted: {text}");
        }
    }

    #[test]
    fn partial_configs_fill_with_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"schedule": {"t_max": 200}}"#).unwrap();
        assert_eq!(c.schedule.t_max, 200);
        assert_eq!(c.schedule.beta_min, 1e-4);
        assert_eq!(c.training.batch_size, 16);
    }

    #[test]
    fn config_reference_lists_keys() {
        let text = config_reference();
        for key in ["schedule", "lambda_h", "beta_min", "batch_size", "num_steps"] {
            assert!(text.contains(key), "missing {key}");
        }
    }
}
