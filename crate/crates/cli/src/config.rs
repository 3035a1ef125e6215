//! Run configuration: one JSON file drives every subcommand.
//!
//! All fields have defaults, so `{}` is a valid config. Cross-field
//! consistency (schedule length, channel counts, encoder stride vs codec
//! geometry) is checked once in [`RunConfig::validate`] so the individual
//! commands can assume a coherent setup.

use evdi_core::adapter::DenoiserConfig;
use evdi_core::adapter::TrainConfig;
use evdi_core::diffusion::NoiseSchedule;
use evdi_core::fusion::SamplingConfig;
use evdi_core::simulator::EsimConfig;
use evdi_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            n_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::make(self.n_steps, self.beta_min, self.beta_max)
    }
}

/// Synthetic dataset shape: how many clips, the canvas, and the keyframe
/// skip pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub clips: usize,
    pub width: u16,
    pub height: u16,
    pub background: f64,
    pub objects_per_clip: usize,
    pub duration_us: u64,
    pub render_rate_hz: f64,
    /// Hidden frames between consecutive keyframes.
    pub skip: usize,
    pub keyframes: usize,
    pub esim: EsimConfig,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            clips: 2,
            width: 32,
            height: 32,
            background: 0.85,
            objects_per_clip: 1,
            duration_us: 8_000,
            render_rate_hz: 1000.0,
            skip: 7,
            keyframes: 2,
            esim: EsimConfig::default(),
        }
    }
}

impl DatasetParams {
    /// Frames a scene of this duration renders.
    pub fn rendered_frames(&self) -> usize {
        (self.duration_us as f64 * self.render_rate_hz / 1e6).round() as usize + 1
    }

    fn validate(&self) -> Result<()> {
        if self.clips == 0 {
            return Err(Error::Config("dataset.clips must be >= 1".into()));
        }
        if self.objects_per_clip == 0 {
            return Err(Error::Config("dataset.objects_per_clip must be >= 1".into()));
        }
        if self.keyframes < 2 {
            return Err(Error::Config("dataset.keyframes must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Config("dataset.background must lie in [0, 1]".into()));
        }
        let needed = (self.keyframes - 1) * (self.skip + 1) + 1;
        let rendered = self.rendered_frames();
        if rendered < needed {
            return Err(Error::Config(format!(
                "dataset.duration_us {} at dataset.render_rate_hz {} renders {rendered} \
                 frames but {} keyframes with skip {} need {needed}",
                self.duration_us, self.render_rate_hz, self.keyframes, self.skip
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Pass prediction and reference through the codec before scoring.
    pub roundtrip: bool,
    /// Output-frame indices to score; all frames when absent.
    pub indices: Option<Vec<usize>>,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            roundtrip: false,
            indices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub denoiser: DenoiserConfig,
    pub sampling: SamplingConfig,
    pub pretrain: TrainConfig,
    pub adapt: TrainConfig,
    pub dataset: DatasetParams,
    pub evaluate: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            schedule: ScheduleParams::default(),
            denoiser: DenoiserConfig::default(),
            sampling: SamplingConfig::default(),
            pretrain: TrainConfig::default(),
            adapt: TrainConfig::default(),
            dataset: DatasetParams::default(),
            evaluate: EvalParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.sampling.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.dataset.validate()?;
        if self.denoiser.n_steps != self.schedule.n_steps {
            return Err(Error::Config(format!(
                "denoiser.n_steps {} must equal schedule.n_steps {}",
                self.denoiser.n_steps, self.schedule.n_steps
            )));
        }
        if self.denoiser.stack_channels != self.sampling.stacker.channels() {
            return Err(Error::Config(format!(
                "denoiser.stack_channels {} must equal 2 * sampling.stacker.stacks = {}",
                self.denoiser.stack_channels,
                self.sampling.stacker.channels()
            )));
        }
        if self.denoiser.latent_channels != self.sampling.codec.latent_channels() {
            return Err(Error::Config(format!(
                "denoiser.latent_channels {} must equal the codec's latent channels {}",
                self.denoiser.latent_channels,
                self.sampling.codec.latent_channels()
            )));
        }
        if self.denoiser.encoder_downsample * self.sampling.codec.upsample != self.sampling.codec.d
        {
            return Err(Error::Config(format!(
                "denoiser.encoder_downsample {} times sampling.codec.upsample {} must equal \
                 sampling.codec.d {} so event stacks land on the latent grid",
                self.denoiser.encoder_downsample, self.sampling.codec.upsample, self.sampling.codec.d
            )));
        }
        if self.sampling.frames < 2 {
            return Err(Error::Config("sampling.frames must be >= 2".into()));
        }
        Ok(())
    }
}
