//! Flat `key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::WindowConfig;
use crate::geometry::ImageSize;
use crate::inference::InferConfig;
use crate::localizer::{AdapterType, ConditioningMode, ToyModelConfig};
use crate::piza::{LossWeights, PizaConfig};
use crate::prior::Bandwidth;
use crate::search::{ExponentMode, GenConfig};
use crate::synth::{ProxyConfig, SynthConfig};
use crate::train::{FineTuneConfig, PretrainConfig};

/// Every tunable of the pipeline. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub image_size: u32,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub n_train: usize,
    pub n_test: usize,

    /// Scenes with ordinarily sized objects, used for the ratio prior and
    /// for pre-training.
    pub proxy_count: usize,
    pub proxy_image_size: u32,
    pub proxy_ratio_min: f64,
    pub proxy_ratio_max: f64,
    /// `"auto"` (Silverman) or a number.
    pub bandwidth: String,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda2_growth: f64,
    pub min_edge: f64,
    pub t_max: usize,
    pub exponent_mode: String,
    pub max_retries: usize,

    pub crop: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_tokens: usize,
    pub conditioning: String,
    pub prompt_len: usize,
    pub rank: usize,
    pub adapter_bottleneck: usize,
    pub adapter_type: String,

    pub d: usize,
    pub piza_layers: usize,
    pub piza_heads: usize,
    pub piza_width: usize,
    pub piza_ffn: usize,
    pub fourier_freqs: usize,
    pub fourier_scale: f64,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub negative_rate: f64,
    pub min_scale: f64,

    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub jitter: f64,
    pub eos_weight: f64,
    pub progress_weight: f64,

    pub max_steps: usize,
    pub eos_threshold: f64,
    pub fixed_steps: Vec<usize>,

    pub window_size: u32,
    pub window_stride: u32,
    pub tile_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let proxy = ProxyConfig::default();
        let gen = GenConfig::default();
        let model = ToyModelConfig::default();
        let piza = PizaConfig::default();
        let pre = PretrainConfig::default();
        let ft = FineTuneConfig::default();
        let inf = InferConfig::default();
        RunConfig {
            seed: 0,
            image_size: synth.image_size.width,
            ratio_min: synth.ratio_min,
            ratio_max: synth.ratio_max,
            distractors_min: synth.distractors_min,
            distractors_max: synth.distractors_max,
            n_train: 2000,
            n_test: 500,
            proxy_count: 6000,
            proxy_image_size: proxy.image_size.width,
            proxy_ratio_min: proxy.ratio_min,
            proxy_ratio_max: proxy.ratio_max,
            bandwidth: "auto".into(),
            lambda1: gen.lambda1,
            lambda2: gen.lambda2,
            lambda2_growth: gen.lambda2_growth,
            min_edge: gen.min_edge,
            t_max: gen.t_max,
            exponent_mode: gen.exponent_mode.to_string(),
            max_retries: gen.max_retries,
            crop: model.crop,
            patch: model.patch,
            width: model.width,
            depth: model.depth,
            heads: model.heads,
            ffn: model.ffn,
            max_tokens: model.max_tokens,
            conditioning: "adapter".into(),
            prompt_len: 8,
            rank: 16,
            adapter_bottleneck: 32,
            adapter_type: "B".into(),
            d: piza.d,
            piza_layers: piza.layers,
            piza_heads: piza.heads,
            piza_width: piza.width,
            piza_ffn: piza.ffn,
            fourier_freqs: piza.fourier_freqs,
            fourier_scale: piza.fourier_scale,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.lr,
            negative_rate: pre.negative_rate,
            min_scale: pre.min_scale,
            lr: ft.lr,
            batch: ft.batch_size,
            epochs: ft.epochs,
            lr_decay_epoch: ft.decay_epoch,
            lr_decay_factor: ft.decay_factor,
            jitter: ft.jitter,
            eos_weight: ft.weights.eos,
            progress_weight: ft.weights.progress,
            max_steps: inf.max_steps,
            eos_threshold: inf.eos_threshold,
            fixed_steps: vec![1, 2, 3],
            window_size: 500,
            window_stride: 250,
            tile_grid: 3,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Builds every derived configuration once, surfacing the first error.
    pub fn validate(&self) -> Result<()> {
        self.synth()?;
        self.proxy()?;
        self.gen()?.validate()?;
        self.bandwidth()?;
        self.model()?.validate()?;
        self.piza()?.validate()?;
        self.fine_tune().validate()?;
        self.window()?;
        if self.fixed_steps.contains(&0) || self.max_steps == 0 || self.tile_grid == 0 {
            return Err(Error::Config("step counts and tile_grid must be positive".into()));
        }
        if self.n_train == 0 || self.n_test == 0 || self.proxy_count == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            image_size: ImageSize::new(self.image_size, self.image_size)?,
            ratio_min: self.ratio_min,
            ratio_max: self.ratio_max,
            distractors_min: self.distractors_min,
            distractors_max: self.distractors_max,
            seed: self.seed,
            ..SynthConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn proxy(&self) -> Result<ProxyConfig> {
        let cfg = ProxyConfig {
            image_size: ImageSize::new(self.proxy_image_size, self.proxy_image_size)?,
            ratio_min: self.proxy_ratio_min,
            ratio_max: self.proxy_ratio_max,
            distractors_min: self.distractors_min,
            distractors_max: self.distractors_max,
            ..ProxyConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bandwidth(&self) -> Result<Bandwidth> {
        if self.bandwidth == "auto" {
            return Ok(Bandwidth::Auto);
        }
        let h: f64 = self
            .bandwidth
            .parse()
            .map_err(|_| Error::Config(format!("bandwidth {:?} is neither auto nor a number", self.bandwidth)))?;
        Ok(Bandwidth::Fixed(h))
    }

    pub fn gen(&self) -> Result<GenConfig> {
        Ok(GenConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda2_growth: self.lambda2_growth,
            min_edge: self.min_edge,
            t_max: self.t_max,
            exponent_mode: self.exponent_mode.parse::<ExponentMode>()?,
            max_retries: self.max_retries,
        })
    }

    pub fn conditioning(&self) -> Result<ConditioningMode> {
        ConditioningMode::from_parts(
            &self.conditioning,
            self.prompt_len,
            self.rank,
            self.adapter_bottleneck,
            self.adapter_type.parse::<AdapterType>()?,
        )
    }

    /// Localizer architecture; `conditioning` is applied by the caller.
    pub fn model(&self) -> Result<ToyModelConfig> {
        Ok(ToyModelConfig {
            crop: self.crop,
            patch: self.patch,
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            ffn: self.ffn,
            max_tokens: self.max_tokens,
            conditioning: self.conditioning()?,
            seed: self.seed,
        })
    }

    pub fn piza(&self) -> Result<PizaConfig> {
        let cfg = PizaConfig {
            d: self.d,
            layers: self.piza_layers,
            heads: self.piza_heads,
            width: self.piza_width,
            ffn: self.piza_ffn,
            fourier_freqs: self.fourier_freqs,
            fourier_scale: self.fourier_scale,
            t_max: self.t_max,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            negative_rate: self.negative_rate,
            min_scale: self.min_scale,
            seed: self.seed,
        }
    }

    pub fn fine_tune(&self) -> FineTuneConfig {
        FineTuneConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            decay_epoch: self.lr_decay_epoch,
            decay_factor: self.lr_decay_factor,
            jitter: self.jitter,
            weights: LossWeights {
                eos: self.eos_weight,
                progress: self.progress_weight,
            },
            single_shot: false,
            seed: self.seed,
        }
    }

    pub fn infer(&self) -> InferConfig {
        InferConfig {
            max_steps: self.max_steps,
            eos_threshold: self.eos_threshold,
        }
    }

    pub fn window(&self) -> Result<WindowConfig> {
        WindowConfig::new(self.window_size, self.window_stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        d.validate().unwrap();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap(), d);
        assert_eq!(d.lr, 2e-4);
        assert_eq!((d.batch, d.epochs, d.lr_decay_epoch, d.lr_decay_factor), (16, 5, 3, 0.5));
        assert_eq!((d.d, d.rank), (16, 16));
    }

    #[test]
    fn parses_flat_keys() {
        let c = RunConfig::parse("# toy run\nseed = 7\nlr = 2e-3\nconditioning = \"lowrank\"\nrank = 4\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.conditioning().unwrap(), ConditioningMode::LowRank { rank: 4 });
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("learning_rate = 0.1").is_err());
        assert!(RunConfig::parse("conditioning = \"magic\"").is_err());
        assert!(RunConfig::parse("window_stride = 600").is_err());
        assert!(RunConfig::parse("patch = 7").is_err());
        assert!(RunConfig::parse("bandwidth = \"wide\"").is_err());
    }
}
