//! Run configuration file.
//!
//! Every section is optional; omitted keys take their defaults and unknown
//! keys are rejected. Model sections override the chosen preset key by key.

use std::path::{Path, PathBuf};

use mafnet_core::data::{AugmentConfig, Illumination};
use mafnet_core::density::DensityConfig;
use mafnet_core::model::{EncoderConfig, ModelConfig, Preset};
use mafnet_core::optim::{AdamWConfig, Schedule};
use mafnet_core::train::InputMask;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Evaluation subset selected by illumination tag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Bright,
    Dark,
}

impl Split {
    pub fn admits(self, illumination: Illumination) -> bool {
        match self {
            Split::All => true,
            Split::Bright => illumination == Illumination::Bright,
            Split::Dark => illumination == Illumination::Dark,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Bright => "bright",
            Split::Dark => "dark",
        }
    }
}

/// Input streams fed to the network; a disabled stream sees zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modalities {
    #[default]
    Both,
    ThermalOnly,
    RgbOnly,
}

impl Modalities {
    pub fn mask(self) -> InputMask {
        match self {
            Modalities::Both => InputMask::BOTH,
            Modalities::ThermalOnly => InputMask::THERMAL_ONLY,
            Modalities::RgbOnly => InputMask::RGB_ONLY,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneOverride {
    pub stage_channels: Option<[usize; 5]>,
    pub stage_conv_counts: Option<[usize; 5]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOverride {
    /// Changing this without `patch_sizes` / `maf_depths` resets both to
    /// their per-stage defaults.
    pub num_maf_modules: Option<usize>,
    pub patch_sizes: Option<Vec<usize>>,
    pub maf_depths: Option<Vec<usize>>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub use_positional_embedding: Option<bool>,
    pub max_tokens: Option<usize>,
    pub embed_init_gain: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmaOverride {
    pub width: Option<usize>,
}

fn default_preset() -> Preset {
    Preset::Toy
}

fn default_max_iters() -> u64 {
    300
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    /// Defaults to 4 for the toy preset and 16 for paper scale.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iters")]
    pub max_iters: u64,
    /// Defaults to 10% of `max_iters`.
    #[serde(default)]
    pub warmup_iters: Option<u64>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Intermediate checkpoint interval in iterations; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub modalities: Modalities,
    #[serde(default)]
    pub density: DensityConfig,
    /// Absent means no augmentation.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub backbone: BackboneOverride,
    #[serde(default)]
    pub encoder: EncoderOverride,
    #[serde(default)]
    pub mma: MmaOverride,
    #[serde(default)]
    pub eval_split: Split,
    /// Informational; the command-line paths take precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(path.display()))
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.preset {
            Preset::Toy => 4,
            Preset::PaperScale => 16,
        })
    }

    pub fn schedule(&self) -> Schedule {
        let mut s = Schedule::with_default_warmup(self.max_iters, self.optimizer.lr_max);
        if let Some(w) = self.warmup_iters {
            s.warmup = w;
        }
        s
    }

    /// Preset with the overrides applied.
    pub fn model_config(&self) -> CliResult<ModelConfig> {
        let mut m = ModelConfig::preset(self.preset);
        let b = &self.backbone;
        if let Some(c) = b.stage_channels {
            m.backbone.stage_channels = c;
        }
        if let Some(c) = b.stage_conv_counts {
            m.backbone.stage_conv_counts = c;
        }
        let e = &self.encoder;
        if let Some(n) = e.num_maf_modules {
            let fresh = EncoderConfig::with_modules(n, m.encoder.dim, m.encoder.heads);
            m.encoder.num_maf_modules = n;
            m.encoder.patch_sizes = fresh.patch_sizes;
            m.encoder.maf_depths = fresh.maf_depths;
        }
        let enc = &mut m.encoder;
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = &e.$field {
                    enc.$field = v.clone();
                }
            )*};
        }
        apply!(
            patch_sizes,
            maf_depths,
            dim,
            heads,
            use_positional_embedding,
            max_tokens,
            embed_init_gain
        );
        if let Some(w) = self.mma.width {
            m.mma.width = w;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.batch_size == Some(0) {
            return Err(CliError::usage("batch_size must be at least 1"));
        }
        if let Some(w) = self.warmup_iters {
            if w > self.max_iters {
                return Err(CliError::usage(format!("warmup_iters {w} exceeds max_iters {}", self.max_iters)));
            }
        }
        let o = &self.optimizer;
        let finite = [o.beta1, o.beta2, o.eps, o.weight_decay, o.lr_max].iter().all(|v| v.is_finite());
        if !finite || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.lr_max < 0.0 || o.eps < 0.0 {
            return Err(CliError::usage(format!("invalid optimizer settings {o:?}")));
        }
        let d = &self.density;
        if d.kernel_size == 0 || d.kernel_size.is_multiple_of(2) || !(d.sigma.is_finite() && d.sigma > 0.0) {
            return Err(CliError::usage(format!(
                "density kernel_size must be odd and sigma positive, got {} and {}",
                d.kernel_size, d.sigma
            )));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.model_config()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    #[test]
    fn empty_object_is_the_toy_default() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg.preset, Preset::Toy);
        assert_eq!(cfg.batch_size(), 4);
        assert_eq!(cfg.max_iters, 300);
        assert_eq!(cfg.schedule().warmup, 30);
        assert_eq!(cfg.optimizer, AdamWConfig::default());
        assert_eq!(cfg.model_config().unwrap(), ModelConfig::toy());
        assert!(cfg.augment.is_none());
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        for text in [
            r#"{"batchsize": 4}"#,
            r#"{"encoder": {"depth": 2}}"#,
            r#"{"augment": {"crop": 64}}"#,
            r#"{"optimizer": {"lr": 0.1}}"#,
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.kind, ErrorKind::Usage, "{text}");
        }
    }

    #[test]
    fn overrides_apply_key_by_key() {
        let cfg = RunConfig::parse(
            r#"{"preset": "paper-scale", "encoder": {"num_maf_modules": 1, "dim": 96},
                "mma": {"width": 16}, "augment": {"crop_size": 64}}"#,
        )
        .unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.backbone, ModelConfig::paper_scale().backbone);
        assert_eq!(m.encoder.num_maf_modules, 1);
        assert_eq!(m.encoder.patch_sizes, vec![1]);
        assert_eq!(m.encoder.dim, 96);
        assert_eq!(m.mma.width, 16);
        assert_eq!(cfg.batch_size(), 16);
        assert_eq!(cfg.augment.unwrap().crop_size, 64);
        assert_eq!(cfg.augment.unwrap().hflip_prob, 0.5);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            r#"{"batch_size": 0}"#,
            r#"{"max_iters": 10, "warmup_iters": 11}"#,
            r#"{"encoder": {"heads": 5}}"#,
            r#"{"augment": {"crop_size": 100}}"#,
            r#"{"density": {"kernel_size": 4}}"#,
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::parse(r#"{"seed": 7, "modalities": "thermal-only", "eval_split": "dark"}"#).unwrap();
        let back = RunConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.modalities.mask(), InputMask::THERMAL_ONLY);
    }
}
