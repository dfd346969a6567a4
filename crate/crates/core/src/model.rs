//! Two-stream encoder with fusion sites and the multi-scale regression head.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::attention::{maf_module, AttentionLog, MafModuleParams};
use crate::autodiff::{Tape, Var};
use crate::error::dim_err;
use crate::params::{Init, ParamId, ParamStore};
use crate::{Error, Result, Scalar, Tensor};

/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 64;
/// Density maps are produced at `1 / OUTPUT_STRIDE` of the input resolution.
pub const OUTPUT_STRIDE: usize = 8;
pub const RGB_CHANNELS: usize = 3;
pub const THERMAL_CHANNELS: usize = 1;
/// Dilation rates of the three parallel head branches.
pub const DILATION_RATES: [usize; 3] = [1, 2, 3];

/// Five convolution stages, each closed by a 2×2 max-pool.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct BackboneConfig {
    pub stage_channels: [usize; 5],
    pub stage_conv_counts: [usize; 5],
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct EncoderConfig {
    /// Fusion modules attached after the last `num_maf_modules` stages (1..=4).
    pub num_maf_modules: usize,
    /// Patch size per module, shallowest first.
    pub patch_sizes: Vec<usize>,
    /// Fusion blocks per module, shallowest first.
    pub maf_depths: Vec<usize>,
    /// Token width D.
    pub dim: usize,
    pub heads: usize,
    pub use_positional_embedding: bool,
    /// Rows of the positional table when it is enabled.
    pub max_tokens: usize,
    /// Multiplier on the initial patch-embedding matrix `E`.
    ///
    /// Each block multiplies two residual branches elementwise, so token
    /// magnitudes are raised to the power `2^depth` per module; a gain below
    /// one starts every module near its skip connection.
    #[cfg_attr(feature = "serde", serde(default = "default_embed_gain"))]
    pub embed_init_gain: f64,
}

#[cfg(feature = "serde")]
fn default_embed_gain() -> f64 {
    DEFAULT_EMBED_GAIN
}

/// Default for [`EncoderConfig::embed_init_gain`].
pub const DEFAULT_EMBED_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct MmaConfig {
    /// Common channel width M after the per-scale projections.
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub mma: MmaConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "kebab-case"))]
pub enum Preset {
    Toy,
    PaperScale,
}

/// Default patch size of a fusion module attached after `stage` (1-based).
fn default_patch(stage: usize) -> usize {
    match stage {
        2 => 4,
        3 => 2,
        _ => 1,
    }
}

impl EncoderConfig {
    /// `count` modules with the default patch sizes and depth 2.
    pub fn with_modules(count: usize, dim: usize, heads: usize) -> Self {
        let first = 6 - count.clamp(1, 4);
        Self {
            num_maf_modules: count,
            patch_sizes: (first..=5).map(default_patch).collect(),
            maf_depths: alloc::vec![2; count.clamp(1, 4)],
            dim,
            heads,
            use_positional_embedding: false,
            max_tokens: 4096,
            embed_init_gain: DEFAULT_EMBED_GAIN,
        }
    }

    /// Stage (1-based) after which module `i` sits.
    pub fn stage_of(&self, i: usize) -> usize {
        6 - self.num_maf_modules + i
    }
}

impl ModelConfig {
    /// Small configuration for desk-scale runs.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [8, 16, 32, 64, 64],
                stage_conv_counts: [1, 1, 2, 2, 2],
            },
            encoder: EncoderConfig::with_modules(3, 64, 4),
            mma: MmaConfig { width: 32 },
        }
    }

    /// VGG19-sized backbones with D = 768.
    pub fn paper_scale() -> Self {
        Self {
            backbone: BackboneConfig {
                stage_channels: [64, 128, 256, 512, 512],
                stage_conv_counts: [2, 2, 4, 4, 4],
            },
            encoder: EncoderConfig::with_modules(3, 768, 8),
            mma: MmaConfig { width: 128 },
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.stage_channels.iter().chain(&b.stage_conv_counts).any(|&v| v == 0) {
            return Err(Error::Config("backbone channels and conv counts must be positive".into()));
        }
        let e = &self.encoder;
        if !(1..=4).contains(&e.num_maf_modules) {
            return Err(Error::Config(format!(
                "num_maf_modules must be in 1..=4, got {}",
                e.num_maf_modules
            )));
        }
        if e.patch_sizes.len() != e.num_maf_modules || e.maf_depths.len() != e.num_maf_modules {
            return Err(Error::Config(format!(
                "patch_sizes ({}) and maf_depths ({}) must both have num_maf_modules = {} entries",
                e.patch_sizes.len(),
                e.maf_depths.len(),
                e.num_maf_modules
            )));
        }
        if e.patch_sizes.iter().chain(&e.maf_depths).any(|&v| v == 0) {
            return Err(Error::Config("patch sizes and depths must be positive".into()));
        }
        if e.heads == 0 || !e.dim.is_multiple_of(e.heads) {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", e.dim, e.heads)));
        }
        if e.use_positional_embedding && e.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        if !(e.embed_init_gain.is_finite() && e.embed_init_gain >= 0.0) {
            return Err(Error::Config(format!(
                "embed_init_gain must be finite and >= 0, got {}",
                e.embed_init_gain
            )));
        }
        if self.mma.width == 0 {
            return Err(Error::Config("mma width must be positive".into()));
        }
        Ok(())
    }
}

/// One 3×3 (or 1×1) convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: usize,
        dilation: usize,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.he_conv(cout, cin, k)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            padding,
            dilation,
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var, relu: bool) -> Result<Var> {
        let y = tape.conv2d(x, tape.p(self.weight), tape.p(self.bias), 1, self.padding, self.dilation)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub stages: Vec<Vec<ConvLayer>>,
}

impl Backbone {
    fn init<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cfg: &BackboneConfig, in_channels: usize) -> Self {
        let mut cin = in_channels;
        let stages = (0..5)
            .map(|s| {
                (0..cfg.stage_conv_counts[s])
                    .map(|c| {
                        let cout = cfg.stage_channels[s];
                        let layer = ConvLayer::init(store, init, &format!("{name}.stage{}.conv{c}", s + 1), cin, cout, 3, 1, 1);
                        cin = cout;
                        layer
                    })
                    .collect()
            })
            .collect();
        Self { stages }
    }

    /// Convolutions of stage `s` (0-based) followed by the max-pool.
    fn stage<T: Scalar>(&self, tape: &mut Tape<T>, s: usize, mut x: Var) -> Result<Var> {
        for layer in &self.stages[s] {
            x = layer.apply(tape, x, true)?;
        }
        tape.maxpool2d(x)
    }
}

/// Parameters of the multi-scale dilated regression head.
#[derive(Clone, Debug, PartialEq)]
pub struct MmaParams {
    /// Per scale: 3×3 projection of the concatenated pair (2C → M).
    pub project: Vec<ConvLayer>,
    /// Dilated 3×3 branches (M → M), rates 1, 2, 3.
    pub dilated: Vec<ConvLayer>,
    /// 1×1 skip branch (M → 3M).
    pub skip: ConvLayer,
    /// 3×3 fusion (3M → M).
    pub fuse: ConvLayer,
    /// 1×1 density readout (M → 1).
    pub head: ConvLayer,
}

/// A fusion module and the stage (1-based) it follows.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSite {
    pub stage: usize,
    pub params: MafModuleParams,
}

/// Paired RGB/thermal feature maps `[1, C, h, w]` at one scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeaturePair {
    pub rgb: Var,
    pub thermal: Var,
}

/// Parameter layout of the full network; values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct MafNet {
    pub config: ModelConfig,
    pub rgb: Backbone,
    pub thermal: Backbone,
    pub fusion: Vec<FusionSite>,
    pub mma: MmaParams,
}

impl MafNet {
    /// Builds the layout and a seeded initial parameter store.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let b = &config.backbone;
        let rgb = Backbone::init(&mut store, &mut init, "rgb", b, RGB_CHANNELS);
        let thermal = Backbone::init(&mut store, &mut init, "thermal", b, THERMAL_CHANNELS);
        let e = &config.encoder;
        let pos = e.use_positional_embedding.then_some(e.max_tokens);
        let fusion = (0..e.num_maf_modules)
            .map(|i| {
                let stage = e.stage_of(i);
                let params = MafModuleParams::init(
                    &mut store,
                    &mut init,
                    &format!("maf{i}"),
                    b.stage_channels[stage - 1],
                    e.patch_sizes[i],
                    e.maf_depths[i],
                    e.dim,
                    e.heads,
                    pos,
                )?;
                store.get_mut(params.embed.e).scale_assign(T::from_f64_lossy(e.embed_init_gain));
                Ok(FusionSite { stage, params })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = config.mma.width;
        let project = (0..3)
            .map(|s| {
                let c = b.stage_channels[s + 2];
                ConvLayer::init(&mut store, &mut init, &format!("mma.project{s}"), 2 * c, m, 3, 1, 1)
            })
            .collect();
        let dilated = DILATION_RATES
            .iter()
            .map(|&r| ConvLayer::init(&mut store, &mut init, &format!("mma.dilated{r}"), m, m, 3, r, r))
            .collect();
        let skip = ConvLayer::init(&mut store, &mut init, "mma.skip", m, 3 * m, 1, 0, 1);
        let fuse = ConvLayer::init(&mut store, &mut init, "mma.fuse", 3 * m, m, 3, 1, 1);
        let head = ConvLayer::init(&mut store, &mut init, "mma.head", m, 1, 1, 0, 1);
        // the head reads post-relu features; non-negative weights keep the
        // final relu open at initialization
        let w = store.get_mut(head.weight);
        *w = w.map(|v| v.abs());
        let net = Self {
            config: config.clone(),
            rgb,
            thermal,
            fusion,
            mma: MmaParams {
                project,
                dilated,
                skip,
                fuse,
                head,
            },
        };
        Ok((net, store))
    }

    /// Checks image shapes `[3,H,W]` and `[1,H,W]` against the input contract.
    pub fn check_input(&self, rgb: &[usize], thermal: &[usize]) -> Result<(usize, usize)> {
        let (h, w) = match (rgb, thermal) {
            (&[RGB_CHANNELS, h, w], &[THERMAL_CHANNELS, th, tw]) if (h, w) == (th, tw) => (h, w),
            _ => {
                return Err(dim_err!(
                    "model input must be rgb [3,H,W] and thermal [1,H,W] of equal size, got {:?} and {:?}",
                    rgb,
                    thermal
                ))
            }
        };
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(dim_err!("input {}x{} is not divisible by {}", h, w, INPUT_MULTIPLE));
        }
        for site in &self.fusion {
            let scale = 1 << site.stage;
            let p = site.params.embed.patch;
            if (h / scale) % p != 0 || (w / scale) % p != 0 {
                return Err(dim_err!(
                    "input {}x{} gives {}x{} maps at stage {}, not divisible by patch size {}",
                    h,
                    w,
                    h / scale,
                    w / scale,
                    site.stage,
                    p
                ));
            }
        }
        Ok((h, w))
    }

    fn fuse_pair<T: Scalar>(&self, tape: &mut Tape<T>, index: usize, r: Var, t: Var, log: Option<&mut AttentionLog>) -> Result<(Var, Var)> {
        let site = &self.fusion[index];
        let s = tape.value(r).shape().to_vec();
        let chw = [s[1], s[2], s[3]];
        let r3 = tape.reshape(r, &chw)?;
        let t3 = tape.reshape(t, &chw)?;
        let mut log = log;
        if let Some(l) = log.as_deref_mut() {
            l.set_module(index);
        }
        let (fr, ft) = maf_module(tape, r3, t3, &site.params, log)?;
        Ok((tape.reshape(fr, &s)?, tape.reshape(ft, &s)?))
    }

    /// Runs both backbones with fusion after the configured stages and
    /// returns the pairs at 1/8, 1/16 and 1/32 scale.
    pub fn encoder_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        rgb: Var,
        thermal: Var,
        mut log: Option<&mut AttentionLog>,
    ) -> Result<[FeaturePair; 3]> {
        let (h, w) = self.check_input(tape.value(rgb).shape(), tape.value(thermal).shape())?;
        let mut r = tape.reshape(rgb, &[1, RGB_CHANNELS, h, w])?;
        let mut t = tape.reshape(thermal, &[1, THERMAL_CHANNELS, h, w])?;
        let mut pairs = Vec::with_capacity(3);
        for s in 0..5 {
            r = self.rgb.stage(tape, s, r)?;
            t = self.thermal.stage(tape, s, t)?;
            if let Some(i) = self.fusion.iter().position(|f| f.stage == s + 1) {
                (r, t) = self.fuse_pair(tape, i, r, t, log.as_deref_mut())?;
            }
            if s >= 2 {
                pairs.push(FeaturePair { rgb: r, thermal: t });
            }
        }
        Ok([pairs[0], pairs[1], pairs[2]])
    }

    /// Regression head: per-scale pair projection, upsample and sum, three
    /// dilated branches plus a 1×1 skip, then fusion and a 1×1 readout with
    /// a final relu. Returns `[1, 1, h, w]` at the finest pair's resolution.
    pub fn mma_forward<T: Scalar>(&self, tape: &mut Tape<T>, pairs: &[FeaturePair; 3]) -> Result<Var> {
        let fine = tape.value(pairs[0].rgb).shape().to_vec();
        if fine.len() != 4 {
            return Err(dim_err!("mma: expected [1,C,h,w] features, got {:?}", fine));
        }
        let (h, w) = (fine[2], fine[3]);
        let mut acc: Option<Var> = None;
        for (s, pair) in pairs.iter().enumerate() {
            let rs = tape.value(pair.rgb).shape().to_vec();
            let expected = [1, self.config.backbone.stage_channels[s + 2], h >> s, w >> s];
            if rs != expected || tape.value(pair.thermal).shape() != expected {
                return Err(dim_err!(
                    "mma: scale {} pair has shapes {:?} / {:?}, expected {:?}",
                    s,
                    rs,
                    tape.value(pair.thermal).shape(),
                    expected
                ));
            }
            let cat = tape.concat(&[pair.rgb, pair.thermal], 1)?;
            let mut y = self.mma.project[s].apply(tape, cat, true)?;
            if s > 0 {
                y = tape.upsample_bilinear(y, h, w)?;
            }
            acc = Some(match acc {
                None => y,
                Some(a) => tape.add(a, y)?,
            });
        }
        let trunk = acc.expect("three scales");
        let branches = self
            .mma
            .dilated
            .iter()
            .map(|layer| layer.apply(tape, trunk, true))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat(&branches, 1)?;
        let skip = self.mma.skip.apply(tape, trunk, true)?;
        let merged = tape.add(cat, skip)?;
        let fused = self.mma.fuse.apply(tape, merged, true)?;
        let density = self.mma.head.apply(tape, fused, false)?;
        Ok(tape.relu(density))
    }

    /// Density map `[1, 1, H/8, W/8]` for one RGB `[3,H,W]` / thermal `[1,H,W]` pair.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, rgb: Var, thermal: Var, log: Option<&mut AttentionLog>) -> Result<Var> {
        let pairs = self.encoder_forward(tape, rgb, thermal, log)?;
        self.mma_forward(tape, &pairs)
    }

    /// Convenience: binds `store`, runs the forward pass and returns the density map.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, rgb: &Tensor<T>, thermal: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        tape.bind(store);
        let r = tape.constant(rgb.clone());
        let t = tape.constant(thermal.clone());
        let d = self.forward(&mut tape, r, t, None)?;
        Ok(tape.value(d).clone())
    }

    /// Ids of every fusion-module parameter, in store order.
    pub fn fusion_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for site in &self.fusion {
            let e = &site.params.embed;
            ids.push(e.e);
            ids.push(e.e_back);
            ids.extend(e.pos);
            for b in &site.params.blocks {
                for m in [&b.ima_r, &b.ima_t, &b.cma_r, &b.cma_t] {
                    ids.extend(m.param_ids());
                }
            }
        }
        ids
    }
}

/// One line of a parameter listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub numel: usize,
}

/// Names, shapes and element counts of every parameter in `store`.
pub fn describe<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamInfo> {
    store
        .iter()
        .map(|(_, name, t)| ParamInfo {
            name: name.into(),
            shape: t.shape().to_vec(),
            numel: t.numel(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        let mut bad = ModelConfig::toy();
        bad.encoder.num_maf_modules = 5;
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::toy();
        bad.encoder.patch_sizes.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn module_counts_attach_to_last_stages() {
        for n in 1..=4 {
            let e = EncoderConfig::with_modules(n, 64, 4);
            let stages: Vec<usize> = (0..n).map(|i| e.stage_of(i)).collect();
            assert_eq!(*stages.last().unwrap(), 5);
            assert_eq!(stages[0], 6 - n);
            assert_eq!(e.patch_sizes.len(), n);
        }
        assert_eq!(EncoderConfig::with_modules(3, 64, 4).patch_sizes, alloc::vec![2, 1, 1]);
    }

    #[test]
    fn input_contract() {
        let (net, _) = MafNet::init::<f32>(&ModelConfig::toy(), 0).unwrap();
        assert!(net.check_input(&[3, 64, 128], &[1, 64, 128]).is_ok());
        assert!(net.check_input(&[3, 96, 64], &[1, 96, 64]).is_err());
        assert!(net.check_input(&[3, 64, 64], &[1, 64, 128]).is_err());
        assert!(net.check_input(&[1, 64, 64], &[1, 64, 64]).is_err());
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let (_, a) = MafNet::init::<f32>(&ModelConfig::toy(), 1).unwrap();
        let (_, b) = MafNet::init::<f32>(&ModelConfig::toy(), 2).unwrap();
        assert_eq!(describe(&a), describe(&b));
        assert_ne!(a, b);
    }
}
