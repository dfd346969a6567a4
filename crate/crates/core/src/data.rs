//! Paired samples, geometric augmentation and synthetic RGB-T scenes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[cfg(not(any(test, feature = "std")))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::kernels::upsample_bilinear;
use crate::density::PointAnnotation;
use crate::error::dim_err;
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "lowercase"))]
pub enum Illumination {
    Bright,
    Dark,
    #[default]
    Unknown,
}

/// One registered RGB/thermal pair with its head annotations.
///
/// Images hold values normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedPair {
    pub id: String,
    /// `[3, H, W]`
    pub rgb: Tensor<f32>,
    /// `[1, H, W]`
    pub thermal: Tensor<f32>,
    pub annotation: PointAnnotation,
    pub illumination: Illumination,
}

/// `(v/255 − 0.5)/0.5`
pub fn normalize_u8(v: u8) -> f32 {
    (v as f32 / 255.0 - 0.5) / 0.5
}

/// Inverse of [`normalize_u8`], rounded and clamped.
pub fn denormalize(v: f32) -> u8 {
    ((v * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

impl AnnotatedPair {
    /// Builds a pair from interleaved 8-bit RGB and single-channel 8-bit thermal.
    pub fn from_u8(
        id: impl Into<String>,
        height: usize,
        width: usize,
        rgb_interleaved: &[u8],
        thermal: &[u8],
        annotation: PointAnnotation,
        illumination: Illumination,
    ) -> Result<Self> {
        let plane = height * width;
        if rgb_interleaved.len() != 3 * plane || thermal.len() != plane {
            return Err(dim_err!(
                "pair buffers ({} rgb bytes, {} thermal bytes) do not match {}x{}",
                rgb_interleaved.len(),
                thermal.len(),
                height,
                width
            ));
        }
        let mut rgb = alloc::vec![0f32; 3 * plane];
        for (i, px) in rgb_interleaved.chunks_exact(3).enumerate() {
            for c in 0..3 {
                rgb[c * plane + i] = normalize_u8(px[c]);
            }
        }
        let pair = Self {
            id: id.into(),
            rgb: Tensor::new([3, height, width], rgb)?,
            thermal: Tensor::new([1, height, width], thermal.iter().map(|&v| normalize_u8(v)).collect())?,
            annotation,
            illumination,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn height(&self) -> usize {
        self.rgb.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let (r, t) = (self.rgb.shape(), self.thermal.shape());
        if r.len() != 3 || r[0] != 3 || t.len() != 3 || t[0] != 1 || r[1..] != t[1..] {
            return Err(dim_err!(
                "pair {}: rgb {:?} and thermal {:?} are not registered [3,H,W]/[1,H,W]",
                self.id,
                r,
                t
            ));
        }
        self.annotation.validate(r[1], r[2])
    }
}

/// Random-stream key for one sample in one epoch.
///
/// Each (seed, epoch, index) triple owns an independent ChaCha stream, so a
/// sample's transform does not depend on processing order.
pub fn keyed_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 32) ^ index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields, default))]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub hflip_prob: f64,
    pub rescale_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_size: 256,
            hflip_prob: 0.5,
            rescale_range: [0.8, 1.2],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(crate::model::INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "crop_size {} must be a positive multiple of {}",
                self.crop_size,
                crate::model::INPUT_MULTIPLE
            )));
        }
        let [lo, hi] = self.rescale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid rescale range [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0, 1]", self.hflip_prob)));
        }
        Ok(())
    }
}

/// Attempts at drawing a rescale factor that leaves room for the crop.
const RESCALE_ATTEMPTS: usize = 10;

/// Result of [`augment`]: the transformed pair plus the number of rescale
/// draws that were rejected because the image became smaller than the crop.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub pair: AnnotatedPair,
    pub rejected_scales: usize,
}

fn resize(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let data = upsample_bilinear(t.data(), s[0], (s[1], s[2]), (height, width));
    Tensor::new([s[0], height, width], data)
}

fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s[0] * size * size);
    for c in 0..s[0] {
        for y in top..top + size {
            let row = (c * s[1] + y) * s[2];
            out.extend_from_slice(&t.data()[row + left..row + left + size]);
        }
    }
    Tensor::new([s[0], size, size], out)
}

fn flip_columns(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Mirrors images left-right and maps `x → W − 1 − x`.
pub fn hflip(pair: &AnnotatedPair) -> AnnotatedPair {
    let w = pair.width() as f64;
    AnnotatedPair {
        id: pair.id.clone(),
        rgb: flip_columns(&pair.rgb),
        thermal: flip_columns(&pair.thermal),
        annotation: PointAnnotation::new(pair.annotation.points.iter().map(|&(x, y)| (w - 1.0 - x, y)).collect()),
        illumination: pair.illumination,
    }
}

/// Rescale, random square crop and optional horizontal flip, applied
/// identically to both images and the head points.
pub fn augment(pair: &AnnotatedPair, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Augmented> {
    cfg.validate()?;
    let (h, w) = (pair.height(), pair.width());
    let [lo, hi] = cfg.rescale_range;
    let mut rejected = 0;
    let (u, nh, nw) = loop {
        let u = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let nh = (h as f64 * u).round() as usize;
        let nw = (w as f64 * u).round() as usize;
        if nh >= cfg.crop_size && nw >= cfg.crop_size {
            break (u, nh, nw);
        }
        rejected += 1;
        if rejected >= RESCALE_ATTEMPTS {
            return Err(dim_err!(
                "pair {}: {}x{} image stays smaller than crop {} after {} rescale draws",
                pair.id,
                h,
                w,
                cfg.crop_size,
                RESCALE_ATTEMPTS
            ));
        }
    };
    let (rgb, thermal, points) = if u == 1.0 && nh == h && nw == w {
        (pair.rgb.clone(), pair.thermal.clone(), pair.annotation.points.clone())
    } else {
        (
            resize(&pair.rgb, nh, nw)?,
            resize(&pair.thermal, nh, nw)?,
            pair.annotation.points.iter().map(|&(x, y)| (x * u, y * u)).collect(),
        )
    };
    let top = rng.random_range(0..=nh - cfg.crop_size);
    let left = rng.random_range(0..=nw - cfg.crop_size);
    let size = cfg.crop_size as f64;
    let kept = points
        .into_iter()
        .map(|(x, y)| (x - left as f64, y - top as f64))
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < size && y < size)
        .collect();
    let mut out = AnnotatedPair {
        id: pair.id.clone(),
        rgb: crop(&rgb, top, left, cfg.crop_size)?,
        thermal: crop(&thermal, top, left, cfg.crop_size)?,
        annotation: PointAnnotation::new(kept),
        illumination: pair.illumination,
    };
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob);
    if flip {
        out = hflip(&out);
    }
    Ok(Augmented {
        pair: out,
        rejected_scales: rejected,
    })
}

// ---------------------------------------------------------------- synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields))]
pub struct SynthConfig {
    pub pairs: usize,
    /// Square image side; a multiple of 64.
    pub size: usize,
    /// Inclusive head-count range per image.
    pub count_range: [usize; 2],
    /// Probability that the RGB image is darkened to 10% intensity.
    pub darkness_prob: f64,
    /// Probability that the thermal head contrast collapses.
    pub crossover_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 8,
            size: 64,
            count_range: [5, 20],
            darkness_prob: 0.3,
            crossover_prob: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(crate::model::INPUT_MULTIPLE) {
            return Err(Error::Config(format!(
                "synthetic size {} must be a positive multiple of {}",
                self.size,
                crate::model::INPUT_MULTIPLE
            )));
        }
        if self.count_range[0] > self.count_range[1] {
            return Err(Error::Config(format!("invalid count range {:?}", self.count_range)));
        }
        for p in [self.darkness_prob, self.crossover_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A rendered scene as 8-bit buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub id: String,
    pub size: usize,
    /// Interleaved RGB, `size·size·3` bytes.
    pub rgb: Vec<u8>,
    /// `size·size` bytes.
    pub thermal: Vec<u8>,
    pub points: Vec<(f64, f64)>,
    pub illumination: Illumination,
    pub crossover: bool,
}

impl SynthScene {
    pub fn to_pair(&self) -> Result<AnnotatedPair> {
        AnnotatedPair::from_u8(
            self.id.clone(),
            self.size,
            self.size,
            &self.rgb,
            &self.thermal,
            PointAnnotation::new(self.points.clone()),
            self.illumination,
        )
    }
}

/// Radius of a rendered head disc in pixels.
pub const HEAD_RADIUS: f64 = 2.2;
const THERMAL_SIGMA: f64 = 1.6;

/// Renders scene `index` of `cfg`: textured RGB background with dark head
/// discs, and a cool thermal background with warm Gaussian blobs at the
/// same positions. The annotation holds the exact sampled head centres.
pub fn render_scene(cfg: &SynthConfig, index: usize) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = keyed_rng(cfg.seed, u32::MAX as u64, index as u64);
    let n = cfg.size;
    let count = rng.random_range(cfg.count_range[0]..=cfg.count_range[1]);
    let points: Vec<(f64, f64)> = (0..count)
        .map(|_| (rng.random_range(1.0..n as f64 - 1.0), rng.random_range(1.0..n as f64 - 1.0)))
        .collect();
    let dark = rng.random_bool(cfg.darkness_prob);
    let crossover = rng.random_bool(cfg.crossover_prob);
    let noise = Normal::new(0.0f64, 6.0).expect("valid");

    // background: low-frequency colour texture
    let base = [
        rng.random_range(120.0..200.0),
        rng.random_range(120.0..200.0),
        rng.random_range(100.0..180.0),
    ];
    // the literal bounds fix the rendered scenes; any span near 2π serves
    #[allow(clippy::approx_constant)]
    let (fx, fy, phase) = (
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.0..6.28),
    );
    let head_colour = [
        rng.random_range(20.0..60.0),
        rng.random_range(15.0..50.0),
        rng.random_range(10.0..40.0),
    ];
    let mut rgb = alloc::vec![0u8; n * n * 3];
    let mut thermal = alloc::vec![0u8; n * n];
    let amplitude = if crossover { 12.0 } else { 140.0 };
    let cool = rng.random_range(40.0..70.0);
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let texture = 25.0 * (fx * xf + phase).sin() * (fy * yf).cos();
            let mut in_head = false;
            let mut heat = 0.0;
            for &(px, py) in &points {
                let d2 = (xf - px) * (xf - px) + (yf - py) * (yf - py);
                in_head |= d2 <= HEAD_RADIUS * HEAD_RADIUS;
                heat += (-d2 / (2.0 * THERMAL_SIGMA * THERMAL_SIGMA)).exp();
            }
            for c in 0..3 {
                let mut v = if in_head { head_colour[c] } else { base[c] + texture };
                v += noise.sample(&mut rng);
                if dark {
                    v *= 0.1;
                }
                rgb[(y * n + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
            let t = cool + amplitude * heat.min(1.5) + noise.sample(&mut rng) * 0.5;
            thermal[y * n + x] = t.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(SynthScene {
        id: format!("synth_{index:05}"),
        size: n,
        rgb,
        thermal,
        points,
        illumination: if dark { Illumination::Dark } else { Illumination::Bright },
        crossover,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_pair(seed: u64) -> AnnotatedPair {
        let cfg = SynthConfig {
            size: 64,
            seed,
            ..SynthConfig::default()
        };
        render_scene(&cfg, 0).unwrap().to_pair().unwrap()
    }

    #[test]
    fn identity_augmentation_returns_input() {
        let pair = scene_pair(1);
        let cfg = AugmentConfig {
            crop_size: 64,
            hflip_prob: 0.0,
            rescale_range: [1.0, 1.0],
            seed: 0,
        };
        let out = augment(&pair, &cfg, &mut keyed_rng(0, 0, 0)).unwrap();
        assert_eq!(out.pair, pair);
    }

    #[test]
    fn flip_is_an_involution() {
        let pair = scene_pair(2);
        let twice = hflip(&hflip(&pair));
        assert_eq!(twice.rgb, pair.rgb);
        assert_eq!(twice.thermal, pair.thermal);
        for (a, b) in twice.annotation.points.iter().zip(&pair.annotation.points) {
            assert!((a.0 - b.0).abs() < 1e-12 && a.1 == b.1);
        }
    }

    #[test]
    fn crop_translates_points() {
        let mut pair = scene_pair(3);
        pair.annotation = PointAnnotation::new(alloc::vec![(10.0, 20.0)]);
        let padded = resize(&pair.rgb, 128, 128).unwrap();
        let big = AnnotatedPair {
            rgb: padded,
            thermal: resize(&pair.thermal, 128, 128).unwrap(),
            ..pair
        };
        let cfg = AugmentConfig {
            crop_size: 64,
            hflip_prob: 0.0,
            rescale_range: [1.0, 1.0],
            seed: 0,
        };
        // find a stream whose crop origin is (16, 8) is impractical; instead
        // check the translation rule on whatever origin is drawn
        let mut rng = keyed_rng(5, 0, 0);
        let mut probe = rng.clone();
        let top = probe.random_range(0..=64usize);
        let left = probe.random_range(0..=64usize);
        let out = augment(&big, &cfg, &mut rng).unwrap();
        let expected = (10.0 - left as f64, 20.0 - top as f64);
        if expected.0 >= 0.0 && expected.1 >= 0.0 {
            assert_eq!(out.pair.annotation.points, alloc::vec![expected]);
        } else {
            assert!(out.pair.annotation.is_empty());
        }
    }

    #[test]
    fn too_small_images_fail_after_retries() {
        let pair = scene_pair(4);
        let cfg = AugmentConfig {
            crop_size: 128,
            hflip_prob: 0.0,
            rescale_range: [0.8, 1.2],
            seed: 0,
        };
        assert!(augment(&pair, &cfg, &mut keyed_rng(0, 0, 0)).is_err());
    }

    #[test]
    fn keyed_streams_are_independent_of_order() {
        let a: u64 = keyed_rng(9, 2, 5).random();
        let _: u64 = keyed_rng(9, 2, 4).random();
        let b: u64 = keyed_rng(9, 2, 5).random();
        assert_eq!(a, b);
        let c: u64 = keyed_rng(9, 3, 5).random();
        assert_ne!(a, c);
    }

    #[test]
    fn rendering_is_deterministic_and_counts_match() {
        let cfg = SynthConfig::default();
        let a = render_scene(&cfg, 3).unwrap();
        let b = render_scene(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!((cfg.count_range[0]..=cfg.count_range[1]).contains(&a.points.len()));
        assert_eq!(a.to_pair().unwrap().annotation.len(), a.points.len());
    }

    #[test]
    fn darkness_dims_rgb() {
        let cfg = SynthConfig {
            darkness_prob: 1.0,
            ..SynthConfig::default()
        };
        let s = render_scene(&cfg, 0).unwrap();
        assert_eq!(s.illumination, Illumination::Dark);
        assert!(s.rgb.iter().all(|&v| v <= 30));
    }

    #[test]
    fn normalization_maps_to_unit_range() {
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(normalize_u8(255), 1.0);
        for v in [0u8, 17, 128, 255] {
            assert_eq!(denormalize(normalize_u8(v)), v);
        }
    }
}
