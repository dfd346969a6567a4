//! Sample preparation, per-sample gradients and the optimizer step.
//!
//! Each sample is differentiated on its own tape; the batch gradient is the
//! mean of the per-sample gradients, accumulated in sample order so the result
//! does not depend on how the per-sample work is scheduled.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::data::{keyed_rng, AnnotatedPair};
use crate::density::{downsample_density, generate_density, DensityConfig, DensityMap};
use crate::model::{MafNet, OUTPUT_STRIDE};
use crate::optim::{adamw_step, OptimizerState};
use crate::params::{GradientMap, ParamStore};
use crate::{Error, Result, Tensor};

/// Which input streams are fed to the network; a disabled stream sees an
/// all-zero image of the same shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputMask {
    pub rgb: bool,
    pub thermal: bool,
}

impl InputMask {
    pub const BOTH: Self = Self { rgb: true, thermal: true };
    pub const THERMAL_ONLY: Self = Self { rgb: false, thermal: true };
    pub const RGB_ONLY: Self = Self { rgb: true, thermal: false };
}

impl Default for InputMask {
    fn default() -> Self {
        Self::BOTH
    }
}

/// Network inputs and the full-precision ground truth for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`
    pub rgb: Tensor<f32>,
    /// `[1, H, W]`
    pub thermal: Tensor<f32>,
    /// Ground truth at output resolution, `[1, H/8, W/8]`.
    pub target: DensityMap,
}

impl Sample {
    pub fn count(&self) -> f64 {
        self.target.count()
    }

    /// Target reshaped to the network output layout `[1, 1, h, w]`.
    pub fn target_f32(&self) -> Result<Tensor<f32>> {
        self.target
            .grid
            .cast::<f32>()
            .reshaped([1, 1, self.target.height(), self.target.width()])
    }
}

/// Builds the ground-truth density at full resolution and block-sums it to
/// the output stride.
pub fn prepare_sample(pair: &AnnotatedPair, density: &DensityConfig, mask: InputMask) -> Result<Sample> {
    pair.validate()?;
    let full = generate_density(&pair.annotation, pair.height(), pair.width(), density)?;
    let target = downsample_density(&full, OUTPUT_STRIDE)?;
    let blank = |t: &Tensor<f32>, keep: bool| if keep { t.clone() } else { Tensor::zeros(t.shape().to_vec()) };
    Ok(Sample {
        rgb: blank(&pair.rgb, mask.rgb),
        thermal: blank(&pair.thermal, mask.thermal),
        target,
    })
}

/// `‖pred − gt‖²` for one sample and its gradient with respect to every parameter.
pub fn sample_loss_and_grad(model: &MafNet, store: &ParamStore<f32>, sample: &Sample) -> Result<(f64, GradientMap<f32>)> {
    let mut tape = Tape::new();
    tape.bind(store);
    let rgb = tape.constant(sample.rgb.clone());
    let thermal = tape.constant(sample.thermal.clone());
    let pred = model.forward(&mut tape, rgb, thermal, None)?;
    let gt = tape.constant(sample.target_f32()?);
    let diff = tape.sub(pred, gt)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.sum(sq);
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok((value, grads.params(&tape)))
}

fn per_sample(model: &MafNet, store: &ParamStore<f32>, batch: &[&Sample]) -> Vec<Result<(f64, GradientMap<f32>)>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        batch.par_iter().map(|s| sample_loss_and_grad(model, store, s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(|s| sample_loss_and_grad(model, store, s)).collect()
    }
}

/// Batch loss `(1/N) Σ ‖pred_i − gt_i‖²` and its gradient.
pub fn batch_loss_and_grad(model: &MafNet, store: &ParamStore<f32>, batch: &[&Sample]) -> Result<(f64, GradientMap<f32>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let inv = 1.0 / batch.len() as f32;
    let mut total = GradientMap::zeros_like(store);
    let mut loss = 0.0;
    for r in per_sample(model, store, batch) {
        let (l, g) = r?;
        loss += l;
        total.add_scaled(&g, inv)?;
    }
    Ok((loss / batch.len() as f64, total))
}

/// One optimizer iteration. The loss is that of the parameters before the update.
///
/// A non-finite loss aborts before the parameters change.
pub fn train_step(model: &MafNet, store: &mut ParamStore<f32>, state: &mut OptimizerState<f32>, batch: &[&Sample], lr: f64) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grad(model, store, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    adamw_step(store, &grads, state, lr)?;
    Ok(loss)
}

/// Dataset indices for `iteration`: consecutive batches walk through a
/// per-epoch permutation keyed on `seed`. With `shuffle` off the order is
/// the dataset order.
pub fn batch_indices(len: usize, batch_size: usize, iteration: u64, seed: u64, shuffle: bool) -> Result<Vec<usize>> {
    if len == 0 || batch_size == 0 {
        return Err(Error::Contract(format!("cannot batch {len} samples in batches of {batch_size}")));
    }
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for j in 0..batch_size as u64 {
        let pos = iteration * batch_size as u64 + j;
        let epoch = pos / len as u64;
        let offset = (pos % len as u64) as usize;
        if !shuffle {
            out.push(offset);
            continue;
        }
        if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut keyed_rng(seed, epoch, u64::MAX));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("filled above").1[offset]);
    }
    Ok(out)
}

/// Predicted and ground-truth density for every sample, in order.
pub fn predict_samples(model: &MafNet, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<(DensityMap, DensityMap)>> {
    samples
        .iter()
        .map(|s| {
            let pred = model.predict(store, &s.rgb, &s.thermal)?;
            let scale = s.target.scale;
            Ok((DensityMap::from_prediction(&pred, scale)?, s.target.clone()))
        })
        .collect()
}
