//! Commands that run a trained checkpoint: `eval`, `predict` and `attn-maps`.

use std::path::Path;

use mafnet_core::attention::AttentionLog;
use mafnet_core::autodiff::Tape;
use mafnet_core::data::AnnotatedPair;
use mafnet_core::density::{count_metrics, DensityMap, PointAnnotation};
use mafnet_core::model::OUTPUT_STRIDE;
use mafnet_core::train::{predict_samples, prepare_sample, Sample};
use mafnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::Split;
use crate::dataset::{load_dataset, load_images, pad_to_multiple};
use crate::error::{CliError, CliResult};
use crate::{maft, pnm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub pred_count: f64,
    pub gt_count: f64,
    /// Rows and columns of reflection padding added at the bottom and right.
    pub pad: [usize; 2],
}

/// Evaluation report. GAME levels finer than the density map are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: Split,
    pub n_images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub game0: Option<f64>,
    pub game1: Option<f64>,
    pub game2: Option<f64>,
    pub game3: Option<f64>,
    pub images: Vec<ImageRecord>,
}

fn prepare(ck: &Checkpoint, pair: &AnnotatedPair) -> CliResult<(Sample, [usize; 2])> {
    let (padded, pad) = pad_to_multiple(pair);
    let cfg = &ck.manifest.config;
    let sample = prepare_sample(&padded, &cfg.density, cfg.modalities.mask()).map_err(|e| CliError::from(e).context(&pair.id))?;
    Ok((sample, pad))
}

/// Metrics of `ck` over the pairs of `data` admitted by `split`.
pub fn evaluate_pairs(ck: &Checkpoint, pairs: &[AnnotatedPair], split: Split) -> CliResult<Report> {
    let chosen: Vec<&AnnotatedPair> = pairs.iter().filter(|p| split.admits(p.illumination)).collect();
    if chosen.is_empty() {
        return Err(CliError::data(format!("empty split: no images tagged {}", split.label())));
    }
    let mut samples = Vec::with_capacity(chosen.len());
    let mut pads = Vec::with_capacity(chosen.len());
    for p in &chosen {
        let (s, pad) = prepare(ck, p)?;
        samples.push(s);
        pads.push(pad);
    }
    let maps = predict_samples(&ck.model, &ck.store, &samples)?;
    if let Some((i, _)) = maps.iter().enumerate().find(|(_, (p, _))| !p.grid.all_finite()) {
        return Err(CliError::numeric(format!("{}: non-finite density prediction", chosen[i].id)));
    }
    let m = count_metrics(&maps)?;
    let level = |v: f64| (!v.is_nan()).then_some(v);
    let images = chosen
        .iter()
        .zip(&maps)
        .zip(pads)
        .map(|((p, (pred, gt)), pad)| ImageRecord {
            id: p.id.clone(),
            pred_count: pred.count(),
            gt_count: gt.count(),
            pad,
        })
        .collect();
    Ok(Report {
        split,
        n_images: m.n_images,
        mae: m.mae,
        rmse: m.rmse,
        game0: level(m.game[0]),
        game1: level(m.game[1]),
        game2: level(m.game[2]),
        game3: level(m.game[3]),
        images,
    })
}

pub fn evaluate(ckpt: &Path, data: &Path, split: Split) -> CliResult<Report> {
    let ck = checkpoint::load(ckpt)?;
    let pairs = load_dataset(data)?;
    evaluate_pairs(&ck, &pairs, split)
}

pub fn write_report(path: &Path, report: &Report) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// An unannotated image pair ready for the network.
fn load_input(ck: &Checkpoint, rgb: &Path, thermal: &Path) -> CliResult<(Sample, [usize; 2])> {
    let (r, t) = load_images(rgb, thermal)?;
    let pair = AnnotatedPair::from_u8(
        "input",
        r.height,
        r.width,
        &r.data,
        &t.data,
        PointAnnotation::default(),
        Default::default(),
    )?;
    prepare(ck, &pair)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub density: DensityMap,
    pub pad: [usize; 2],
}

impl Prediction {
    pub fn count(&self) -> f64 {
        self.density.count()
    }
}

/// Density map for one image pair; written as a `[1, h, w]` f32 tensor and
/// optionally as a heatmap.
pub fn predict(ckpt: &Path, rgb: &Path, thermal: &Path, out_density: &Path, out_pgm: Option<&Path>) -> CliResult<Prediction> {
    let ck = checkpoint::load(ckpt)?;
    let (sample, pad) = load_input(&ck, rgb, thermal)?;
    let pred = ck.model.predict(&ck.store, &sample.rgb, &sample.thermal)?;
    if !pred.all_finite() {
        return Err(CliError::numeric("non-finite density prediction"));
    }
    let density = DensityMap::from_prediction(&pred, 1.0 / OUTPUT_STRIDE as f64)?;
    maft::write(out_density, &density.grid.cast::<f32>())?;
    if let Some(path) = out_pgm {
        let (h, w) = (density.height(), density.width());
        pnm::write(path, &pnm::heatmap(density.grid.data(), w, h))?;
    }
    Ok(Prediction { density, pad })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    pub name: String,
    pub module: usize,
    pub block: usize,
    pub branch: String,
    pub head: usize,
    /// `[queries, keys]`
    pub shape: [usize; 2],
    pub tensor: String,
    pub heatmap: String,
}

pub const ATTENTION_INDEX: &str = "index.json";

/// Heatmap where each row's maximum maps to 255.
pub fn row_heatmap(weights: &Tensor<f64>) -> pnm::Image {
    let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
    let mut data = Vec::with_capacity(rows * cols);
    for row in weights.data().chunks_exact(cols) {
        data.extend(pnm::heatmap(row, cols, 1).data);
    }
    pnm::Image::gray(cols, rows, data)
}

/// Exports every post-softmax attention matrix of one forward pass. The
/// pass runs in f64; tensors are stored as f32.
pub fn attention_maps(ckpt: &Path, rgb: &Path, thermal: &Path, out: &Path) -> CliResult<Vec<AttentionEntry>> {
    let ck = checkpoint::load(ckpt)?;
    let (sample, _) = load_input(&ck, rgb, thermal)?;
    let store = ck.store.cast::<f64>();
    let mut tape = Tape::new();
    tape.bind(&store);
    let r = tape.constant(sample.rgb.cast::<f64>());
    let t = tape.constant(sample.thermal.cast::<f64>());
    let mut log = AttentionLog::new();
    let density = ck.model.forward(&mut tape, r, t, Some(&mut log))?;
    if !tape.value(density).all_finite() {
        return Err(CliError::numeric("non-finite forward pass"));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut entries = Vec::with_capacity(log.records.len());
    for rec in &log.records {
        let w = tape.value(rec.weights);
        let name = rec.name();
        let (tensor, heatmap) = (format!("{name}.maft"), format!("{name}.pgm"));
        maft::write(&out.join(&tensor), &w.cast::<f32>())?;
        pnm::write(&out.join(&heatmap), &row_heatmap(w))?;
        entries.push(AttentionEntry {
            name,
            module: rec.module,
            block: rec.block,
            branch: rec.branch.label().into(),
            head: rec.head,
            shape: [w.shape()[0], w.shape()[1]],
            tensor,
            heatmap,
        });
    }
    let path = out.join(ATTENTION_INDEX);
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_heatmap_scales_each_row() {
        let w = Tensor::from_f64([2, 3], &[0.1, 0.2, 0.7, 0.5, 0.25, 0.25]).unwrap();
        let img = row_heatmap(&w);
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.data, vec![36, 73, 255, 255, 128, 128]);
    }
}
