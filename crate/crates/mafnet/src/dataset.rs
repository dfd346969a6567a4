//! On-disk dataset layout and the synthetic dataset writer.
//!
//! ```text
//! root/rgb/<id>.ppm       P6, 8-bit
//! root/thermal/<id>.pgm   P5, 8-bit (P6 is accepted and averaged to gray)
//! root/ann/<id>.json      {"points": [[x, y], ...], "illumination": "bright" | "dark"}
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mafnet_core::data::{render_scene, AnnotatedPair, Illumination, SynthConfig, SynthScene};
use mafnet_core::density::PointAnnotation;
use mafnet_core::model::INPUT_MULTIPLE;
use mafnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pnm::{self, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    /// `[x, y]` with x the column and y the row.
    pub points: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub illumination: Option<Illumination>,
}

pub fn rgb_path(root: &Path, id: &str) -> PathBuf {
    root.join("rgb").join(format!("{id}.ppm"))
}

pub fn thermal_path(root: &Path, id: &str) -> PathBuf {
    root.join("thermal").join(format!("{id}.pgm"))
}

pub fn ann_path(root: &Path, id: &str) -> PathBuf {
    root.join("ann").join(format!("{id}.json"))
}

fn stems(dir: &Path, ext: &str) -> CliResult<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(CliError::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_owned());
            }
        }
    }
    Ok(out)
}

pub fn read_annotation(path: &Path) -> CliResult<AnnotationFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Loads one image pair given explicit file paths.
pub fn load_images(rgb: &Path, thermal: &Path) -> CliResult<(Image, Image)> {
    let rgb_img = pnm::read(rgb)?;
    if rgb_img.channels != 3 {
        return Err(CliError::data(format!("{}: expected a P6 colour image", rgb.display())));
    }
    let th = pnm::read(thermal)?.to_gray();
    if (th.width, th.height) != (rgb_img.width, rgb_img.height) {
        return Err(CliError::data(format!(
            "rgb is {}x{} but thermal is {}x{}",
            rgb_img.width, rgb_img.height, th.width, th.height
        )));
    }
    Ok((rgb_img, th))
}

pub fn load_pair(root: &Path, id: &str) -> CliResult<AnnotatedPair> {
    let (rgb, th) = load_images(&rgb_path(root, id), &thermal_path(root, id))?;
    let ann = read_annotation(&ann_path(root, id))?;
    let points = ann.points.iter().map(|p| (p[0], p[1])).collect();
    Ok(AnnotatedPair::from_u8(
        id,
        rgb.height,
        rgb.width,
        &rgb.data,
        &th.data,
        PointAnnotation::new(points),
        ann.illumination.unwrap_or_default(),
    )?)
}

/// Every complete triplet under `root`, ordered by id. All problems are
/// collected and reported together, one line per id.
pub fn load_dataset(root: &Path) -> CliResult<Vec<AnnotatedPair>> {
    if !root.is_dir() {
        return Err(CliError::data(format!("{}: not a directory", root.display())));
    }
    let rgb = stems(&root.join("rgb"), "ppm")?;
    let thermal = stems(&root.join("thermal"), "pgm")?;
    let ann = stems(&root.join("ann"), "json")?;
    let ids: BTreeSet<&String> = rgb.iter().chain(&thermal).chain(&ann).collect();
    let mut pairs = Vec::with_capacity(ids.len());
    let mut problems = Vec::new();
    for id in ids {
        let missing: Vec<&str> = [(&rgb, "rgb"), (&thermal, "thermal"), (&ann, "annotation")]
            .into_iter()
            .filter(|(set, _)| !set.contains(id))
            .map(|(_, what)| what)
            .collect();
        if !missing.is_empty() {
            problems.push(format!("{id}: missing {}", missing.join(", ")));
            continue;
        }
        match load_pair(root, id) {
            Ok(p) => pairs.push(p),
            Err(e) => problems.push(format!("{id}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::data(format!(
            "dataset {} has {} bad entries:\n  {}",
            root.display(),
            problems.len(),
            problems.join("\n  ")
        )));
    }
    Ok(pairs)
}

/// Mirror index for `i` in an extent `n`, reflecting about the edge pixels
/// without repeating them.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

fn pad_tensor(t: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for y in 0..height {
            let row = (ch * h + reflect(y, h)) * w;
            out.extend((0..width).map(|x| t.data()[row + reflect(x, w)]));
        }
    }
    Tensor::new([c, height, width], out).expect("sized above")
}

/// Reflect-pads both images at the bottom and right to the next multiple of
/// the model's input size. Points keep their coordinates. Returns the pair
/// and the `[rows, cols]` added.
pub fn pad_to_multiple(pair: &AnnotatedPair) -> (AnnotatedPair, [usize; 2]) {
    let (h, w) = (pair.height(), pair.width());
    let (ph, pw) = (h.next_multiple_of(INPUT_MULTIPLE), w.next_multiple_of(INPUT_MULTIPLE));
    if (ph, pw) == (h, w) {
        return (pair.clone(), [0, 0]);
    }
    let mut out = pair.clone();
    out.rgb = pad_tensor(&pair.rgb, ph, pw);
    out.thermal = pad_tensor(&pair.thermal, ph, pw);
    (out, [ph - h, pw - w])
}

fn create_dirs(root: &Path) -> CliResult<()> {
    for sub in ["rgb", "thermal", "ann"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
    }
    Ok(())
}

pub fn write_scene(root: &Path, scene: &SynthScene) -> CliResult<()> {
    let n = scene.size;
    pnm::write(&rgb_path(root, &scene.id), &Image::rgb(n, n, scene.rgb.clone()))?;
    pnm::write(&thermal_path(root, &scene.id), &Image::gray(n, n, scene.thermal.clone()))?;
    let ann = AnnotationFile {
        points: scene.points.iter().map(|&(x, y)| [x, y]).collect(),
        illumination: Some(scene.illumination),
    };
    let path = ann_path(root, &scene.id);
    let text = serde_json::to_string(&ann)?;
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

/// Renders and writes `cfg.pairs` scenes; returns their ids.
pub fn synthesize(root: &Path, cfg: &SynthConfig) -> CliResult<Vec<String>> {
    cfg.validate()?;
    create_dirs(root)?;
    (0..cfg.pairs)
        .map(|i| {
            let scene = render_scene(cfg, i)?;
            write_scene(root, &scene)?;
            Ok(scene.id)
        })
        .collect()
}
