//! Ground-truth density maps and counting metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[cfg(not(any(test, feature = "std")))]
use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::dim_err;
use crate::exact::{fsum, ExactSum};
use crate::{Error, Result, Scalar, Tensor};

/// Head positions in pixels, `x` = column and `y` = row, origin top-left.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointAnnotation {
    pub points: Vec<(f64, f64)>,
}

impl PointAnnotation {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks `0 <= x < width` and `0 <= y < height` for every point.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (index, &(x, y)) in self.points.iter().enumerate() {
            let inside = x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64;
            if !inside {
                return Err(Error::Annotation {
                    index,
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(deny_unknown_fields, default))]
pub struct DensityConfig {
    pub kernel_size: usize,
    /// Standard deviation of the Gaussian, in pixels.
    pub sigma: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma: 2.0,
        }
    }
}

/// Per-cell crowd density `[1, h, w]`; its sum is the count it encodes.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub grid: Tensor<f64>,
    /// Resolution relative to the source image.
    pub scale: f64,
}

impl DensityMap {
    pub fn new(grid: Tensor<f64>, scale: f64) -> Result<Self> {
        if grid.rank() != 3 || grid.shape()[0] != 1 {
            return Err(dim_err!("density grid must be [1, h, w], got {:?}", grid.shape()));
        }
        Ok(Self { grid, scale })
    }

    /// Wraps a model output `[1, 1, h, w]` (or `[1, h, w]`).
    pub fn from_prediction<T: Scalar>(pred: &Tensor<T>, scale: f64) -> Result<Self> {
        let s = pred.shape();
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if pred.numel() != h * w {
            return Err(dim_err!("prediction {:?} is not a single density map", s));
        }
        Self::new(pred.cast::<f64>().reshaped([1, h, w])?, scale)
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[2]
    }

    /// Correctly rounded sum of all cells.
    pub fn count(&self) -> f64 {
        fsum(self.grid.data().iter().copied())
    }

    /// Adds the cells of a rectangular region to `acc`, negated when asked.
    fn accumulate_region(&self, acc: &mut ExactSum, rows: (usize, usize), cols: (usize, usize), negate: bool) {
        let w = self.width();
        let d = self.grid.data();
        for r in rows.0..rows.1 {
            for &v in &d[r * w + cols.0..r * w + cols.1] {
                acc.add(if negate { -v } else { v });
            }
        }
    }
}

/// Normalized `k×k` Gaussian weights, indexed `[dy][dx]` row-major.
fn gaussian_kernel(cfg: &DensityConfig) -> Vec<f64> {
    let r = (cfg.kernel_size / 2) as isize;
    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    let mut k = Vec::with_capacity(cfg.kernel_size * cfg.kernel_size);
    for dy in -r..=r {
        for dx in -r..=r {
            k.push((-((dx * dx + dy * dy) as f64) / two_s2).exp());
        }
    }
    k
}

/// Fixed-point resolution of kernel taps. Map values are integer multiples of
/// `2^-QUANT_BITS`, so every sum over a map is exact for realistic counts.
const QUANT_BITS: i32 = 32;

/// Rounds to the nearest integer cell, ties toward +∞.
fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Stamps a clipped, renormalized Gaussian at every point.
///
/// Each point contributes mass exactly 1: surviving taps are renormalized
/// after border clipping and quantized with the rounding residue assigned
/// to the centre tap.
pub fn generate_density(ann: &PointAnnotation, height: usize, width: usize, cfg: &DensityConfig) -> Result<DensityMap> {
    if cfg.kernel_size.is_multiple_of(2) || cfg.kernel_size == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {}", cfg.kernel_size)));
    }
    if cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(Error::Config(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    if height == 0 || width == 0 {
        return Err(dim_err!("density map extent must be positive"));
    }
    ann.validate(height, width)?;
    let kernel = gaussian_kernel(cfg);
    let k = cfg.kernel_size as isize;
    let r = k / 2;
    let unit = (2.0f64).powi(QUANT_BITS);
    let mut grid = vec![0.0f64; height * width];
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(kernel.len());
    for &(x, y) in &ann.points {
        let cx = round_half_up(x).clamp(0, width as i64 - 1) as isize;
        let cy = round_half_up(y).clamp(0, height as i64 - 1) as isize;
        taps.clear();
        let mut total = 0.0;
        let mut center = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (px, py) = (cx + dx, cy + dy);
                if px < 0 || py < 0 || px >= width as isize || py >= height as isize {
                    continue;
                }
                let wgt = kernel[((dy + r) * k + dx + r) as usize];
                if dx == 0 && dy == 0 {
                    center = taps.len();
                }
                taps.push((py as usize * width + px as usize, wgt));
                total += wgt;
            }
        }
        // integer units per tap, residue to the centre so the mass is exactly 1
        let mut units: Vec<i64> = taps.iter().map(|&(_, w)| (w / total * unit).round() as i64).collect();
        let assigned: i64 = units.iter().sum();
        units[center] += unit as i64 - assigned;
        for (&(idx, _), &u) in taps.iter().zip(&units) {
            grid[idx] += u as f64 / unit;
        }
    }
    DensityMap::new(Tensor::new([1, height, width], grid)?, 1.0)
}

/// Non-overlapping `factor×factor` block sums.
pub fn downsample_density(d: &DensityMap, factor: usize) -> Result<DensityMap> {
    let (h, w) = (d.height(), d.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(dim_err!("density map {}x{} not divisible by factor {}", h, w, factor));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0f64; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut acc = ExactSum::new();
            d.accumulate_region(&mut acc, (by * factor, (by + 1) * factor), (bx * factor, (bx + 1) * factor), false);
            out[by * ow + bx] = acc.value();
        }
    }
    DensityMap::new(Tensor::new([1, oh, ow], out)?, d.scale / factor as f64)
}

/// Mean absolute error and root mean squared error over per-image counts.
pub fn mae_rmse(pred_counts: &[f64], gt_counts: &[f64]) -> Result<(f64, f64)> {
    if pred_counts.is_empty() || pred_counts.len() != gt_counts.len() {
        return Err(Error::Contract(format!(
            "count lists must be non-empty and of equal length (got {} and {})",
            pred_counts.len(),
            gt_counts.len()
        )));
    }
    let n = pred_counts.len() as f64;
    let errors = pred_counts.iter().zip(gt_counts).map(|(&p, &g)| p - g);
    let abs = fsum(errors.clone().map(f64::abs));
    let sq = fsum(errors.map(|e| e * e));
    Ok((abs / n, (sq / n).sqrt()))
}

/// Grid absolute count error of one image at level `level`: the map is cut
/// into `4^level` regions with edges at `floor(j·extent/2^level)` and the
/// absolute count errors of the regions are summed.
pub fn game(pred: &DensityMap, gt: &DensityMap, level: u32) -> Result<f64> {
    if pred.grid.shape() != gt.grid.shape() {
        return Err(dim_err!(
            "game: prediction {:?} and ground truth {:?} differ",
            pred.grid.shape(),
            gt.grid.shape()
        ));
    }
    let (h, w) = (pred.height(), pred.width());
    let cells = 1usize << level;
    if cells > h.min(w) {
        return Err(dim_err!(
            "game level {} needs at least {} cells per side, map is {}x{}",
            level,
            cells,
            h,
            w
        ));
    }
    let edge = |j: usize, extent: usize| j * extent / cells;
    let mut total = ExactSum::new();
    for a in 0..cells {
        let rows = (edge(a, h), edge(a + 1, h));
        for b in 0..cells {
            let cols = (edge(b, w), edge(b + 1, w));
            let mut diff = ExactSum::new();
            pred.accumulate_region(&mut diff, rows, cols, false);
            gt.accumulate_region(&mut diff, rows, cols, true);
            total.add_abs(&diff);
        }
    }
    Ok(total.value())
}

/// Dataset-level counting metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// GAME(0) .. GAME(3); `game[0] == mae`.
    pub game: [f64; 4],
    pub n_images: usize,
}

/// Evaluates paired prediction / ground-truth maps.
///
/// Levels whose grid is finer than the map are reported as NaN.
pub fn count_metrics(pairs: &[(DensityMap, DensityMap)]) -> Result<CountMetrics> {
    if pairs.is_empty() {
        return Err(Error::Contract("count_metrics needs at least one image".into()));
    }
    let n = pairs.len() as f64;
    // per-image errors are exact region differences, correctly rounded, so
    // each level dominates the previous one bit for bit
    let mut per_level: [Option<Vec<f64>>; 4] = Default::default();
    for (level, slot) in per_level.iter_mut().enumerate() {
        let errors: Result<Vec<f64>> = pairs.iter().map(|(p, g)| game(p, g, level as u32)).collect();
        match errors {
            Ok(e) => *slot = Some(e),
            Err(_) if level > 0 => break,
            Err(e) => return Err(e),
        }
    }
    let counts = per_level[0].as_ref().expect("level 0 always evaluates");
    let mae = fsum(counts.iter().copied()) / n;
    let rmse = (fsum(counts.iter().map(|e| e * e)) / n).sqrt();
    let game = core::array::from_fn(|l| match &per_level[l] {
        Some(e) => fsum(e.iter().copied()) / n,
        None => f64::NAN,
    });
    Ok(CountMetrics {
        mae,
        rmse,
        game,
        n_images: pairs.len(),
    })
}

/// `(1/N) Σ_i ‖pred_i − gt_i‖²`: squared differences summed over each map,
/// averaged over the batch.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, preds: &[Var], gts: &[Var]) -> Result<Var> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Contract(format!(
            "mse_loss needs equal non-empty batches (got {} and {})",
            preds.len(),
            gts.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&p, &g) in preds.iter().zip(gts) {
        let diff = tape.sub(p, g)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    let n = T::from_f64_lossy(preds.len() as f64);
    Ok(tape.scale(total.expect("non-empty"), T::one() / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, data: &[f64]) -> DensityMap {
        DensityMap::new(Tensor::from_f64([1, h, w], data).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn single_points_integrate_to_one() {
        let cfg = DensityConfig::default();
        for pt in [(16.0, 16.0), (0.0, 0.0), (31.9, 0.2), (31.0, 31.0)] {
            let d = generate_density(&PointAnnotation::new(vec![pt]), 32, 32, &cfg).unwrap();
            assert!((d.count() - 1.0).abs() < 1e-6, "{pt:?}: {}", d.count());
        }
    }

    #[test]
    fn interior_stamp_is_symmetric_gaussian() {
        let d = generate_density(&PointAnnotation::new(vec![(10.0, 10.0)]), 21, 21, &DensityConfig::default()).unwrap();
        let at = |y: usize, x: usize| d.grid.at(&[0, y, x]);
        assert!(at(10, 10) > at(10, 11));
        assert!((at(10, 11) - at(11, 10)).abs() < 1e-9);
        assert!((at(10, 11) / at(10, 10) - (-1.0f64 / 8.0).exp()).abs() < 1e-6);
        assert_eq!(at(10, 14), 0.0);
        assert!(at(10, 13) > 0.0);
    }

    #[test]
    fn rounding_ties_go_up() {
        let d = generate_density(&PointAnnotation::new(vec![(4.5, 4.5)]), 11, 11, &DensityConfig::default()).unwrap();
        let mut best = (0, 0);
        for y in 0..11 {
            for x in 0..11 {
                if d.grid.at(&[0, y, x]) > d.grid.at(&[0, best.0, best.1]) {
                    best = (y, x);
                }
            }
        }
        assert_eq!(best, (5, 5));
    }

    #[test]
    fn out_of_bounds_point_names_index() {
        let ann = PointAnnotation::new(vec![(1.0, 1.0), (8.0, 2.0)]);
        match generate_density(&ann, 8, 8, &DensityConfig::default()) {
            Err(Error::Annotation { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn downsample_examples() {
        let d = map(8, 16, &[0.375; 128]);
        let s = downsample_density(&d, 8).unwrap();
        assert_eq!(s.grid.data(), &[24.0, 24.0]);
        let mut delta = vec![0.0; 256];
        delta[9 * 16 + 13] = 1.0;
        let s = downsample_density(&map(16, 16, &delta), 8).unwrap();
        assert_eq!(s.grid.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(downsample_density(&map(4, 4, &[0.0; 16]), 8).is_err());
    }

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae_rmse(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), (0.0, 0.0));
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert!((mae - 3.0).abs() < 1e-12);
        assert!((rmse - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae_rmse(&[5.0], &[9.0]).unwrap(), (4.0, 4.0));
        assert!(mae_rmse(&[], &[]).is_err());
        assert!(mae_rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn game_examples() {
        let p = map(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let g = map(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(game(&p, &g, 0).unwrap(), 0.0);
        assert_eq!(game(&p, &g, 1).unwrap(), 2.0);
        assert_eq!(game(&p, &p, 1).unwrap(), 0.0);
        assert!(game(&p, &g, 2).is_err());
        assert!(game(&p, &map(1, 4, &[0.0; 4]), 0).is_err());
    }

    #[test]
    fn game_handles_uneven_extents() {
        // 3 rows split at floor(3/2) = 1
        let p = map(3, 1, &[1.0, 2.0, 3.0]);
        let g = map(3, 1, &[0.0; 3]);
        assert!(game(&p, &g, 1).is_err());
        let p = map(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 4.0]);
        let g = map(3, 3, &[0.0; 9]);
        assert_eq!(game(&p, &g, 1).unwrap(), 7.0);
    }

    #[test]
    fn metrics_report_game0_equals_mae() {
        let pairs = vec![
            (map(4, 4, &[0.3; 16]), map(4, 4, &[0.1; 16])),
            (map(4, 4, &[0.05; 16]), map(4, 4, &[0.2; 16])),
        ];
        let m = count_metrics(&pairs).unwrap();
        assert_eq!(m.game[0], m.mae);
        assert_eq!(m.n_images, 2);
        assert!(m.game[1] >= m.game[0] && m.game[2] >= m.game[1]);
        assert!(m.game[3].is_nan());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64([1, 2], &[1.0, 1.0]).unwrap());
        let g = tape.constant(Tensor::zeros([1, 2]));
        let l = mse_loss(&mut tape, &[p], &[g]).unwrap();
        assert_eq!(tape.value(l).item(), Some(2.0));
        let same = mse_loss(&mut tape, &[p], &[p]).unwrap();
        assert_eq!(tape.value(same).item(), Some(0.0));
        let p2 = tape.constant(Tensor::from_f64([1, 2], &[2.0f64.sqrt(), 2.0f64.sqrt()]).unwrap());
        let l = mse_loss(&mut tape, &[p, p2], &[g, g]).unwrap();
        assert!((tape.value(l).item().unwrap() - 3.0).abs() < 1e-12);
        let other = tape.constant(Tensor::zeros([2, 1]));
        assert!(mse_loss(&mut tape, &[p], &[other]).is_err());
        assert!(mse_loss(&mut tape, &[], &[]).is_err());
    }
}
