//! Property tests for density generation and the counting metrics.

use mafnet_core::autodiff::Tape;
use mafnet_core::density::{
    count_metrics, downsample_density, game, generate_density, mse_loss, DensityConfig, DensityMap, PointAnnotation,
};
use mafnet_core::model::OUTPUT_STRIDE;
use mafnet_core::Tensor;
use proptest::prelude::*;

/// Values on a 2^-40 grid, so sums are exact in `i128`.
const GRID: f64 = (1u64 << 40) as f64;

fn fixed(v: f64) -> i128 {
    let scaled = v * GRID;
    assert_eq!(scaled.fract(), 0.0, "{v} is off the grid");
    scaled as i128
}

/// Correctly rounded `|Σa − Σb|` computed in integers.
fn exact_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let s: i128 = a.iter().map(|&v| fixed(v)).sum::<i128>() - b.iter().map(|&v| fixed(v)).sum::<i128>();
    s.unsigned_abs() as f64 / GRID
}

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u64..(4u64 << 40)).prop_map(|k| k as f64 / GRID), h * w)
}

fn pair_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..=24, 1usize..=24).prop_flat_map(|(h, w)| (Just(h), Just(w), map_strategy(h, w), map_strategy(h, w)))
}

fn dmap(h: usize, w: usize, v: Vec<f64>) -> DensityMap {
    DensityMap::new(Tensor::new([1, h, w], v).unwrap(), 1.0).unwrap()
}

/// Annotation sets that always include points on every border.
fn annotation_strategy() -> impl Strategy<Value = (usize, usize, Vec<(f64, f64)>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(gh, gw)| {
        let (h, w) = (gh * OUTPUT_STRIDE, gw * OUTPUT_STRIDE);
        let interior = prop::collection::vec((0.0..w as f64, 0.0..h as f64), 0..30);
        let border = prop::collection::vec(
            (0usize..4, 0.0f64..1.0).prop_map(move |(side, t)| {
                let (xmax, ymax) = (w as f64 - 1e-9, h as f64 - 1e-9);
                match side {
                    0 => (t * xmax, 0.0),
                    1 => (t * xmax, ymax),
                    2 => (0.0, t * ymax),
                    _ => (xmax, t * ymax),
                }
            }),
            1..12,
        );
        (
            Just(h),
            Just(w),
            (interior, border).prop_map(|(mut a, b)| {
                a.extend(b);
                a
            }),
        )
    })
}

fn density_config() -> impl Strategy<Value = DensityConfig> {
    (0usize..=6, 0.3f64..6.0).prop_map(|(half, sigma)| DensityConfig {
        kernel_size: 2 * half + 1,
        sigma,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn game_is_monotone_in_level((h, w, p, g) in pair_strategy()) {
        let (pred, gt) = (dmap(h, w, p), dmap(h, w, g));
        let mut prev = game(&pred, &gt, 0).unwrap();
        for level in 1..=4u32 {
            if (1usize << level) > h.min(w) {
                prop_assert!(game(&pred, &gt, level).is_err());
                break;
            }
            let cur = game(&pred, &gt, level).unwrap();
            prop_assert!(cur >= prev, "level {level}: {cur} < {prev}");
            prev = cur;
        }
    }

    #[test]
    fn game0_is_the_exact_count_error((h, w, p, g) in pair_strategy()) {
        let expected = exact_abs_diff(&p, &g);
        let (pred, gt) = (dmap(h, w, p), dmap(h, w, g));
        prop_assert_eq!(game(&pred, &gt, 0).unwrap(), expected);
        let m = count_metrics(&[(pred, gt)]).unwrap();
        prop_assert_eq!(m.game[0], expected);
        prop_assert_eq!(m.mae, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn generated_density_integrates_to_the_count((h, w, points) in annotation_strategy(), cfg in density_config()) {
        let n = points.len() as f64;
        let ann = PointAnnotation::new(points);
        let d = generate_density(&ann, h, w, &cfg).unwrap();
        prop_assert!(d.grid.data().iter().all(|&v| v >= 0.0));
        prop_assert!((d.count() - n).abs() <= 1e-6 * n, "{} vs {n}", d.count());
        let small = downsample_density(&d, OUTPUT_STRIDE).unwrap();
        prop_assert_eq!(small.count(), d.count());
        // block sums, checked cell by cell against an integer oracle
        for (i, &v) in small.grid.data().iter().enumerate() {
            let (by, bx) = (i / small.width(), i % small.width());
            let mut cells = Vec::new();
            for y in by * OUTPUT_STRIDE..(by + 1) * OUTPUT_STRIDE {
                for x in bx * OUTPUT_STRIDE..(bx + 1) * OUTPUT_STRIDE {
                    cells.push(d.grid.at(&[0, y, x]));
                }
            }
            prop_assert_eq!(v, exact_abs_diff(&cells, &[]));
        }
    }

    #[test]
    fn mse_is_nonnegative_and_zero_only_at_equality((h, w, p, g) in pair_strategy()) {
        let mut t = Tape::<f64>::new();
        let (pv, gv) = (t.constant(Tensor::new([1, h, w], p.clone()).unwrap()), t.constant(Tensor::new([1, h, w], g.clone()).unwrap()));
        let l = mse_loss(&mut t, &[pv], &[gv]).unwrap();
        let same = mse_loss(&mut t, &[pv], &[pv]).unwrap();
        let loss = t.value(l).item().unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, p == g);
        prop_assert_eq!(t.value(same).item().unwrap(), 0.0);
    }

    #[test]
    fn identical_maps_give_all_zero_metrics((h, w, p, _g) in pair_strategy(), extra in 0usize..3) {
        let pairs: Vec<_> = (0..=extra).map(|_| (dmap(h, w, p.clone()), dmap(h, w, p.clone()))).collect();
        let m = count_metrics(&pairs).unwrap();
        prop_assert_eq!((m.mae, m.rmse), (0.0, 0.0));
        for (level, v) in m.game.iter().enumerate() {
            prop_assert!(*v == 0.0 || ((1usize << level) > h.min(w) && v.is_nan()));
        }
    }
}
