use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rangeseg::encoder::{aggregate_groups, encode, encode_points, group_center, EncoderParams};
use rangeseg::model::init_weights;
use rangeseg::projection::{flatten, project, unflatten, BeamTable, ProjectionIndex, Reduce};
use rangeseg::scan_io::{builtin_config, DatasetConfig, Point, RawScan};
use rangeseg::synthetic::synthetic_scan;
use rangeseg::Tensor;

fn kitti() -> DatasetConfig {
    builtin_config("semantickitti").unwrap()
}

fn setup(n: usize, seed: u64) -> (RawScan, ProjectionIndex) {
    let cfg = kitti();
    let scan = synthetic_scan(n, seed, &cfg).unwrap();
    let index = project(&scan, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
    (scan, index)
}

/// Clustered scan: `n` points drawn around a handful of directions so that
/// many cells hold several points.
fn clustered(n: usize, seed: u64) -> (RawScan, ProjectionIndex) {
    let cfg = kitti();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<(f64, f64)> = (0..(n / 4).max(1))
        .map(|_| (rng.gen_range(-0.4..0.04), rng.gen_range(-3.1..3.1)))
        .collect();
    let points = (0..n)
        .map(|_| {
            let (e, a) = *dirs.choose(&mut rng).unwrap();
            let r: f64 = rng.gen_range(2.0..40.0);
            let (e, a) = (e + rng.gen_range(-1e-4..1e-4), a + rng.gen_range(-1e-4..1e-4));
            Point::new(
                (r * e.cos() * a.cos()) as f32,
                (r * e.cos() * a.sin()) as f32,
                (r * e.sin()) as f32,
                rng.gen_range(0.0..1.0),
            )
        })
        .collect();
    let scan = RawScan::new(points).unwrap();
    let index = project(&scan, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
    (scan, index)
}

fn naive_pixel(p: &Point, table: &BeamTable, width: usize) -> (usize, usize) {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let elev = z.atan2(x.hypot(y));
    let row = (0..table.len())
        .min_by(|&a, &b| {
            (table.elevations()[a] - elev)
                .abs()
                .total_cmp(&(table.elevations()[b] - elev).abs())
        })
        .unwrap();
    let col = ((y.atan2(x) + std::f64::consts::PI) / std::f64::consts::TAU * width as f64).floor() as usize;
    (row, col.min(width - 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixels_match_direct_geometry(seed in any::<u64>()) {
        let cfg = kitti();
        let table = BeamTable::uniform(&cfg).unwrap();
        let (scan, index) = setup(500, seed);
        for (j, p) in scan.points().iter().enumerate() {
            prop_assert_eq!(index.pixel(j), naive_pixel(p, &table, cfg.width));
        }
    }

    #[test]
    fn partition_and_bounds(seed in any::<u64>(), n in 0usize..800) {
        let (_, index) = setup(n, seed);
        prop_assert_eq!(index.resolution(), (64, 1024));
        let mut seen = vec![false; n];
        let mut total = 0;
        for cell in index.cells() {
            prop_assert!(cell.v < 64 && cell.u < 1024);
            for &j in index.members(cell) {
                prop_assert!(!seen[j]);
                seen[j] = true;
                prop_assert_eq!(index.pixel(j), (cell.v, cell.u));
            }
            total += cell.len();
        }
        prop_assert_eq!(total, n);
        prop_assert_eq!(index.num_cells() + index.empty_cells(), 64 * 1024);
    }

    #[test]
    fn permutation_keeps_cells(seed in any::<u64>()) {
        let (scan, index) = clustered(300, seed);
        let mut order: Vec<usize> = (0..scan.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let permuted = scan.permuted(&order).unwrap();
        let cfg = kitti();
        let pindex = project(&permuted, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
        prop_assert_eq!(index.cells().len(), pindex.cells().len());
        for (a, b) in index.cells().iter().zip(pindex.cells()) {
            prop_assert_eq!((a.v, a.u), (b.v, b.u));
            let ma: Vec<usize> = index.members(a).to_vec();
            let mb: Vec<usize> = pindex.members(b).iter().map(|&k| order[k]).collect();
            prop_assert_eq!(ma, mb);
        }
    }

    #[test]
    fn flatten_mean_matches_naive(seed in any::<u64>()) {
        let (_, index) = clustered(400, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::<f32>::from_fn([400, 3], |_| rng.gen_range(-10.0..10.0));
        let img = flatten(&feats, &index, Reduce::Mean).unwrap();
        let mut acc: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
        for j in 0..400 {
            let e = acc.entry(index.pixel(j)).or_insert((vec![0.0; 3], 0));
            for k in 0..3 {
                e.0[k] += feats.row(j)[k] as f64;
            }
            e.1 += 1;
        }
        let mut max_diff: f64 = 0.0;
        for v in 0..64 {
            for u in 0..1024 {
                for k in 0..3 {
                    let want = acc.get(&(v, u)).map_or(0.0, |(s, n)| s[k] / *n as f64);
                    let got = img.data()[(v * 1024 + u) * 3 + k] as f64;
                    max_diff = max_diff.max((got - want).abs());
                }
            }
        }
        prop_assert!(max_diff < 1e-5, "{}", max_diff);
    }

    #[test]
    fn flatten_max_matches_naive(seed in any::<u64>()) {
        let (_, index) = clustered(200, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::<f64>::from_fn([200, 2], |_| rng.gen_range(-1.0..1.0));
        let img = flatten(&feats, &index, Reduce::Max).unwrap();
        for cell in index.cells() {
            for k in 0..2 {
                let want = index.members(cell).iter().map(|&j| feats.row(j)[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(img.data()[(cell.v * 1024 + cell.u) * 2 + k], want);
            }
        }
    }

    #[test]
    fn singleton_round_trip(seed in any::<u64>()) {
        let (scan, index) = setup(600, seed);
        let mut used = HashSet::new();
        let keep: Vec<Point> = scan
            .points()
            .iter()
            .enumerate()
            .filter(|(j, _)| used.insert(index.pixel(*j)))
            .map(|(_, p)| *p)
            .collect();
        let cfg = kitti();
        let scan = RawScan::new(keep).unwrap();
        let index = project(&scan, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
        prop_assert!(index.cells().iter().all(|c| c.len() == 1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Tensor::<f32>::from_fn([scan.len(), 4], |_| rng.gen_range(-5.0..5.0));
        let back = unflatten(&flatten(&feats, &index, Reduce::Mean).unwrap(), &index).unwrap();
        prop_assert_eq!(back, feats);
    }

    #[test]
    fn downscale_coarsens_pixels(seed in any::<u64>(), f in 1usize..9) {
        let (_, index) = setup(300, seed);
        let d = index.downscale(f).unwrap();
        prop_assert_eq!(d.resolution(), (64usize.div_ceil(f), 1024usize.div_ceil(f)));
        for j in 0..300 {
            let (v, u) = index.pixel(j);
            prop_assert_eq!(d.pixel(j), (v / f, u / f));
        }
        prop_assert_eq!(d.cells().iter().map(|c| c.len()).sum::<usize>(), 300);
    }

    #[test]
    fn centers_match_naive_mean(seed in any::<u64>()) {
        let (scan, index) = clustered(300, seed);
        for cell in index.cells() {
            let members = index.members(cell);
            let mut want = [0.0f64; 5];
            for &j in members {
                let p = scan.points()[j];
                let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
                for (w, v) in want.iter_mut().zip([x, y, z, p.intensity as f64, (x * x + y * y + z * z).sqrt()]) {
                    *w += v / members.len() as f64;
                }
            }
            let got = group_center(&scan, &index, cell.v, cell.u).unwrap();
            for k in 0..5 {
                prop_assert!((got[k] - want[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn descriptor_reconstruction_and_centering(seed in any::<u64>()) {
        let (scan, index) = clustered(300, seed);
        let f: Tensor<f64> = encode_points(&scan, &index).unwrap();
        for cell in index.cells() {
            let center = group_center(&scan, &index, cell.v, cell.u).unwrap();
            let mut sums = [0.0; 5];
            for &j in index.members(cell) {
                let row = f.row(j);
                for k in 0..5 {
                    prop_assert!((center[k] + row[5 + k] - row[k]).abs() < 1e-6);
                    sums[k] += row[5 + k];
                }
            }
            prop_assert!(sums.iter().all(|s| s.abs() < 1e-5));
        }
    }

    #[test]
    fn pooling_matches_naive(seed in any::<u64>()) {
        let (_, index) = clustered(200, seed);
        let c = 3;
        let mut params = EncoderParams::<f64>::new(c);
        init_weights(&mut params, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.aggregate.bias = Tensor::from_fn([c], |_| rng.gen_range(-0.2..0.2));
        let fp0 = Tensor::<f64>::from_fn([200, c], |_| rng.gen_range(-1.0..1.0));
        let img = aggregate_groups(&fp0, &index, &params).unwrap();
        for cell in index.cells() {
            let m = index.members(cell);
            let mut cat = vec![0.0; 2 * c];
            for k in 0..c {
                cat[k] = m.iter().map(|&j| fp0.row(j)[k]).fold(f64::NEG_INFINITY, f64::max);
                cat[c + k] = m.iter().map(|&j| fp0.row(j)[k]).sum::<f64>() / m.len() as f64;
            }
            for o in 0..c {
                let pre: f64 = params.aggregate.bias.data()[o]
                    + (0..2 * c).map(|i| cat[i] * params.aggregate.weight.data()[i * c + o]).sum::<f64>();
                let got = img.data()[(cell.v * 1024 + cell.u) * c + o];
                prop_assert!((got - pre.max(0.0)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn encoder_permutation_invariance() {
    let (scan, index) = clustered(256, 5);
    let mut params = EncoderParams::<f32>::new(8);
    init_weights(&mut params, 3);
    let (fp0, fg0) = encode(&scan, &index, &params).unwrap();

    let mut order: Vec<usize> = (0..scan.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let permuted = scan.permuted(&order).unwrap();
    let cfg = kitti();
    let pindex = project(&permuted, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
    let (pfp0, pfg0) = encode(&permuted, &pindex, &params).unwrap();

    assert_eq!(pfg0, fg0);
    for (k, &j) in order.iter().enumerate() {
        assert_eq!(pfp0.row(k), fp0.row(j));
    }
    let occupied: HashSet<(usize, usize)> = index.cells().iter().map(|c| (c.v, c.u)).collect();
    for v in 0..64 {
        for u in 0..1024 {
            if !occupied.contains(&(v, u)) {
                assert!(fg0.data()[(v * 1024 + u) * 8..(v * 1024 + u + 1) * 8].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn degenerate_and_out_of_view_points_are_counted() {
    let cfg = kitti();
    let scan = RawScan::new(vec![
        Point::new(0.0, 0.0, 0.0, 0.1),
        Point::new(1.0, 0.0, 5.0, 0.2),
        Point::new(1.0, 0.0, -5.0, 0.3),
        Point::new(10.0, 0.0, 0.0, 0.4),
    ])
    .unwrap();
    let index = project(&scan, &BeamTable::uniform(&cfg).unwrap(), &cfg).unwrap();
    assert_eq!(index.degenerate_points(), 1);
    assert_eq!(index.outside_fov_points(), 2);
    assert_eq!(index.pixel(1).0, 0);
    assert_eq!(index.pixel(2).0, 63);
    assert_eq!(index.ranges()[0], 0.0);
    let f: Tensor<f64> = encode_points(&scan, &index).unwrap();
    assert!(f.all_finite());
}
