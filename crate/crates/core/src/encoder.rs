//! Global-local point encoding.
//!
//! Every point is described by its raw `(x, y, z, I, depth)` and by the same
//! five values relative to its cell's centroid. An MLP lifts that 10-d
//! descriptor to `C` channels (`F_p^0`); per-cell max and mean pooling of the
//! embedded points, a linear map and a ReLU give the initial image `F_g^0`.

use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp, MlpCache};
use crate::params::{join, ParamKind, ParamSet};
use crate::projection::{Cell, ProjectionIndex};
use crate::scan_io::RawScan;
use crate::tensor::backward::activation_backward;
use crate::tensor::ops::{relu, split_channels, Activation};
use crate::tensor::{Real, Tensor};

/// Width of the per-point descriptor.
pub const POINT_FEATURES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T: Real> {
    pub mlp: Mlp<T>,
    pub aggregate: Linear<T>,
}

impl<T: Real> EncoderParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mlp: Mlp::new(POINT_FEATURES, channels, channels),
            aggregate: Linear::new(2 * channels, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.out_features()
    }
}

impl<T: Real> ParamSet<T> for EncoderParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.aggregate.visit(&join(prefix, "aggregate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.aggregate.visit_mut(&join(prefix, "aggregate"), f);
    }
}

fn five(scan: &RawScan, index: &ProjectionIndex, j: usize) -> [f64; 5] {
    let p = scan.points()[j];
    [p.x as f64, p.y as f64, p.z as f64, p.intensity as f64, index.ranges()[j]]
}

fn centroid(scan: &RawScan, index: &ProjectionIndex, cell: &Cell) -> [f64; 5] {
    let members = index.members(cell);
    let mut acc = [0.0; 5];
    for &j in members {
        for (a, v) in acc.iter_mut().zip(five(scan, index, j)) {
            *a += v;
        }
    }
    acc.map(|a| a / members.len() as f64)
}

/// Mean `(x, y, z, I, depth)` of the points in cell `(v, u)`.
pub fn group_center(scan: &RawScan, index: &ProjectionIndex, v: usize, u: usize) -> Result<[f64; 5]> {
    let cell = index
        .cells()
        .binary_search_by_key(&(v, u), |c| (c.v, c.u))
        .map(|i| &index.cells()[i])
        .map_err(|_| Error::EmptyGroup { v, u })?;
    Ok(centroid(scan, index, cell))
}

/// `N × 10` descriptors `[x, y, z, I, depth, (x, y, z, I, depth) − centroid]`.
pub fn encode_points<T: Real>(scan: &RawScan, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let n = scan.len();
    if index.num_points() != n {
        return Err(Error::dim(format!(
            "encode_points: scan has {n} points, index has {}",
            index.num_points()
        )));
    }
    let mut out = vec![T::zero(); n * POINT_FEATURES];
    for cell in index.cells() {
        let center = centroid(scan, index, cell);
        for &j in index.members(cell) {
            let raw = five(scan, index, j);
            let row = &mut out[j * POINT_FEATURES..(j + 1) * POINT_FEATURES];
            for k in 0..5 {
                row[k] = T::lit(raw[k]);
                row[5 + k] = T::lit(raw[k] - center[k]);
            }
        }
    }
    Tensor::new([n, POINT_FEATURES], out)
}

/// `F_p^0`: the point MLP applied row by row.
pub fn embed_points<T: Real>(features: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
    params.mlp.forward(features)
}

pub fn embed_points_cached<T: Real>(
    features: &Tensor<T>,
    params: &EncoderParams<T>,
) -> Result<(Tensor<T>, MlpCache<T>)> {
    params.mlp.forward_cached(features)
}

/// Per-cell `[max; mean]` of the member rows, one row per non-empty cell.
fn pool_cells<T: Real>(fp: &Tensor<T>, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let (n, c) = fp.nc()?;
    if n != index.num_points() {
        return Err(Error::dim(format!(
            "aggregate_groups: {n} feature rows for {} indexed points",
            index.num_points()
        )));
    }
    let mut pooled = Vec::with_capacity(index.num_cells() * 2 * c);
    for cell in index.cells() {
        let members = index.members(cell);
        let mut max = fp.row(members[0]).to_vec();
        let mut sum = vec![T::zero(); c];
        for &j in members {
            for ((m, s), &v) in max.iter_mut().zip(sum.iter_mut()).zip(fp.row(j)) {
                if v > *m {
                    *m = v;
                }
                *s += v;
            }
        }
        let count = T::from_usize(members.len()).unwrap();
        pooled.extend(max);
        pooled.extend(sum.into_iter().map(|s| s / count));
    }
    Tensor::new([index.num_cells(), 2 * c], pooled)
}

fn scatter_cells<T: Real>(rows: &Tensor<T>, index: &ProjectionIndex) -> Tensor<T> {
    let (h, w) = index.resolution();
    let c = rows.channels();
    let mut img = Tensor::zeros([h, w, c]);
    let d = img.data_mut();
    for (m, cell) in index.cells().iter().enumerate() {
        d[(cell.v * w + cell.u) * c..(cell.v * w + cell.u + 1) * c].copy_from_slice(rows.row(m));
    }
    img
}

fn gather_cells<T: Real>(img: &Tensor<T>, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let (_, w, c) = img.hwc()?;
    let mut out = Vec::with_capacity(index.num_cells() * c);
    for cell in index.cells() {
        out.extend_from_slice(&img.data()[(cell.v * w + cell.u) * c..(cell.v * w + cell.u + 1) * c]);
    }
    Tensor::new([index.num_cells(), c], out)
}

/// Intermediates of [`aggregate_groups_cached`].
#[derive(Clone, Debug)]
pub struct AggregateCache<T: Real> {
    pooled: Tensor<T>,
    activated: Tensor<T>,
}

/// `F_g^0`: per cell `ReLU(Linear([max; mean]))`, zero on empty cells.
pub fn aggregate_groups<T: Real>(
    fp0: &Tensor<T>,
    index: &ProjectionIndex,
    params: &EncoderParams<T>,
) -> Result<Tensor<T>> {
    Ok(aggregate_groups_cached(fp0, index, params)?.0)
}

pub fn aggregate_groups_cached<T: Real>(
    fp0: &Tensor<T>,
    index: &ProjectionIndex,
    params: &EncoderParams<T>,
) -> Result<(Tensor<T>, AggregateCache<T>)> {
    let pooled = pool_cells(fp0, index)?;
    let activated = relu(&params.aggregate.forward(&pooled)?);
    let img = scatter_cells(&activated, index);
    Ok((img, AggregateCache { pooled, activated }))
}

/// Gradients of [`aggregate_groups`]: `(dF_p^0, d aggregate-linear)`. The
/// max branch routes to the first member (canonical order) holding the
/// maximum.
pub fn aggregate_groups_backward<T: Real>(
    fp0: &Tensor<T>,
    index: &ProjectionIndex,
    params: &EncoderParams<T>,
    cache: &AggregateCache<T>,
    d_image: &Tensor<T>,
) -> Result<(Tensor<T>, Linear<T>)> {
    let c = fp0.channels();
    let d_act = gather_cells(d_image, index)?;
    let d_pre = activation_backward(Activation::Relu, &cache.activated, &d_act)?;
    let (d_pooled, d_linear) = params.aggregate.backward(&cache.pooled, &d_pre)?;
    let parts = split_channels(&d_pooled, &[c, c])?;
    let (d_max, d_mean) = (&parts[0], &parts[1]);
    let mut dfp = Tensor::zeros(fp0.shape());
    let dd = dfp.data_mut();
    for (m, cell) in index.cells().iter().enumerate() {
        let members = index.members(cell);
        let count = T::from_usize(members.len()).unwrap();
        let maxima = &cache.pooled.row(m)[..c];
        for k in 0..c {
            let winner = members
                .iter()
                .copied()
                .find(|&j| fp0.row(j)[k] == maxima[k])
                .expect("max is attained by a member");
            dd[winner * c + k] += d_max.row(m)[k];
            for &j in members {
                dd[j * c + k] += d_mean.row(m)[k] / count;
            }
        }
    }
    Ok((dfp, d_linear))
}

/// Both encoder outputs `(F_p^0, F_g^0)`.
pub fn encode<T: Real>(
    scan: &RawScan,
    index: &ProjectionIndex,
    params: &EncoderParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let descriptors = encode_points(scan, index)?;
    let fp0 = embed_points(&descriptors, params)?;
    let fg0 = aggregate_groups(&fp0, index, params)?;
    Ok((fp0, fg0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{project, BeamTable};
    use crate::scan_io::{builtin_config, Point};

    fn setup(points: Vec<Point>) -> (RawScan, ProjectionIndex) {
        let cfg = builtin_config("semantickitti").unwrap();
        let table = BeamTable::uniform(&cfg).unwrap();
        let scan = RawScan::new(points).unwrap();
        let idx = project(&scan, &table, &cfg).unwrap();
        (scan, idx)
    }

    #[test]
    fn singleton_descriptor_has_zero_offsets() {
        let (scan, idx) = setup(vec![Point::new(3.0, 4.0, 0.0, 0.25)]);
        let f: Tensor<f64> = encode_points(&scan, &idx).unwrap();
        let r = idx.ranges()[0];
        assert_eq!(f.data(), &[3.0, 4.0, 0.0, 0.25, r, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let (v, u) = idx.pixel(0);
        assert_eq!(group_center(&scan, &idx, v, u).unwrap(), [3.0, 4.0, 0.0, 0.25, r]);
    }

    #[test]
    fn pair_offsets_cancel() {
        let (scan, idx) = setup(vec![Point::new(10.0, 1.0, 0.5, 0.2), Point::new(10.0, 1.0, 0.5, 0.4)]);
        assert_eq!(idx.num_cells(), 1);
        let f: Tensor<f64> = encode_points(&scan, &idx).unwrap();
        for k in 5..10 {
            assert!((f.row(0)[k] + f.row(1)[k]).abs() < 1e-12);
        }
        let (v, u) = idx.pixel(0);
        let c = group_center(&scan, &idx, v, u).unwrap();
        assert!((c[0] - 10.0).abs() < 1e-9 && (c[3] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn empty_group_is_an_error() {
        let (scan, idx) = setup(vec![Point::new(1.0, 0.0, 0.0, 0.0)]);
        assert!(matches!(
            group_center(&scan, &idx, 0, 0),
            Err(Error::EmptyGroup { v: 0, u: 0 })
        ));
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let (scan, idx) = setup(vec![Point::new(1.0, 2.0, 0.0, 0.0), Point::new(-4.0, 2.0, 0.5, 1.0)]);
        let params = EncoderParams::<f64>::new(8);
        let (fp0, fg0) = encode(&scan, &idx, &params).unwrap();
        assert_eq!(fp0.shape(), &[2, 8]);
        assert!(fp0.data().iter().all(|&v| v == 0.0));
        assert!(fg0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singleton_aggregation_formula() {
        let (_, idx) = setup(vec![Point::new(5.0, 1.0, 0.0, 0.0), Point::new(-5.0, 1.0, 0.3, 0.0)]);
        let mut params = EncoderParams::<f64>::new(3);
        params.aggregate.weight = Tensor::from_fn([6, 3], |i| (i as f64 * 0.37).sin());
        params.aggregate.bias = Tensor::new([3], vec![0.1, -0.2, 0.05]).unwrap();
        let fp0 = Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.0, -1.0]).unwrap();
        let img = aggregate_groups(&fp0, &idx, &params).unwrap();
        for j in 0..2 {
            let row = Tensor::new([1, 3], fp0.row(j).to_vec()).unwrap();
            let cat = crate::tensor::ops::concat_channels(&[&row, &row]).unwrap();
            let expect = relu(&params.aggregate.forward(&cat).unwrap());
            let (v, u) = idx.pixel(j);
            let got = &img.data()[(v * 1024 + u) * 3..(v * 1024 + u + 1) * 3];
            assert_eq!(got, expect.data());
        }
        let nonzero_px = (0..64 * 1024)
            .filter(|p| img.data()[p * 3..p * 3 + 3].iter().any(|&v| v != 0.0))
            .count();
        assert!(nonzero_px <= 2);
    }

    #[test]
    fn duplicate_rows_embed_identically() {
        let mut params = EncoderParams::<f64>::new(4);
        params.mlp.fc1.weight = Tensor::from_fn([10, 4], |i| (i as f64).cos());
        params.mlp.fc2.weight = Tensor::from_fn([4, 4], |i| (i as f64 * 0.5).sin());
        let row: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let x = Tensor::new([2, 10], [row.clone(), row].concat()).unwrap();
        let y = embed_points(&x, &params).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }
}
