//! Range-image projection.
//!
//! Each point gets a row from its laser beam (nearest beam elevation) and a
//! column from its azimuth. Points sharing a `(row, column)` cell form one
//! group; [`ProjectionIndex`] records the partition and drives the
//! point→image scatter ([`flatten`]) and image→point gather ([`unflatten`]).
//!
//! Members of a cell are kept in a canonical order derived from the point
//! values rather than their position in the file, so every per-cell
//! reduction is bit-identical under any permutation of the input scan.

use std::cmp::Ordering;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scan_io::{DatasetConfig, Point, RawScan};
use crate::tensor::{Real, Tensor};

/// Per-beam elevation (radians) and vertical offset (meters), top beam first.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamTable {
    elevations: Vec<f64>,
    offsets: Vec<f64>,
}

impl BeamTable {
    pub fn new(elevations: Vec<f64>, offsets: Vec<f64>) -> Result<Self> {
        if elevations.is_empty() {
            return Err(Error::Config("beam table is empty".into()));
        }
        if elevations.len() != offsets.len() {
            return Err(Error::Config(format!(
                "beam table has {} elevations but {} offsets",
                elevations.len(),
                offsets.len()
            )));
        }
        if elevations.iter().chain(&offsets).any(|v| !v.is_finite()) {
            return Err(Error::Config("beam table has non-finite entries".into()));
        }
        if let Some(i) = elevations.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "beam elevations must strictly decrease; rows {i} and {} do not",
                i + 1
            )));
        }
        Ok(Self { elevations, offsets })
    }

    /// `H` evenly spaced beams from `fov_up` (row 0) down to `fov_down`,
    /// all mounted at zero height.
    pub fn uniform(cfg: &DatasetConfig) -> Result<Self> {
        let h = cfg.num_beams;
        if h == 0 {
            return Err(Error::Config("dataset has no beams".into()));
        }
        let step = if h > 1 {
            (cfg.fov_up - cfg.fov_down) / (h - 1) as f64
        } else {
            0.0
        };
        let elevations = (0..h)
            .map(|l| if l + 1 == h && h > 1 { cfg.fov_down } else { cfg.fov_up - l as f64 * step })
            .collect();
        Self::new(elevations, vec![0.0; h])
    }

    /// Parses `elevation_deg vertical_offset_m` lines, top row first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut elevations = Vec::new();
        let mut offsets = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<f64> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("beam table line {}: not a number", lineno + 1)))?;
            let [elev, off] = fields[..] else {
                return Err(Error::Config(format!(
                    "beam table line {}: expected `elevation_deg vertical_offset_m`",
                    lineno + 1
                )));
            };
            elevations.push(elev.to_radians());
            offsets.push(off);
        }
        Self::new(elevations, offsets)
    }

    pub fn len(&self) -> usize {
        self.elevations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elevations.is_empty()
    }

    pub fn elevations(&self) -> &[f64] {
        &self.elevations
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    fn common_offset(&self) -> Option<f64> {
        let h0 = self.offsets[0];
        self.offsets.iter().all(|&h| h == h0).then_some(h0)
    }

    /// Row whose elevation is nearest to `elev`; ties go to the lower row.
    pub fn nearest(&self, elev: f64) -> usize {
        // elevations decrease, so partition on "strictly above elev"
        let i = self.elevations.partition_point(|&e| e > elev);
        if i == 0 {
            return 0;
        }
        if i == self.elevations.len() {
            return i - 1;
        }
        let above = self.elevations[i - 1] - elev;
        let below = elev - self.elevations[i];
        if above <= below {
            i - 1
        } else {
            i
        }
    }

    fn beam_of(&self, p: &Point) -> Result<BeamHit> {
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let rho = x.hypot(y);
        let top = self.elevations[0];
        let bottom = self.elevations[self.len() - 1];
        if let Some(h) = self.common_offset() {
            if rho == 0.0 && z - h == 0.0 {
                return Err(Error::DegeneratePoint);
            }
            let elev = (z - h).atan2(rho);
            return Ok(BeamHit {
                row: self.nearest(elev),
                outside_fov: elev > top || elev < bottom,
            });
        }
        if rho == 0.0 && self.offsets.iter().any(|&h| z - h == 0.0) {
            return Err(Error::DegeneratePoint);
        }
        let mut best = (0, f64::INFINITY, 0.0);
        for (l, (&phi, &h)) in self.elevations.iter().zip(&self.offsets).enumerate() {
            let elev = (z - h).atan2(rho);
            let d = (elev - phi).abs();
            if d < best.1 {
                best = (l, d, elev);
            }
        }
        let (row, _, elev) = best;
        let outside_fov = (row == 0 && elev > top) || (row + 1 == self.len() && elev < bottom);
        Ok(BeamHit { row, outside_fov })
    }
}

struct BeamHit {
    row: usize,
    outside_fov: bool,
}

/// Row of the beam nearest to the point's elevation.
pub fn assign_beam(point: &Point, table: &BeamTable) -> Result<usize> {
    Ok(table.beam_of(point)?.row)
}

/// `(range, azimuth)` of a point relative to a beam mounted at height `h`;
/// azimuth lies in `(−π, π]`.
pub fn spherical_coords(point: &Point, h: f64) -> (f64, f64) {
    let (x, y, z) = (point.x as f64, point.y as f64, point.z as f64 - h);
    let r = (x * x + y * y + z * z).sqrt();
    let mut alpha = y.atan2(x);
    if alpha <= -PI {
        alpha = PI;
    }
    (r, alpha)
}

/// Image column of an azimuth: `floor((α + π) / 2π · W)` clamped to `W − 1`.
pub fn azimuth_column(alpha: f64, width: usize) -> usize {
    let u = ((alpha + PI) / (2.0 * PI) * width as f64).floor();
    if u <= 0.0 {
        0
    } else {
        (u as usize).min(width - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub v: usize,
    pub u: usize,
    start: usize,
    end: usize,
}

impl Cell {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Partition of a scan into range-image cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionIndex {
    height: usize,
    width: usize,
    pixels: Vec<(usize, usize)>,
    ranges: Vec<f64>,
    azimuths: Vec<f64>,
    /// Canonical rank of each point; members of a cell are stored by rank.
    ranks: Vec<usize>,
    cells: Vec<Cell>,
    members: Vec<usize>,
    cell_of_point: Vec<usize>,
    degenerate: usize,
    outside_fov: usize,
}

impl ProjectionIndex {
    fn build(
        height: usize,
        width: usize,
        pixels: Vec<(usize, usize)>,
        ranges: Vec<f64>,
        azimuths: Vec<f64>,
        ranks: Vec<usize>,
        degenerate: usize,
        outside_fov: usize,
    ) -> Self {
        let mut order: Vec<usize> = (0..pixels.len()).collect();
        order.sort_unstable_by_key(|&j| (pixels[j].0 * width + pixels[j].1, ranks[j]));
        let mut cells = Vec::new();
        let mut cell_of_point = vec![0; pixels.len()];
        let mut start = 0;
        while start < order.len() {
            let px = pixels[order[start]];
            let mut end = start;
            while end < order.len() && pixels[order[end]] == px {
                cell_of_point[order[end]] = cells.len();
                end += 1;
            }
            cells.push(Cell { v: px.0, u: px.1, start, end });
            start = end;
        }
        Self {
            height,
            width,
            pixels,
            ranges,
            azimuths,
            ranks,
            cells,
            members: order,
            cell_of_point,
            degenerate,
            outside_fov,
        }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_points(&self) -> usize {
        self.pixels.len()
    }

    /// Number of non-empty cells (M).
    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn empty_cells(&self) -> usize {
        self.height * self.width - self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn members(&self, cell: &Cell) -> &[usize] {
        &self.members[cell.start..cell.end]
    }

    pub fn cell_of(&self, point: usize) -> &Cell {
        &self.cells[self.cell_of_point[point]]
    }

    /// `(v, u)` of a point.
    pub fn pixel(&self, point: usize) -> (usize, usize) {
        self.pixels[point]
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    pub fn degenerate_points(&self) -> usize {
        self.degenerate
    }

    pub fn outside_fov_points(&self) -> usize {
        self.outside_fov
    }

    /// Per-cell point counts as an `[H, W]` grid.
    pub fn density(&self) -> Vec<usize> {
        let mut d = vec![0; self.height * self.width];
        for c in &self.cells {
            d[c.v * self.width + c.u] = c.len();
        }
        d
    }

    /// The same points on a grid coarsened by `factor` in both directions
    /// (`ceil(H / factor) × ceil(W / factor)`), matching the resolution of
    /// a backbone stage whose cumulative stride is `factor`.
    pub fn downscale(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("downscale factor must be positive".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let pixels = self.pixels.iter().map(|&(v, u)| (v / factor, u / factor)).collect();
        Ok(Self::build(
            self.height.div_ceil(factor),
            self.width.div_ceil(factor),
            pixels,
            self.ranges.clone(),
            self.azimuths.clone(),
            self.ranks.clone(),
            self.degenerate,
            self.outside_fov,
        ))
    }
}

fn canonical_ranks(points: &[Point]) -> Vec<usize> {
    let key = |p: &Point| [p.x, p.y, p.z, p.intensity];
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&points[a]), key(&points[b]));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut ranks = vec![0; points.len()];
    for (rank, &j) in order.iter().enumerate() {
        ranks[j] = rank;
    }
    ranks
}

/// Projects every point of `scan` onto the `H × W` grid of `cfg`.
///
/// Degenerate points (at the beam origin) get range 0, azimuth 0 and the
/// row nearest to zero elevation; they are counted, never rejected. Points
/// above or below the field of view clamp to the outermost beam and are
/// counted too.
pub fn project(scan: &RawScan, table: &BeamTable, cfg: &DatasetConfig) -> Result<ProjectionIndex> {
    if table.len() != cfg.num_beams {
        return Err(Error::Config(format!(
            "beam table has {} rows, dataset expects {}",
            table.len(),
            cfg.num_beams
        )));
    }
    let n = scan.len();
    let mut pixels = Vec::with_capacity(n);
    let mut ranges = Vec::with_capacity(n);
    let mut azimuths = Vec::with_capacity(n);
    let (mut degenerate, mut outside_fov) = (0, 0);
    for p in scan.points() {
        match table.beam_of(p) {
            Ok(hit) => {
                let (r, alpha) = spherical_coords(p, table.offsets[hit.row]);
                pixels.push((hit.row, azimuth_column(alpha, cfg.width)));
                ranges.push(r);
                azimuths.push(alpha);
                outside_fov += hit.outside_fov as usize;
            }
            Err(Error::DegeneratePoint) => {
                pixels.push((table.nearest(0.0), azimuth_column(0.0, cfg.width)));
                ranges.push(0.0);
                azimuths.push(0.0);
                degenerate += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ProjectionIndex::build(
        cfg.num_beams,
        cfg.width,
        pixels,
        ranges,
        azimuths,
        canonical_ranks(scan.points()),
        degenerate,
        outside_fov,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduce {
    #[default]
    Mean,
    Max,
}

/// Scatters `N × C` point features onto the `H × W × C` grid, reducing each
/// cell's members; empty cells are zero.
pub fn flatten<T: Real>(features: &Tensor<T>, index: &ProjectionIndex, reduce: Reduce) -> Result<Tensor<T>> {
    let (n, c) = features.nc()?;
    if n != index.num_points() {
        return Err(Error::dim(format!(
            "flatten: {n} feature rows for {} indexed points",
            index.num_points()
        )));
    }
    let (h, w) = index.resolution();
    let mut out = Tensor::zeros([h, w, c]);
    let od = out.data_mut();
    for cell in index.cells() {
        let dst = &mut od[(cell.v * w + cell.u) * c..(cell.v * w + cell.u + 1) * c];
        let members = index.members(cell);
        match reduce {
            Reduce::Mean => {
                for &j in members {
                    for (d, &v) in dst.iter_mut().zip(features.row(j)) {
                        *d += v;
                    }
                }
                let count = T::from_usize(members.len()).unwrap();
                for d in dst.iter_mut() {
                    *d /= count;
                }
            }
            Reduce::Max => {
                dst.copy_from_slice(features.row(members[0]));
                for &j in &members[1..] {
                    for (d, &v) in dst.iter_mut().zip(features.row(j)) {
                        if v > *d {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gathers the cell value of every point: row `j` is the image at point
/// `j`'s cell.
pub fn unflatten<T: Real>(image: &Tensor<T>, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let (h, w, c) = image.hwc()?;
    if (h, w) != index.resolution() {
        return Err(Error::dim(format!(
            "unflatten: image is {h}x{w}, index is {:?}",
            index.resolution()
        )));
    }
    let n = index.num_points();
    let id = image.data();
    let mut out = Vec::with_capacity(n * c);
    for j in 0..n {
        let (v, u) = index.pixel(j);
        out.extend_from_slice(&id[(v * w + u) * c..(v * w + u + 1) * c]);
    }
    Tensor::new([n, c], out)
}

/// Gradient of mean-[`flatten`] with respect to the point features.
pub fn flatten_mean_backward<T: Real>(d_image: &Tensor<T>, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let mut d = unflatten(d_image, index)?;
    let c = d.channels();
    let dd = d.data_mut();
    for cell in index.cells() {
        let count = T::from_usize(cell.len()).unwrap();
        for &j in index.members(cell) {
            for v in &mut dd[j * c..(j + 1) * c] {
                *v /= count;
            }
        }
    }
    Ok(d)
}

/// Gradient of [`unflatten`] with respect to the image: per-cell sums of the
/// member gradients, accumulated in canonical order.
pub fn unflatten_backward<T: Real>(d_points: &Tensor<T>, index: &ProjectionIndex) -> Result<Tensor<T>> {
    let (n, c) = d_points.nc()?;
    if n != index.num_points() {
        return Err(Error::dim("unflatten_backward: row count mismatch"));
    }
    let (h, w) = index.resolution();
    let mut out = Tensor::zeros([h, w, c]);
    let od = out.data_mut();
    for cell in index.cells() {
        let dst = &mut od[(cell.v * w + cell.u) * c..(cell.v * w + cell.u + 1) * c];
        for &j in index.members(cell) {
            for (d, &g) in dst.iter_mut().zip(d_points.row(j)) {
                *d += g;
            }
        }
    }
    Ok(out)
}
