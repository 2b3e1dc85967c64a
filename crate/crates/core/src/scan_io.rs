//! Scan and label files, label remapping and per-dataset sensor geometry.
//!
//! On-disk formats:
//!
//! ```text
//! .bin    [x:f32 | y:f32 | z:f32 | intensity:f32] * N      little-endian
//! .label  [semantic:u16 | instance:u16] * N                 little-endian u32
//! .xyzil  one "x y z intensity label" line per point        UTF-8 text
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Class id assigned to points that are excluded from evaluation.
pub const IGNORE_ID: u32 = 255;

const KITTI_REMAP: &str = include_str!("../data/semantickitti_remap.txt");

const KITTI_CLASSES: [&str; 19] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
];

const NUSCENES_CLASSES: [&str; 16] = [
    "barrier",
    "bicycle",
    "bus",
    "car",
    "construction-vehicle",
    "motorcycle",
    "pedestrian",
    "traffic-cone",
    "trailer",
    "truck",
    "driveable-surface",
    "other-flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// One LiDAR sweep with optional per-point labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawScan {
    points: Vec<Point>,
    labels: Option<Vec<u32>>,
}

impl RawScan {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::MalformedScan(format!("point {i} has a non-finite value")));
        }
        Ok(Self { points, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::MalformedLabels(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same scan with points (and labels) reordered so that new point
    /// `i` is old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.len() {
            return Err(Error::dim("permutation length does not match the scan"));
        }
        let points = order.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| order.iter().map(|&i| l[i]).collect());
        Ok(Self { points, labels })
    }
}

/// Sensor geometry and label space of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub name: String,
    pub num_beams: usize,
    pub width: usize,
    /// Upper edge of the vertical field of view, radians.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, radians.
    pub fov_down: f64,
    pub num_classes: usize,
    pub label_remap: HashMap<u32, u32>,
    pub ignore_id: u32,
    pub class_names: Vec<String>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_beams == 0 || self.width == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "{}: beams, width and class count must be positive",
                self.name
            )));
        }
        if !(self.fov_down < self.fov_up) {
            return Err(Error::Config(format!(
                "{}: fov_down must lie below fov_up",
                self.name
            )));
        }
        if (self.ignore_id as usize) < self.num_classes {
            return Err(Error::Config(format!(
                "{}: ignore id {} collides with a class id",
                self.name, self.ignore_id
            )));
        }
        let bad = self
            .label_remap
            .iter()
            .filter(|(_, &c)| c != self.ignore_id && c as usize >= self.num_classes)
            .map(|(&raw, _)| raw)
            .min();
        if let Some(raw) = bad {
            return Err(Error::Config(format!(
                "{}: raw id {raw} remaps outside the class range",
                self.name
            )));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        self.class_names
            .get(class)
            .cloned()
            .unwrap_or_else(|| format!("class{class}"))
    }
}

/// Geometry and label space for a named dataset (`semantickitti` or
/// `nuscenes`).
pub fn builtin_config(name: &str) -> Result<DatasetConfig> {
    let cfg = match name.to_ascii_lowercase().as_str() {
        "semantickitti" | "kitti" => DatasetConfig {
            name: "semantickitti".into(),
            num_beams: 64,
            width: 1024,
            fov_up: 3f64.to_radians(),
            fov_down: (-25f64).to_radians(),
            num_classes: 19,
            label_remap: parse_remap_table(KITTI_REMAP)?,
            ignore_id: IGNORE_ID,
            class_names: KITTI_CLASSES.iter().map(|s| s.to_string()).collect(),
        },
        "nuscenes" => DatasetConfig {
            name: "nuscenes".into(),
            num_beams: 32,
            width: 1024,
            fov_up: 10f64.to_radians(),
            fov_down: (-30f64).to_radians(),
            num_classes: 16,
            label_remap: (0..16).map(|i| (i, i)).collect(),
            ignore_id: IGNORE_ID,
            class_names: NUSCENES_CLASSES.iter().map(|s| s.to_string()).collect(),
        },
        _ => return Err(Error::UnknownDataset(name.to_string())),
    };
    Ok(cfg)
}

pub fn parse_kitti_scan(bytes: &[u8]) -> Result<RawScan> {
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan(format!(
            "length {} is not a multiple of 16",
            bytes.len()
        )));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let p = Point::new(f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12]), f(&rec[12..16]));
        if !p.is_finite() {
            return Err(Error::MalformedScan(format!("point {i} has a non-finite value")));
        }
        points.push(p);
    }
    Ok(RawScan { points, labels: None })
}

pub fn encode_kitti_scan(scan: &RawScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * 16);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Semantic ids (low 16 bits) of a `.label` file; instance bits are dropped.
pub fn parse_kitti_labels(bytes: &[u8]) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedLabels(format!(
            "length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) & 0xFFFF)
        .collect())
}

/// Little-endian `u32` per id; also the `.pred` format.
pub fn encode_labels(ids: &[u32]) -> Vec<u8> {
    ids.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Maps raw ids to evaluation classes; unknown ids become `cfg.ignore_id`.
pub fn remap_labels(raw: &[u32], cfg: &DatasetConfig) -> Vec<u32> {
    raw.iter()
        .map(|r| match cfg.label_remap.get(r) {
            Some(&c) if (c as usize) < cfg.num_classes => c,
            _ => cfg.ignore_id,
        })
        .collect()
}

/// Parses `raw_id class_id` lines; `#` starts a comment.
pub fn parse_remap_table(text: &str) -> Result<HashMap<u32, u32>> {
    let mut table = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let parsed = match fields[..] {
            [a, b] => a.parse::<u32>().ok().zip(b.parse::<u32>().ok()),
            _ => None,
        };
        let Some((raw, class)) = parsed else {
            return Err(Error::Config(format!(
                "remap table line {}: expected `raw_id class_id`",
                lineno + 1
            )));
        };
        if table.insert(raw, class).is_some() {
            return Err(Error::Config(format!(
                "remap table line {}: raw id {raw} listed twice",
                lineno + 1
            )));
        }
    }
    Ok(table)
}

/// Parses the `x y z intensity label` text format. The label column is
/// optional but must be present on every line or on none.
pub fn parse_xyzil(text: &str) -> Result<RawScan> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut with_labels = None;
    for (lineno, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        let bad = || Error::MalformedScan(format!("line {}: expected `x y z intensity [label]`", lineno + 1));
        if fields.len() != 4 && fields.len() != 5 {
            return Err(bad());
        }
        let has_label = fields.len() == 5;
        if *with_labels.get_or_insert(has_label) != has_label {
            return Err(Error::MalformedScan(format!(
                "line {}: label column present on some lines only",
                lineno + 1
            )));
        }
        let v: Vec<f32> = fields[..4]
            .iter()
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        let p = Point::new(v[0], v[1], v[2], v[3]);
        if !p.is_finite() {
            return Err(Error::MalformedScan(format!(
                "point {} has a non-finite value",
                points.len()
            )));
        }
        points.push(p);
        if has_label {
            labels.push(fields[4].parse::<u32>().map_err(|_| bad())?);
        }
    }
    let scan = RawScan { points, labels: None };
    if with_labels == Some(true) {
        scan.with_labels(labels)
    } else {
        Ok(scan)
    }
}

pub fn write_xyzil(scan: &RawScan) -> String {
    let mut out = String::new();
    for (i, p) in scan.points.iter().enumerate() {
        let label = scan.labels.as_ref().map(|l| format!(" {}", l[i])).unwrap_or_default();
        out.push_str(&format!("{} {} {} {}{}\n", p.x, p.y, p.z, p.intensity, label));
    }
    out
}

/// Reads a scan by extension: `.bin` (KITTI binary) or `.xyzil`/`.txt`.
pub fn read_scan(path: &Path) -> Result<RawScan> {
    let bytes = fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyzil") | Some("txt") => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::MalformedScan(format!("{} is not UTF-8", path.display())))?;
            parse_xyzil(&text)
        }
        _ => parse_kitti_scan(&bytes),
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<u32>> {
    parse_kitti_labels(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record_decode() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let scan = parse_kitti_scan(&bytes).unwrap();
        assert_eq!(scan.points(), &[Point::new(1.0, 0.0, 0.0, 0.5)]);
    }

    #[test]
    fn empty_inputs() {
        assert!(parse_kitti_scan(&[]).unwrap().is_empty());
        assert!(parse_kitti_labels(&[]).unwrap().is_empty());
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(matches!(parse_kitti_scan(&[0; 17]), Err(Error::MalformedScan(_))));
        assert!(matches!(parse_kitti_labels(&[0; 6]), Err(Error::MalformedLabels(_))));
    }

    #[test]
    fn non_finite_reports_point_index() {
        let mut bytes = vec![0u8; 32];
        bytes[16 + 8..16 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        match parse_kitti_scan(&bytes) {
            Err(Error::MalformedScan(msg)) => assert!(msg.contains("point 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_low_bits() {
        let ids = parse_kitti_labels(&0x0001_0028u32.to_le_bytes()).unwrap();
        assert_eq!(ids, vec![0x28]);
    }

    #[test]
    fn remap_identity_and_unknown() {
        let mut cfg = builtin_config("nuscenes").unwrap();
        cfg.label_remap = (0..16).map(|i| (i, i)).collect();
        assert_eq!(remap_labels(&[3, 1], &cfg), vec![3, 1]);
        assert_eq!(remap_labels(&[9999], &cfg), vec![IGNORE_ID]);
    }

    #[test]
    fn builtin_geometry() {
        let k = builtin_config("semantickitti").unwrap();
        assert_eq!((k.num_beams, k.width, k.num_classes), (64, 1024, 19));
        assert!((k.fov_up - 3f64.to_radians()).abs() < 1e-15);
        assert!((k.fov_down + 25f64.to_radians()).abs() < 1e-15);
        k.validate().unwrap();
        let n = builtin_config("nuscenes").unwrap();
        assert_eq!((n.num_beams, n.width, n.num_classes), (32, 1024, 16));
        assert!((n.fov_down + 30f64.to_radians()).abs() < 1e-15);
        assert!((n.fov_up - 10f64.to_radians()).abs() < 1e-15);
        n.validate().unwrap();
        assert!(matches!(builtin_config("foo"), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn kitti_table_spot_checks() {
        let k = builtin_config("semantickitti").unwrap();
        assert_eq!(remap_labels(&[10, 252, 40, 60, 81, 0, 52], &k), vec![0, 0, 8, 8, 18, 255, 255]);
    }

    #[test]
    fn remap_table_errors() {
        assert!(parse_remap_table("1 2 3").is_err());
        assert!(parse_remap_table("1 2\n1 3").is_err());
        assert_eq!(parse_remap_table("# only comments\n\n").unwrap().len(), 0);
    }

    #[test]
    fn xyzil_parses_with_and_without_labels() {
        let s = parse_xyzil("1 2 3 0.5 7\n-1 0 0 0 9\n").unwrap();
        assert_eq!(s.labels(), Some(&[7u32, 9][..]));
        let s = parse_xyzil("1 2 3 0.5\n").unwrap();
        assert_eq!(s.labels(), None);
        assert!(parse_xyzil("1 2 3 0.5 1\n1 2 3 0.5\n").is_err());
        assert!(parse_xyzil("1 2 nan 0.5\n").is_err());
        let back = parse_xyzil(&write_xyzil(&parse_xyzil("1.5 -2 3 0.25 4\n").unwrap())).unwrap();
        assert_eq!(back.points()[0], Point::new(1.5, -2.0, 3.0, 0.25));
    }

    #[test]
    fn label_length_checked() {
        let scan = RawScan::new(vec![Point::new(1.0, 0.0, 0.0, 0.0)]).unwrap();
        assert!(scan.with_labels(vec![1, 2]).is_err());
    }
}
