//! Confusion-matrix evaluation: per-class IoU and accuracy, their means, and
//! mIoU per distance bin.

use std::ops::AddAssign;

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    /// Adds one frame. Points whose ground truth equals `ignore_id` only bump
    /// the ignored counter; the whole frame is validated before anything is
    /// counted.
    pub fn accumulate(&mut self, pred: &[u32], gt: &[u32], ignore_id: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!(
                "accumulate: {} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes as u32;
        for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if g != ignore_id && g >= k {
                return Err(Error::Label { index, id: g });
            }
            if g != ignore_id && p >= k {
                return Err(Error::Label { index, id: p });
            }
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_id {
                self.ignored += 1;
            } else {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!(
                "merge: {} classes vs {}",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    /// Per-class IoU and its mean over present classes.
    pub fn iou(&self) -> ClassScores {
        self.scores(|m, c| {
            let tp = m.get(c, c);
            (tp, m.row_sum(c) + m.col_sum(c) - tp)
        })
    }

    /// Per-class accuracy (recall) and its mean over present classes.
    pub fn acc(&self) -> ClassScores {
        self.scores(|m, c| (m.get(c, c), m.row_sum(c)))
    }

    fn scores(&self, ratio: impl Fn(&Self, usize) -> (u64, u64)) -> ClassScores {
        let per_class = (0..self.classes)
            .map(|c| {
                let (num, den) = ratio(self, c);
                (den > 0).then(|| num as f64 / den as f64)
            })
            .collect();
        ClassScores { per_class }
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        self.merge(rhs).expect("class counts differ");
    }
}

/// Per-class values; `None` marks a class with a zero denominator.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
}

impl ClassScores {
    /// Mean over present classes, `None` if no class is present.
    pub fn mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Mean over all classes with absent classes scored 0.
    pub fn mean_zero_absent(&self) -> Option<f64> {
        (!self.per_class.is_empty())
            .then(|| self.per_class.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / self.per_class.len() as f64)
    }
}

/// `[0, 5, 10, …, 50]` meters.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 5.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RangeBin {
    pub lo: f64,
    pub hi: f64,
    pub matrix: ConfusionMatrix,
}

impl RangeBin {
    pub fn miou(&self) -> Option<f64> {
        self.matrix.iou().mean()
    }
}

pub fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Config("range bins need at least two edges".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "range bin edges must be finite and strictly increasing: {edges:?}"
        )));
    }
    Ok(())
}

/// One confusion matrix per half-open range bin `[edge_i, edge_{i+1})`.
/// Points outside every bin are dropped.
pub fn range_binned(
    pred: &[u32],
    gt: &[u32],
    ranges: &[f64],
    edges: &[f64],
    classes: usize,
    ignore_id: u32,
) -> Result<Vec<RangeBin>> {
    validate_edges(edges)?;
    if pred.len() != gt.len() || ranges.len() != gt.len() {
        return Err(Error::dim(format!(
            "range bins: {} predictions, {} labels, {} ranges",
            pred.len(),
            gt.len(),
            ranges.len()
        )));
    }
    let nb = edges.len() - 1;
    let mut split: Vec<(Vec<u32>, Vec<u32>)> = vec![(Vec::new(), Vec::new()); nb];
    for ((&p, &g), &r) in pred.iter().zip(gt).zip(ranges) {
        if r < edges[0] || r >= edges[nb] {
            continue;
        }
        let b = edges.partition_point(|&e| e <= r) - 1;
        split[b].0.push(p);
        split[b].1.push(g);
    }
    split
        .into_iter()
        .enumerate()
        .map(|(b, (p, g))| {
            let mut matrix = ConfusionMatrix::new(classes);
            matrix.accumulate(&p, &g, ignore_id)?;
            Ok(RangeBin {
                lo: edges[b],
                hi: edges[b + 1],
                matrix,
            })
        })
        .collect()
}

/// mIoU per bin; `None` for bins without any present class.
pub fn range_binned_miou(
    pred: &[u32],
    gt: &[u32],
    ranges: &[f64],
    edges: &[f64],
    classes: usize,
    ignore_id: u32,
) -> Result<Vec<Option<f64>>> {
    Ok(range_binned(pred, gt, ranges, edges, classes, ignore_id)?
        .iter()
        .map(RangeBin::miou)
        .collect())
}
