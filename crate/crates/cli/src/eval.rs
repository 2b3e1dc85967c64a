use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use rangeseg::metrics::{default_bin_edges, range_binned, validate_edges, ClassScores, ConfusionMatrix};
use rangeseg::scan_io::{read_labels, read_scan, remap_labels, DatasetConfig};
use rayon::prelude::*;

use crate::exit::{Exit, INPUT};
use crate::{create_out, dataset_from, require_dir};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of `<stem>.pred` (or `.label`) predictions.
    pub pred_dir: PathBuf,
    /// Directory of `<stem>.label` ground truth.
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Model config; only its dataset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of `<stem>` scans, needed for per-range scores.
    #[arg(long)]
    pub scans: Option<PathBuf>,
    /// Range bin edges in meters, comma separated (default 0,5,...,50).
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<f64>>,
    /// Count classes absent from both prediction and ground truth as 0 in the means.
    #[arg(long)]
    pub zero_absent: bool,
    /// Predictions hold raw dataset ids and go through the label remap.
    #[arg(long)]
    pub raw_pred: bool,
    /// Also write a machine-readable `<out>/summary.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn files_by_stem(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>, Exit> {
    let mut map = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Exit::new(INPUT, format!("{}: {e}", dir.display())))?;
    for path in entries.filter_map(|e| e.ok().map(|e| e.path())) {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if !exts.contains(&ext) {
            continue;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(prev) = map.insert(stem.clone(), path.clone()) {
            return Err(Exit::new(
                INPUT,
                format!("stem `{stem}` appears twice: {} and {}", prev.display(), path.display()),
            ));
        }
    }
    Ok(map)
}

struct Frame {
    matrix: ConfusionMatrix,
    bins: Vec<ConfusionMatrix>,
}

fn score_frame(
    stem: &str,
    pred: &Path,
    gt: &Path,
    scan: Option<&Path>,
    edges: &[f64],
    dataset: &DatasetConfig,
    raw_pred: bool,
) -> anyhow::Result<Frame> {
    let gt_ids = remap_labels(&read_labels(gt).with_context(|| format!("reading {}", gt.display()))?, dataset);
    let mut pred_ids = read_labels(pred).with_context(|| format!("reading {}", pred.display()))?;
    if raw_pred {
        pred_ids = remap_labels(&pred_ids, dataset);
    }
    if pred_ids.len() != gt_ids.len() {
        bail!("`{stem}`: {} predictions for {} labels", pred_ids.len(), gt_ids.len());
    }
    let k = dataset.num_classes;
    for (p, &g) in pred_ids.iter_mut().zip(&gt_ids) {
        if g == dataset.ignore_id {
            *p = 0;
        }
    }
    if let Some(i) = pred_ids.iter().position(|&p| p as usize >= k) {
        bail!("`{stem}`: prediction {} at index {i} is not a class id below {k}", pred_ids[i]);
    }
    let mut matrix = ConfusionMatrix::new(k);
    matrix
        .accumulate(&pred_ids, &gt_ids, dataset.ignore_id)
        .with_context(|| format!("`{stem}`"))?;
    let bins = match scan {
        Some(path) => {
            let scan = read_scan(path).with_context(|| format!("reading {}", path.display()))?;
            if scan.len() != gt_ids.len() {
                bail!("`{stem}`: scan has {} points, labels {}", scan.len(), gt_ids.len());
            }
            let ranges: Vec<f64> = scan
                .points()
                .iter()
                .map(|p| (p.x as f64).hypot(p.y as f64).hypot(p.z as f64))
                .collect();
            range_binned(&pred_ids, &gt_ids, &ranges, edges, k, dataset.ignore_id)
                .with_context(|| format!("`{stem}`"))?
                .into_iter()
                .map(|b| b.matrix)
                .collect()
        }
        None => Vec::new(),
    };
    Ok(Frame { matrix, bins })
}

fn mean(scores: &ClassScores, zero_absent: bool) -> Option<f64> {
    if zero_absent {
        scores.mean_zero_absent()
    } else {
        scores.mean()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

pub fn run(args: &EvalArgs) -> Result<(), Exit> {
    require_dir(&args.pred_dir)?;
    require_dir(&args.gt_dir)?;
    let dataset = dataset_from(args.dataset.as_deref(), args.config.as_deref())?;
    if args.bins.is_some() && args.scans.is_none() {
        return Err(Exit::new(INPUT, "--bins needs --scans to know point ranges"));
    }
    let edges = args.bins.clone().unwrap_or_else(default_bin_edges);
    validate_edges(&edges).map_err(|e| Exit::from_core(e, "--bins"))?;

    let preds = files_by_stem(&args.pred_dir, &["pred", "label"])?;
    let gts = files_by_stem(&args.gt_dir, &["label"])?;
    let scans = match &args.scans {
        Some(dir) => {
            require_dir(dir)?;
            Some(files_by_stem(dir, &["bin", "xyzil", "txt"])?)
        }
        None => None,
    };
    let mut stems: Vec<&String> = preds.keys().chain(gts.keys()).collect();
    stems.sort();
    stems.dedup();
    for stem in &stems {
        let missing = if !preds.contains_key(*stem) {
            Some("prediction")
        } else if !gts.contains_key(*stem) {
            Some("ground truth")
        } else if scans.as_ref().is_some_and(|s| !s.contains_key(*stem)) {
            Some("scan")
        } else {
            None
        };
        if let Some(what) = missing {
            return Err(Exit::new(INPUT, format!("stem `{stem}` has no {what} file")));
        }
    }
    if stems.is_empty() {
        return Err(Exit::new(INPUT, "no `.label` files found"));
    }

    let frames: Vec<Frame> = stems
        .par_iter()
        .map(|stem| {
            let scan = scans.as_ref().map(|s| s[*stem].as_path());
            score_frame(stem, &preds[*stem], &gts[*stem], scan, &edges, &dataset, args.raw_pred)
        })
        .collect::<anyhow::Result<_>>()?;

    let k = dataset.num_classes;
    let mut total = ConfusionMatrix::new(k);
    let mut bins = vec![ConfusionMatrix::new(k); if scans.is_some() { edges.len() - 1 } else { 0 }];
    for f in &frames {
        total += &f.matrix;
        for (acc, b) in bins.iter_mut().zip(&f.bins) {
            *acc += b;
        }
    }
    let report = render(&dataset, &total, &bins, &edges, frames.len(), args.zero_absent);
    print!("{report}");
    if let Some(out) = &args.out {
        create_out(out)?;
        let summary = render_summary(&dataset, &total, &bins, &edges, args.zero_absent);
        std::fs::write(out.join("summary.txt"), summary)
            .map_err(|e| Exit::new(INPUT, format!("writing summary.txt: {e}")))?;
    }
    Ok(())
}

fn render(
    dataset: &DatasetConfig,
    total: &ConfusionMatrix,
    bins: &[ConfusionMatrix],
    edges: &[f64],
    frames: usize,
    zero_absent: bool,
) -> String {
    let (iou, acc) = (total.iou(), total.acc());
    let mut s = String::new();
    let _ = writeln!(s, "frames {frames}");
    let _ = writeln!(s, "points {}", total.total());
    let _ = writeln!(s, "ignored {}", total.ignored());
    let _ = writeln!(s, "{:<16} {:>8} {:>8}", "class", "IoU", "Acc");
    for c in 0..dataset.num_classes {
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8}",
            dataset.class_name(c),
            fmt_opt(iou.per_class[c]),
            fmt_opt(acc.per_class[c])
        );
    }
    let _ = writeln!(s, "mIoU {}", fmt_opt(mean(&iou, zero_absent)));
    let _ = writeln!(s, "mAcc {}", fmt_opt(mean(&acc, zero_absent)));
    if !bins.is_empty() {
        let _ = writeln!(s, "{:<16} {:>8} {:>8}", "range_m", "mIoU", "points");
        for (i, b) in bins.iter().enumerate() {
            let label = format!("[{}, {})", edges[i], edges[i + 1]);
            let _ = writeln!(s, "{label:<16} {:>8} {:>8}", fmt_opt(mean(&b.iou(), zero_absent)), b.total());
        }
    }
    s
}

/// One `class name iou acc` line per class, then `miou`, `macc` and one
/// `bin lo hi miou points` line per range bin. Absent values are `-`.
fn render_summary(
    dataset: &DatasetConfig,
    total: &ConfusionMatrix,
    bins: &[ConfusionMatrix],
    edges: &[f64],
    zero_absent: bool,
) -> String {
    let full = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_else(|| "-".into());
    let (iou, acc) = (total.iou(), total.acc());
    let mut s = String::new();
    for c in 0..dataset.num_classes {
        let name = dataset.class_name(c).replace(' ', "_");
        let _ = writeln!(s, "class {name} {} {}", full(iou.per_class[c]), full(acc.per_class[c]));
    }
    let _ = writeln!(s, "miou {}", full(mean(&iou, zero_absent)));
    let _ = writeln!(s, "macc {}", full(mean(&acc, zero_absent)));
    for (i, b) in bins.iter().enumerate() {
        let _ = writeln!(s, "bin {} {} {} {}", edges[i], edges[i + 1], full(mean(&b.iou(), zero_absent)), b.total());
    }
    s
}
