use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use image::GrayImage;
use rangeseg::projection::{project, BeamTable, ProjectionIndex};
use rangeseg::scan_io::read_scan;

use crate::exit::Exit;
use crate::{create_out, dataset_from, require_file};

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Scan file: `.bin` (KITTI binary) or `.xyzil`/`.txt`.
    pub scan: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Model config; only its dataset is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(args: &ProjectArgs) -> Result<(), Exit> {
    require_file(&args.scan)?;
    let dataset = dataset_from(args.dataset.as_deref(), args.config.as_deref())?;
    let scan = read_scan(&args.scan).with_context(|| format!("reading {}", args.scan.display()))?;
    let beams = BeamTable::uniform(&dataset).context("beam table")?;
    let index = project(&scan, &beams, &dataset).context("projection")?;
    create_out(&args.out)?;
    write_outputs(&index, &args.out)?;
    println!(
        "{}: {} points, {} cells, wrote {}",
        args.scan.display(),
        index.num_points(),
        index.num_cells(),
        args.out.display()
    );
    Ok(())
}

fn write_outputs(index: &ProjectionIndex, out: &Path) -> anyhow::Result<()> {
    let (h, w) = index.resolution();
    let mut mean_range = vec![0.0f64; h * w];
    let mut counts = vec![0usize; h * w];
    for cell in index.cells() {
        let members = index.members(cell);
        let px = cell.v * w + cell.u;
        counts[px] = members.len();
        mean_range[px] = members.iter().map(|&j| index.ranges()[j]).sum::<f64>() / members.len() as f64;
    }
    let occupied: Vec<f64> = index.cells().iter().map(|c| mean_range[c.v * w + c.u]).collect();
    let (lo, hi) = occupied
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    // occupied pixels use 1..=255 so the nearest one stays visible
    let depth: Vec<u8> = (0..h * w)
        .map(|px| match counts[px] {
            0 => 0,
            _ if hi > lo => 1 + ((mean_range[px] - lo) / (hi - lo) * 254.0).round() as u8,
            _ => 255,
        })
        .collect();
    let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let density: Vec<u8> = counts
        .iter()
        .map(|&c| ((c as f64 / max_count) * 255.0).ceil() as u8)
        .collect();
    save_png(&out.join("depth.png"), w, h, depth)?;
    save_png(&out.join("density.png"), w, h, density)?;
    std::fs::write(out.join("stats.txt"), stats_text(index, &counts))
        .with_context(|| format!("writing {}", out.join("stats.txt").display()))
}

fn save_png(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> anyhow::Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).context("image buffer size")?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn stats_text(index: &ProjectionIndex, counts: &[usize]) -> String {
    let (h, w) = index.resolution();
    let mut s = String::new();
    let _ = writeln!(s, "points {}", index.num_points());
    let _ = writeln!(s, "cells {}", index.num_cells());
    let _ = writeln!(s, "empty_cells {}", index.empty_cells());
    let _ = writeln!(s, "empty_ratio {:.6}", index.empty_cells() as f64 / (h * w) as f64);
    let _ = writeln!(s, "degenerate_points {}", index.degenerate_points());
    let _ = writeln!(s, "outside_fov_points {}", index.outside_fov_points());
    let _ = writeln!(s, "# row occupied_cells points");
    for (v, row) in counts.chunks(w).enumerate() {
        let occupied = row.iter().filter(|&&c| c > 0).count();
        let _ = writeln!(s, "row {v} {occupied} {}", row.iter().sum::<usize>());
    }
    s
}
