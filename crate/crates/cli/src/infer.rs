use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rangeseg::model::weights::read_weights_file;
use rangeseg::model::Model;
use rangeseg::scan_io::{encode_labels, read_scan};

use crate::exit::{Exit, INPUT};
use crate::{create_out, require_file, ModelArgs};

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Scan files, or directories of `.bin`/`.xyzil`/`.txt` scans.
    #[arg(required = true)]
    pub scans: Vec<PathBuf>,
    /// Output directory for `<stem>.pred`.
    #[arg(long)]
    pub out: PathBuf,
    /// Weights file; without it the network is randomly initialized from the seed.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

pub fn scan_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Exit> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Exit::new(INPUT, format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("bin" | "xyzil" | "txt")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            require_file(p)?;
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn run(args: &InferArgs) -> Result<(), Exit> {
    let files = scan_files(&args.scans)?;
    let cfg = args.model.resolve()?;
    let model = match &args.weights {
        Some(path) => {
            require_file(path)?;
            let store = read_weights_file(path).with_context(|| format!("weights {}", path.display()))?;
            Model::new(&cfg, &store).with_context(|| format!("weights {} do not fit the config", path.display()))?
        }
        None => {
            eprintln!("note: no --weights given, using random initialization (seed {})", cfg.seed);
            Model::from_seed(&cfg, cfg.seed).context("initialization")?
        }
    };
    create_out(&args.out)?;
    for file in &files {
        let scan = read_scan(file).with_context(|| format!("reading {}", file.display()))?;
        let out = model.forward(&scan).with_context(|| format!("forward on {}", file.display()))?;
        let target = args.out.join(format!("{}.pred", stem(file)));
        std::fs::write(&target, encode_labels(&out.labels))
            .with_context(|| format!("writing {}", target.display()))?;
        println!(
            "{}: {} points -> {} ({:.2}s)",
            file.display(),
            out.labels.len(),
            target.display(),
            out.diagnostics.elapsed.as_secs_f64()
        );
    }
    Ok(())
}
