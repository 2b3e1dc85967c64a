mod eval;
mod exit;
mod gradcheck;
mod info;
mod infer;
mod project;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rangeseg::model::ModelConfig;
use rangeseg::scan_io::{builtin_config, DatasetConfig};

use crate::exit::{Exit, INPUT};

#[derive(Parser)]
#[command(name = "rangeseg", version, about = "Range-image LiDAR segmentation toolkit")]
struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "RANGESEG_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a scan and write depth.png, density.png and stats.txt.
    Project(project::ProjectArgs),
    /// Run the network on one or more scans and write `.pred` files.
    Infer(infer::InferArgs),
    /// Score a directory of predictions against ground-truth labels.
    Eval(eval::EvalArgs),
    /// Finite-difference checks of every analytic backward pass.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Print the model layout and parameter counts.
    Info(info::InfoArgs),
}

/// Network configuration shared by `infer` and `info`.
#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Model config file (`key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset name, overriding the config.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Initialization seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig, Exit> {
        let mut cfg = match &self.config {
            Some(path) => {
                require_file(path)?;
                ModelConfig::load(path).map_err(|e| Exit::from_core(e, &format!("config {}", path.display())))?
            }
            None => ModelConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| Exit::from_core(e, "config"))?;
        Ok(cfg)
    }
}

/// Dataset from `--dataset`, else from `--config`, else SemanticKITTI.
pub fn dataset_from(dataset: Option<&str>, config: Option<&Path>) -> Result<DatasetConfig, Exit> {
    let name = match (dataset, config) {
        (Some(d), _) => d.to_string(),
        (None, Some(path)) => {
            require_file(path)?;
            ModelConfig::load(path)
                .map_err(|e| Exit::from_core(e, &format!("config {}", path.display())))?
                .dataset
        }
        (None, None) => "semantickitti".to_string(),
    };
    builtin_config(&name).map_err(|e| Exit::from_core(e, "dataset"))
}

pub fn require_file(path: &Path) -> Result<(), Exit> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Exit::new(INPUT, format!("{}: no such file", path.display())))
    }
}

pub fn require_dir(path: &Path) -> Result<(), Exit> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Exit::new(INPUT, format!("{}: no such directory", path.display())))
    }
}

pub fn create_out(path: &Path) -> Result<(), Exit> {
    std::fs::create_dir_all(path)
        .map_err(|e| Exit::new(INPUT, format!("cannot create {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Exit> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Exit::new(INPUT, format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Project(a) => project::run(&a),
        Command::Infer(a) => infer::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Info(a) => info::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
