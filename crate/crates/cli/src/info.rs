use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use rangeseg::model::weights::{read_weights_file, write_weights_file};
use rangeseg::model::{init_params, Model, ModelParams};
use rangeseg::params::{ParamSet, ParamStore};

use crate::exit::Exit;
use crate::{create_out, require_file, ModelArgs};

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Check that this weights file fits the config.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Write `config.txt` and freshly initialized `weights.dagw` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &InfoArgs) -> Result<(), Exit> {
    let cfg = args.model.resolve()?;
    if let Some(path) = &args.weights {
        require_file(path)?;
    }
    let dataset = cfg.dataset_config().context("dataset")?;
    let params = ModelParams::<f32>::new(&cfg).context("config")?;

    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    params.visit("", &mut |name, kind, t| {
        let group = name.split('.').next().unwrap_or(name).to_string();
        let entry = groups.entry(group).or_default();
        entry.1 += t.len();
        if kind.is_learnable() {
            entry.0 += t.len();
        }
    });
    print!("{}", cfg.to_text());
    println!(
        "range image {}x{}, fov [{:.1}, {:.1}] deg, {} classes",
        dataset.num_beams,
        dataset.width,
        dataset.fov_down.to_degrees(),
        dataset.fov_up.to_degrees(),
        dataset.num_classes
    );
    println!("{:<10} {:>12} {:>12}", "group", "learnable", "stored");
    let (mut learnable, mut stored) = (0, 0);
    for (g, (l, s)) in &groups {
        println!("{g:<10} {l:>12} {s:>12}");
        learnable += l;
        stored += s;
    }
    println!("{:<10} {learnable:>12} {stored:>12}", "total");

    if let Some(path) = &args.weights {
        let store = read_weights_file(path).with_context(|| format!("weights {}", path.display()))?;
        Model::new(&cfg, &store).with_context(|| format!("weights {} do not fit the config", path.display()))?;
        println!("{}: {} tensors, fits the config", path.display(), store.len());
    }
    if let Some(out) = &args.out {
        create_out(out)?;
        let store: ParamStore = init_params(&cfg, cfg.seed).context("initialization")?;
        write_weights_file(&store, &out.join("weights.dagw")).context("writing weights.dagw")?;
        std::fs::write(out.join("config.txt"), cfg.to_text())
            .map_err(|e| Exit::new(crate::exit::INPUT, format!("writing config.txt: {e}")))?;
        println!("wrote {} and config.txt (seed {})", out.join("weights.dagw").display(), cfg.seed);
    }
    Ok(())
}
