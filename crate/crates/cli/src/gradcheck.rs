use clap::Args;
use rangeseg::gradcheck::{run_block, BLOCKS, TOLERANCE};

use crate::exit::{Exit, CHECK_FAILED, INPUT};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient of one block (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

pub fn run(args: &GradcheckArgs) -> Result<(), Exit> {
    if let Some(name) = &args.corrupt {
        if !BLOCKS.contains(&name.as_str()) {
            return Err(Exit::new(INPUT, format!("unknown block `{name}`")));
        }
    }
    let mut failing = Vec::new();
    println!("{:<18} {:>12} {:>8}  result", "block", "max_rel_err", "checked");
    for &name in &BLOCKS {
        let corrupt = args.corrupt.as_deref() == Some(name);
        let report = run_block(name, args.seed, corrupt).map_err(|e| Exit::from_core(e, name))?;
        let ok = report.passes(TOLERANCE);
        println!(
            "{name:<18} {:>12.3e} {:>8}  {}",
            report.max_rel_error,
            report.checked,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failing.push(name);
        }
    }
    if failing.is_empty() {
        println!("all {} blocks below {TOLERANCE:e}", BLOCKS.len());
        Ok(())
    } else {
        Err(Exit::new(
            CHECK_FAILED,
            format!("gradient check failed for {}", failing.join(", ")),
        ))
    }
}
