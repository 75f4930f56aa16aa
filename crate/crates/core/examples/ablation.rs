//! Runs the data-integration ablation end to end through the same steps as the
//! command line: generate, train each variant, evaluate, compare.
//!
//! cargo run --release --example ablation -- [STEPS] [OUT_DIR]

use std::path::PathBuf;

use xling::cli::{cmd_compare, cmd_eval, cmd_gen, cmd_train, EvalTarget};
use xling::experiment::ExperimentConfig;
use xling::Variant;

fn main() -> xling::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(1000, |s| s.parse().expect("steps"));
    let root = args.next().map_or_else(|| std::env::temp_dir().join("xling_ablation"), PathBuf::from);

    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = steps;
    cfg.seeds = vec![1];
    let variants = [Variant::ESep, Variant::EPostMt, Variant::EPreMt, Variant::ECross];

    let data = root.join("data");
    let runs = root.join("runs");
    cmd_gen(&cfg, &data, true)?;
    cmd_train(&cfg, &data, &runs, &variants, true)?;
    cmd_eval(&cfg, &data, &runs, EvalTarget::Runs(variants.to_vec()), None)?;
    let table = cmd_compare(&runs, Some(&variants), None)?;
    print!("{}", table.render());
    for w in &table.warnings {
        println!("warning: {w}");
    }
    println!("tables written under {}", runs.display());
    Ok(())
}
