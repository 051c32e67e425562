//! Loads a JSON run configuration, applies command-line style overrides,
//! and prints the effective settings.

use clap::Parser;
use cuboidnet::cli::{Overrides, RunConfigFile};

#[derive(Parser)]
struct Args {
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> cuboidnet::Result<()> {
    let mut cfg = RunConfigFile::parse(r#"{"network": {"resdb_count": 5}, "train": {"batch_size": 4}, "seed": 3}"#)?;
    let args = Args::parse_from(["run_config", "--network.resdb_count", "3", "--train.lr0", "2e-4"]);
    args.overrides.apply(&mut cfg);
    println!("{}", cfg.to_json());
    println!("effective seed {}", cfg.effective_train().seed);
    assert!(RunConfigFile::parse(r#"{"network": {"resdb_cuont": 5}}"#).is_err());
    Ok(())
}
