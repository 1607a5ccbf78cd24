//! Run one experiment from a TOML config and print its metrics.
//!
//! cargo run --release --example run_config -- crates/core/examples/configs/quick.toml

use std::path::PathBuf;
use trend_lab::runner::{run_experiment, RunConfig, CSV_HEADER};

fn main() -> trend_lab::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/quick.toml"));
    let cfg = RunConfig::load(&path)?;
    let out = run_experiment(&cfg)?;
    println!("{CSV_HEADER}");
    for row in &out.rows {
        println!("{}", row.to_csv_line());
    }
    println!("{} labelled pairs, final success {:.2}", out.preferences.len(), out.final_success());
    Ok(())
}
