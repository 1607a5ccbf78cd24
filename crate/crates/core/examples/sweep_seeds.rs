//! The same config over several seeds, plus a mean and std summary.

use trend_lab::runner::{sweep, summarize, Mode, RunConfig};

fn main() -> trend_lab::Result<()> {
    let mut cfg = RunConfig::from_toml(include_str!("configs/quick.toml"))?;
    for mode in [Mode::Trend, Mode::Pebble] {
        cfg.run.mode = mode;
        let runs = sweep(&cfg, &[0, 1, 2], 1)?;
        println!("{}:\n{}", mode.name(), summarize(&runs)?);
    }
    Ok(())
}
