//! Independent runs over several seeds.

use std::path::Path;

use crate::error::{Error, Result};
use crate::runner::config::RunConfig;
use crate::runner::metrics::{summarize, MetricsRow};
use crate::runner::run::run_experiment;

/// Runs `cfg` once per seed with at most `jobs` runs in flight. Results are
/// in seed order and do not depend on `jobs`.
pub fn sweep(cfg: &RunConfig, seeds: &[u64], jobs: usize) -> Result<Vec<Vec<MetricsRow>>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<Vec<MetricsRow>>>> = (0..seeds.len()).map(|_| None).collect();
    for (chunk_seeds, chunk_out) in seeds.chunks(jobs).zip(results.chunks_mut(jobs)) {
        std::thread::scope(|scope| {
            for (&seed, slot) in chunk_seeds.iter().zip(chunk_out.iter_mut()) {
                scope.spawn(move || {
                    let mut c = cfg.clone();
                    c.run.seed = seed;
                    *slot = Some(run_experiment(&c).map(|o| o.rows));
                });
            }
        });
    }
    results.into_iter().map(|r| r.expect("every run finished")).collect()
}

/// [`sweep`] plus `seed_<n>.csv` per run and `summary.csv` in `out`.
pub fn sweep_to_dir(cfg: &RunConfig, seeds: &[u64], jobs: usize, out: &Path) -> Result<Vec<Vec<MetricsRow>>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let runs = sweep(cfg, seeds, jobs)?;
    for (seed, rows) in seeds.iter().zip(&runs) {
        let p = out.join(format!("seed_{seed}.csv"));
        std::fs::write(&p, crate::runner::metrics::render_csv(rows)).map_err(|e| Error::io(&p, e))?;
    }
    let p = out.join("summary.csv");
    std::fs::write(&p, summarize(&runs)?).map_err(|e| Error::io(&p, e))?;
    Ok(runs)
}

/// Parses `1,2,5` or `0..5` (exclusive end).
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seed list `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("1,2, 5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("a").is_err());
    }
}
