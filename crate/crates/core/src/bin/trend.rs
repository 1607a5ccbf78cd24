use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use trend_lab::annotate::{generate_vlm_fixture, reference_pair_stream, render_fixture, write_fixture};
use trend_lab::demos::generate_demos;
use trend_lab::envs::EnvKind;
use trend_lab::runner::{parse_seeds, run_to_dir, sweep_to_dir, RunConfig};
use trend_lab::Error;

#[derive(Parser)]
#[command(name = "trend", version, about = "Noise-robust preference-based RL on toy control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expert demonstrations.
    Demos {
        #[command(subcommand)]
        action: DemosCommand,
    },
    /// Independent runs over several seeds plus a mean/std summary.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma list (`0,1,2`) or range (`0..5`).
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        /// Concurrent runs; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Test fixtures.
    Fixture {
        #[command(subcommand)]
        action: FixtureCommand,
    },
}

#[derive(Subcommand)]
enum DemosCommand {
    Generate {
        #[arg(long)]
        env: EnvKind,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=3))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Mock-VLM answers that disagree with the scripted oracle at a set rate.
    GenVlm {
        #[arg(long)]
        noise_rate: f64,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 0.0)]
        skip_rate: f64,
        #[arg(long, default_value = "point_reach")]
        env: EnvKind,
        #[arg(long, default_value_t = 50)]
        segment_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> trend_lab::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let output = run_to_dir(&cfg, &out)?;
            println!("final success {:.3}; wrote {}", output.final_success(), out.join("metrics.csv").display());
        }
        Command::Demos {
            action: DemosCommand::Generate { env, n, seed, out },
        } => {
            let demos = generate_demos(env, n as usize, seed)?;
            demos.save(&out)?;
            println!("wrote {} demonstrations ({} steps) to {}", demos.len(), demos.num_steps(), out.display());
        }
        Command::Sweep { config, seeds, out, jobs } => {
            let cfg = RunConfig::load(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let runs = sweep_to_dir(&cfg, &seeds, jobs, &out)?;
            for (s, rows) in seeds.iter().zip(&runs) {
                let last = rows.last().map_or(0.0, |r| r.success_rate);
                println!("seed {s}: final success {last:.3}");
            }
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::Fixture {
            action:
                FixtureCommand::GenVlm {
                    noise_rate,
                    pairs,
                    skip_rate,
                    env,
                    segment_len,
                    seed,
                    out,
                },
        } => {
            let stream = reference_pair_stream(env, pairs, segment_len, seed)?;
            let records = generate_vlm_fixture(&stream, noise_rate, skip_rate, 1e-9, seed)?;
            match out {
                Some(path) => write_fixture(&path, &records)?,
                None => print!("{}", render_fixture(&records)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
