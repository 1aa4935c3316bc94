use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use rrpoll_core::poll::parse_poll;
use rrpoll_sim::spec::parse_spec;
use rrpoll_sim::{simulate, Execution};

/// Simulates a respondent population against a poll and writes a JSON report.
#[derive(Debug, Parser)]
#[command(name = "simulate", version)]
struct Args {
    /// Canonical poll JSON.
    #[arg(long)]
    poll: PathBuf,
    /// Simulation spec JSON (population, distributions, behavior mix).
    #[arg(long)]
    spec: PathBuf,
    /// Where to write the report.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run sessions on one thread.
    #[arg(long)]
    sequential: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let poll_text = std::fs::read_to_string(&args.poll).with_context(|| format!("reading {}", args.poll.display()))?;
    let poll = parse_poll(&poll_text)?;
    let spec_text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let mut spec = parse_spec(&spec_text).with_context(|| format!("loading {}", args.spec.display()))?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let report = simulate(&poll, &spec, exec)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&args.out, json).with_context(|| format!("writing {}", args.out.display()))?;
    print!("{}", report.summary());
    Ok(())
}
