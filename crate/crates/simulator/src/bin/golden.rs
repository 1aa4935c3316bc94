use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Parser;
use rrpoll_core::poll::parse_poll;
use rrpoll_sim::golden::{generate, verify, GoldenFile};

/// Exports (or checks) seeded reference vectors of the respondent engine.
#[derive(Debug, Parser)]
#[command(name = "golden", version)]
struct Args {
    /// Canonical poll JSON to generate vectors for.
    #[arg(long, required_unless_present = "verify")]
    poll: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    count: u64,
    /// Master seed the per-vector seeds derive from.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, required_unless_present = "verify")]
    out: Option<PathBuf>,
    /// Replay an existing vector file instead of generating one.
    #[arg(long, conflicts_with_all = ["poll", "out"])]
    verify: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    if let Some(path) = args.verify {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: GoldenFile = serde_json::from_str(&text)?;
        let bad = verify(&file)?;
        if !bad.is_empty() {
            bail!("{} of {} vectors differ: {:?}", bad.len(), file.vectors.len(), bad);
        }
        println!("{} vectors reproduced", file.vectors.len());
        return Ok(());
    }
    let (poll_path, out) = (args.poll.expect("required"), args.out.expect("required"));
    let text = std::fs::read_to_string(&poll_path).with_context(|| format!("reading {}", poll_path.display()))?;
    let file = generate(&parse_poll(&text)?, args.count, args.seed)?;
    let mut json = serde_json::to_string_pretty(&file)?;
    json.push('\n');
    std::fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} vectors to {}", file.vectors.len(), out.display());
    Ok(())
}
