//! Trains the motion-guided perceiver + VQ model on freshly generated sprite
//! videos and reports foreground ARI on a held-out split.
//!
//! ```text
//! cargo run --release --example train_motion_vq -- --steps 500 --train 64 --test 16
//! ```

use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;
use objtok::config::RunConfig;
use objtok::experiment::{run_experiment, synthetic_splits};

#[derive(Parser)]
struct Args {
    /// Optional run config; defaults to the built-in one.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    steps: u64,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train without motion supervision.
    #[arg(long)]
    no_motion: bool,
}

fn main() -> objtok::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.seed = args.seed;
    config.train.steps = args.steps;
    config.loss.motion = !args.no_motion;
    config.validate()?;

    let (train, test) = synthetic_splits(&config, args.train, args.test)?;
    let start = Instant::now();
    let result = run_experiment(&train, &test, &config)?;
    let secs = start.elapsed().as_secs_f64();
    if let Some(last) = result.losses.last() {
        println!(
            "final loss {:.4} (motion {:.4}, recon {:.4})",
            last.total, last.motion, last.recon
        );
    }
    println!(
        "{} steps in {secs:.1}s ({:.1} ms/step)",
        args.steps,
        1000.0 * secs / args.steps.max(1) as f64
    );
    println!(
        "fg_ari {:.4}  per-frame {:.4}",
        result.summary.fg_ari, result.summary.per_frame_fg_ari
    );
    if let Some(p) = result.summary.purity {
        println!("token purity {p:.4}");
    }
    Ok(())
}
