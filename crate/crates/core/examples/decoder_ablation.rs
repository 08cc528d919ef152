//! A small decoder x motion sweep on generated sprites, printed as a markdown
//! table. Scale `--steps` up for meaningful differences.
//!
//! ```text
//! cargo run --release --example decoder_ablation -- --steps 300 --workers 2
//! ```

use clap::Parser;
use objtok::config::RunConfig;
use objtok::decoders::DecoderKind;
use objtok::experiment::{ablation_markdown, run_ablation, synthetic_splits, AblationGrid};
use objtok::reconspace::ReconSpace;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long, default_value_t = 48)]
    train: usize,
    #[arg(long, default_value_t = 12)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn main() -> objtok::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let mut base = RunConfig::default();
    base.model.width_multiplier = 0.125;
    base.model.gru_hidden = 16;
    base.model.d_inp = 16;
    base.model.d_slot = 32;
    base.model.decoder_hidden = 32;
    base.model.heads = 2;
    base.model.d_vq = 16;
    base.model.vq_hidden = 8;
    base.model.codebook_size = 16;
    base.train.steps = args.steps;
    base.train.batch_size = 2;
    base.train.clip_length = 8;
    base.schedule.warmup_steps = (args.steps / 10).max(1);

    let grid = AblationGrid {
        decoders: DecoderKind::ALL.to_vec(),
        spaces: vec![ReconSpace::Vq],
        motion: vec![true, false],
        seeds: vec![0],
        base,
        ..Default::default()
    };
    grid.validate()?;
    let (train, test) = synthetic_splits(&grid.base, args.train, args.test)?;
    let rows = run_ablation(&grid, &train, &test, args.workers);
    print!("{}", ablation_markdown(&rows));
    Ok(())
}
