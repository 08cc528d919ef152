//! Scores an untrained and a briefly trained model on the same videos, showing
//! video-level and per-frame foreground ARI.

use objtok::config::RunConfig;
use objtok::experiment::{evaluate, report_csv, synthetic_splits};
use objtok::trainer::{prepare_videos, run_training, Trainer};

fn main() -> objtok::Result<()> {
    let mut config = RunConfig::default();
    config.model.width_multiplier = 0.125;
    config.model.gru_hidden = 16;
    config.model.d_inp = 16;
    config.model.d_slot = 32;
    config.model.decoder_hidden = 32;
    config.model.d_vq = 16;
    config.model.vq_hidden = 8;
    config.train.steps = 50;
    config.train.batch_size = 2;
    config.schedule.warmup_steps = 10;

    let (train, test) = synthetic_splits(&config, 16, 4)?;
    let mut trainer = Trainer::new(&config)?;
    println!("untrained:\n{}", report_csv(&evaluate(&trainer.model, &test, false)?));
    run_training(&mut trainer, &prepare_videos(&train, &config)?, None)?;
    println!(
        "after {} steps:\n{}",
        trainer.step(),
        report_csv(&evaluate(&trainer.model, &test, false)?)
    );
    Ok(())
}
