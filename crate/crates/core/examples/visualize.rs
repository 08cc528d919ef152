//! Writes slot, token, and reconstruction panels for two generated videos.
//!
//! ```text
//! cargo run --example visualize -- /tmp/panels
//! ```

use objtok::config::RunConfig;
use objtok::experiment::{emit_visuals, synthetic_splits};
use objtok::trainer::Trainer;

fn main() -> objtok::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "panels".into());
    let mut config = RunConfig::default();
    config.model.width_multiplier = 0.125;
    config.model.gru_hidden = 16;
    config.model.d_inp = 16;
    let (_, test) = synthetic_splits(&config, 0, 2)?;
    let trainer = Trainer::new(&config)?;
    for (id, sample) in &test {
        let path = emit_visuals(&trainer.model, id, sample, &config, out.as_ref())?;
        println!("{}", path.display());
    }
    Ok(())
}
