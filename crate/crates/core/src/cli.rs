//! Command-line interface: `generate | train | eval | ablate | visualize`.
//!
//! Exit codes: 0 success, 2 usage, 3 validation (config, data, checkpoint
//! format), 4 runtime. Errors print one `error: ...` line to stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{substream_seed, RunConfig};
use crate::dataset::{read_dataset, read_dataset_with_ids, write_dataset};
use crate::error::{Error, Result};
use crate::experiment::{
    emit_visuals, evaluate, holdout_split, report_csv, run_ablation, summarize, write_ablation, AblationGrid,
};
use crate::synthdata::generate_dataset;
use crate::trainer::{checkpoint_dir, prepare_videos, run_training, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "objtok",
    version,
    about = "Motion-guided slot attention with token reconstruction spaces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sprite dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints and a metrics stream.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a CSV report.
    Eval(EvalArgs),
    /// Sweep decoders, reconstruction spaces, and motion supervision.
    Ablate(AblateArgs),
    /// Write slot, token, and reconstruction panels.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Run config; its [scene] section controls the videos.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_videos: usize,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace an existing dataset at --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; defaults to train.data_root from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from <out>/checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Runs in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Render at most this many videos.
    #[arg(long)]
    pub limit: Option<usize>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Format(_) | Error::Shape(_) => EXIT_VALIDATION,
        Error::Numerical(_) | Error::Diverged { .. } | Error::Tensor(_) | Error::Io(_) => EXIT_RUNTIME,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn is_empty_dir(path: &Path) -> Result<bool> {
    Ok(!path.exists() || fs::read_dir(path)?.next().is_none())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if !is_empty_dir(&a.out)? {
        if !a.force {
            return Err(Error::config(
                "out",
                format!("{} is not empty; pass --force to replace it", a.out.display()),
            ));
        }
        if !a.out.join("manifest.txt").is_file() {
            return Err(Error::config(
                "out",
                format!("{} does not hold a dataset; refusing to replace it", a.out.display()),
            ));
        }
        fs::remove_dir_all(&a.out)?;
    }
    let mut scene = config.scene.clone();
    scene.seed = substream_seed(config.seed, "data");
    let samples = generate_dataset(&scene, a.num_videos)?;
    write_dataset(&samples, &a.out)?;
    println!("wrote {} videos to {}", samples.len(), a.out.display());
    Ok(())
}

/// Configs that differ only in the step budget describe the same run.
fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.train.steps = 0;
    b.train.steps = 0;
    a == b
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut trainer = if a.resume {
        let mut t = Trainer::load_checkpoint(&checkpoint_dir(&a.out))?;
        if let Some(path) = &a.config {
            let mut given = RunConfig::load(path)?;
            if let Some(seed) = a.seed {
                given.seed = seed;
            }
            if !same_run(&given, &t.config) {
                return Err(Error::config("config", "does not match the checkpoint being resumed"));
            }
            t.config.train.steps = given.train.steps;
        }
        t
    } else {
        let mut config = load_config(a.config.as_deref())?;
        if let Some(seed) = a.seed {
            config.seed = seed;
        }
        Trainer::new(&config)?
    };
    if let Some(steps) = a.steps {
        trainer.config.train.steps = steps;
    }
    let data = a
        .data
        .clone()
        .or_else(|| trainer.config.train.data_root.clone())
        .ok_or_else(|| Error::config("train.data_root", "no dataset given; pass --data"))?;
    let samples = read_dataset(&data)?;
    if samples.is_empty() {
        return Err(Error::config("data", format!("{} holds no videos", data.display())));
    }
    let videos = prepare_videos(&samples, &trainer.config)?;
    let bundles = run_training(&mut trainer, &videos, Some(&a.out))?;
    match bundles.last() {
        Some(b) => println!("trained to step {}; final loss {}", trainer.step(), b.total),
        None => println!("checkpoint at step {}", trainer.step()),
    }
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<Trainer> {
    let dir = if path.join("manifest.txt").is_file() {
        path.to_path_buf()
    } else {
        checkpoint_dir(path)
    };
    Trainer::load_checkpoint(&dir)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let trainer = open_checkpoint(&a.checkpoint)?;
    let videos = read_dataset_with_ids(&a.data)?;
    prepare_videos(
        &videos.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
        &trainer.config,
    )?;
    let records = evaluate(&trainer.model, &videos, trainer.config.eval.area_filter)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.report, report_csv(&records))?;
    let s = summarize(&records);
    println!(
        "{} videos: fg_ari {:.4}, per-frame {:.4}",
        records.len(),
        s.fg_ari,
        s.per_frame_fg_ari
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let text = fs::read_to_string(&a.grid).map_err(|e| Error::config("grid", format!("{}: {e}", a.grid.display())))?;
    let grid = AblationGrid::from_toml_str(&text)?;
    let (train, test) = holdout_split(read_dataset_with_ids(&a.data)?, grid.test_fraction)?;
    prepare_videos(&train, &grid.base)?;
    let rows = run_ablation(&grid, &train, &test, a.workers.max(1));
    write_ablation(&rows, &a.out)?;
    print!("{}", crate::experiment::ablation_markdown(&rows));
    Ok(())
}

fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let trainer = open_checkpoint(&a.checkpoint)?;
    let videos = read_dataset_with_ids(&a.data)?;
    let limit = a.limit.unwrap_or(videos.len());
    for (id, sample) in videos.iter().take(limit) {
        let path = emit_visuals(&trainer.model, id, sample, &trainer.config, &a.out)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Visualize(a) => cmd_visualize(a),
    }
}

/// Parses `args` (including the program name), runs the command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["objtok"]), EXIT_USAGE);
        assert_eq!(run(["objtok", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["objtok", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["objtok", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::config("x", "y")), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_VALIDATION);
        assert_eq!(
            exit_code(&Error::Diverged {
                step: 3,
                detail: "x".into()
            }),
            EXIT_RUNTIME
        );
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_RUNTIME);
    }

    #[test]
    fn resume_compatibility_ignores_step_budget() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.steps = 99;
        assert!(same_run(&a, &b));
        b.seed = 4;
        assert!(!same_run(&a, &b));
    }
}
