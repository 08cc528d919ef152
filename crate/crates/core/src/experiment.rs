//! Training-plus-evaluation runs, evaluation reports, and ablation sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDE;
use crate::config::{substream_seed, RunConfig};
use crate::decoders::DecoderKind;
use crate::error::{Error, Result};
use crate::metrics::{downsample_labels, extract_slot_masks, fg_ari, mean, per_frame_fg_ari, std_dev, token_purity};
use crate::model::{Model, PreparedVideo};
use crate::reconspace::ReconSpace;
use crate::synthdata::{generate_dataset, VideoSample};
use crate::trainer::{learning_rate, metrics_line, prepare_videos, run_training, LossBundle, Trainer, TRAIN_DTYPE};
use crate::visuals::{write_panel, PanelInputs};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub video_id: String,
    pub fg_ari: f64,
    pub per_frame_fg_ari: f64,
    /// Token purity against sprite-kind labels; VQ spaces only.
    pub purity: Option<f64>,
}

/// Ground-truth instance ids at feature resolution, T x h x w.
pub fn ground_truth_labels(sample: &VideoSample) -> Result<Array3<u32>> {
    downsample_labels(sample.instance_masks.view(), STRIDE)
}

/// Scores a predicted segmentation (T x h x w slot ids) against the sample.
pub fn score_prediction(pred: &Array3<u32>, sample: &VideoSample, area_filter: bool) -> Result<(f64, f64)> {
    let gt = ground_truth_labels(sample)?;
    Ok((
        fg_ari(pred.view(), gt.view(), area_filter)?,
        per_frame_fg_ari(pred.view(), gt.view(), area_filter)?,
    ))
}

/// Runs the model over the whole video and scores it.
pub fn evaluate_video(model: &Model, video_id: &str, sample: &VideoSample, area_filter: bool) -> Result<EvalRecord> {
    let prepared = PreparedVideo::new(sample, model.config.space)?;
    let attn = model.infer_video(&prepared, TRAIN_DTYPE)?;
    let pred = extract_slot_masks(&attn, model.config.grid())?;
    let (fg, per_frame) = score_prediction(&pred, sample, area_filter)?;
    let purity = if model.config.space.is_vq() {
        let tokens = model.token_assignments(&prepared, TRAIN_DTYPE)?;
        let labels: Vec<_> = (0..sample.num_frames()).map(|t| sample.semantic_labels(t)).collect();
        Some(token_purity(&tokens, &labels)?)
    } else {
        None
    };
    Ok(EvalRecord {
        video_id: video_id.to_string(),
        fg_ari: fg,
        per_frame_fg_ari: per_frame,
        purity,
    })
}

pub fn evaluate(model: &Model, videos: &[(String, VideoSample)], area_filter: bool) -> Result<Vec<EvalRecord>> {
    if videos.is_empty() {
        return Err(Error::config("data", "evaluation set is empty"));
    }
    videos
        .iter()
        .map(|(id, s)| evaluate_video(model, id, s, area_filter))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub fg_ari: f64,
    pub per_frame_fg_ari: f64,
    pub purity: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Summary {
    let fg: Vec<f64> = records.iter().map(|r| r.fg_ari).collect();
    let pf: Vec<f64> = records.iter().map(|r| r.per_frame_fg_ari).collect();
    let purity: Option<Vec<f64>> = records.iter().map(|r| r.purity).collect();
    Summary {
        fg_ari: mean(&fg),
        per_frame_fg_ari: mean(&pf),
        purity: purity.map(|p| mean(&p)),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

/// CSV with one row per video and a final `mean` row.
pub fn report_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("video_id,fg_ari,per_frame_fg_ari,purity\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.video_id,
            r.fg_ari,
            r.per_frame_fg_ari,
            opt(r.purity)
        );
    }
    let s = summarize(records);
    let _ = writeln!(out, "mean,{},{},{}", s.fg_ari, s.per_frame_fg_ari, opt(s.purity));
    out
}

/// Writes the visualization panel of one video.
pub fn emit_visuals(
    model: &Model,
    video_id: &str,
    sample: &VideoSample,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<std::path::PathBuf> {
    let prepared = PreparedVideo::new(sample, model.config.space)?;
    let attn = model.infer_video(&prepared, TRAIN_DTYPE)?;
    let masks = extract_slot_masks(&attn, model.config.grid())?;
    let tokens = if model.config.space.is_vq() {
        Some(model.token_assignments(&prepared, TRAIN_DTYPE)?)
    } else {
        None
    };
    let recon = model.reconstruct(&prepared, TRAIN_DTYPE)?;
    let inputs = PanelInputs {
        frames: &sample.frames,
        slot_masks: &masks,
        num_slots: model.config.num_slots,
        tokens: tokens.as_deref(),
        reconstruction: Some((&recon, model.config.space)),
        top_k: config.eval.top_k,
        max_mask_fraction: config.eval.max_mask_fraction,
    };
    write_panel(&inputs, out_dir, video_id)
}

pub struct ExperimentResult {
    pub losses: Vec<LossBundle>,
    /// The metrics stream, one line per step.
    pub metrics: Vec<String>,
    pub records: Vec<EvalRecord>,
    pub summary: Summary,
}

/// Trains a fresh model on `train` for `config.train.steps` steps and
/// evaluates it on `test`.
pub fn run_experiment(
    train: &[VideoSample],
    test: &[(String, VideoSample)],
    config: &RunConfig,
) -> Result<ExperimentResult> {
    let videos = prepare_videos(train, config)?;
    let mut trainer = Trainer::new(config)?;
    let losses = run_training(&mut trainer, &videos, None)?;
    let metrics = losses
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let step = i as u64 + 1;
            metrics_line(step, b, learning_rate(&config.schedule, step))
        })
        .collect();
    let records = evaluate(&trainer.model, test, config.eval.area_filter)?;
    let summary = summarize(&records);
    Ok(ExperimentResult {
        losses,
        metrics,
        records,
        summary,
    })
}

/// A sweep over decoders x spaces x motion supervision, each cell trained
/// once per seed from the same base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub decoders: Vec<DecoderKind>,
    pub spaces: Vec<ReconSpace>,
    pub motion: Vec<bool>,
    pub seeds: Vec<u64>,
    /// Trailing fraction of the dataset held out for evaluation.
    pub test_fraction: f64,
    pub base: RunConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            decoders: vec![DecoderKind::Perceiver],
            spaces: vec![ReconSpace::Vq],
            motion: vec![true],
            seeds: vec![0],
            test_fraction: 0.2,
            base: RunConfig::default(),
        }
    }
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("grid", e.message().to_string()))?;
        // Validate the base configuration with the same key-naming errors as a run config.
        let base = match table.remove("base") {
            Some(toml::Value::Table(t)) => RunConfig::from_toml_str(&toml::to_string(&t).expect("table serializes"))?,
            Some(_) => return Err(Error::config("base", "must be a table")),
            None => RunConfig::default(),
        };
        for (key, allowed) in [
            ("decoders", &["linear", "cnn", "transformer", "perceiver"][..]),
            ("spaces", &["rgb", "flow", "depth", "flow_depth", "vq", "vq_flow"][..]),
        ] {
            if let Some(v) = table.get(key) {
                let ok = v
                    .as_array()
                    .is_some_and(|a| a.iter().all(|x| x.as_str().is_some_and(|s| allowed.contains(&s))));
                if !ok {
                    return Err(Error::config(
                        key,
                        format!("invalid value {v}, expected a list of {}", allowed.join(", ")),
                    ));
                }
            }
        }
        let mut grid: AblationGrid = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("grid", e.message().to_string()))?;
        grid.base = base;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, empty) in [
            ("decoders", self.decoders.is_empty()),
            ("spaces", self.spaces.is_empty()),
            ("motion", self.motion.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "must list at least one value"));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// All cells in a fixed order: motion, then space, then decoder.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &motion in &self.motion {
            for &space in &self.spaces {
                for &decoder in &self.decoders {
                    out.push(AblationCell { motion, space, decoder });
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &AblationCell, seed: u64) -> RunConfig {
        let mut c = self.base.clone();
        c.seed = seed;
        c.model.decoder = cell.decoder;
        c.model.space = cell.space;
        c.loss.motion = cell.motion;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub motion: bool,
    pub space: ReconSpace,
    pub decoder: DecoderKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// Per-seed summaries of the runs that finished.
    pub runs: Vec<Summary>,
    /// Errors of the runs that failed, as `seed: message`.
    pub failures: Vec<String>,
}

impl AblationRow {
    pub fn fg_ari(&self) -> (f64, f64) {
        let v: Vec<f64> = self.runs.iter().map(|s| s.fg_ari).collect();
        (mean(&v), std_dev(&v))
    }

    pub fn purity(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.runs.iter().map(|s| s.purity).collect();
        v.filter(|v| !v.is_empty()).map(|v| (mean(&v), std_dev(&v)))
    }
}

/// Training videos and named held-out videos.
pub type Split = (Vec<VideoSample>, Vec<(String, VideoSample)>);

/// Splits a dataset into train and held-out test videos (the trailing fraction).
pub fn holdout_split(videos: Vec<(String, VideoSample)>, test_fraction: f64) -> Result<Split> {
    let n = videos.len();
    let n_test = ((n as f64) * test_fraction).ceil() as usize;
    if n < 2 || n_test == 0 || n_test >= n {
        return Err(Error::config(
            "data",
            format!("{n} videos cannot be split into train and test"),
        ));
    }
    let mut train = videos;
    let test = train.split_off(n - n_test);
    Ok((train.into_iter().map(|(_, v)| v).collect(), test))
}

/// Runs every cell and seed; a failing run is recorded and the sweep continues.
pub fn run_ablation(
    grid: &AblationGrid,
    train: &[VideoSample],
    test: &[(String, VideoSample)],
    workers: usize,
) -> Vec<AblationRow> {
    let jobs: Vec<(usize, AblationCell, u64)> = grid
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| grid.seeds.iter().map(move |&s| (i, c, s)))
        .collect();
    let run = |&(_, cell, seed): &(usize, AblationCell, u64)| {
        log::info!("ablation cell {cell:?} seed {seed}");
        run_experiment(train, test, &grid.cell_config(&cell, seed)).map(|r| r.summary)
    };
    let results: Vec<Result<Summary>> = if workers <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let chunk = jobs.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|c| scope.spawn(move || c.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("ablation worker panicked"))
                .collect()
        })
    };
    let mut rows: Vec<AblationRow> = grid
        .cells()
        .into_iter()
        .map(|cell| AblationRow {
            cell,
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for ((i, _, seed), r) in jobs.iter().zip(results) {
        match r {
            Ok(s) => rows[*i].runs.push(s),
            Err(e) => {
                log::error!("ablation run failed (seed {seed}): {e}");
                rows[*i].failures.push(format!("{seed}: {e}"));
            }
        }
    }
    rows
}

fn pm(v: Option<(f64, f64)>) -> String {
    match v {
        Some((m, s)) if m.is_finite() => format!("{m:.3} ± {s:.3}"),
        _ => "-".to_string(),
    }
}

/// Markdown table with Motion / Space / Decoder columns.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Motion | Space | Decoder | FG-ARI | Purity | Runs |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {}/{} |",
            if r.cell.motion { "✓" } else { "✗" },
            r.cell.space,
            r.cell.decoder,
            pm(Some(r.fg_ari())),
            pm(r.purity()),
            r.runs.len(),
            r.runs.len() + r.failures.len(),
        );
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("motion,space,decoder,runs,failures,fg_ari_mean,fg_ari_std,purity_mean,purity_std\n");
    for r in rows {
        let (fm, fs) = r.fg_ari();
        let (pm_, ps) = r.purity().map_or((f64::NAN, f64::NAN), |p| p);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{fm},{fs},{pm_},{ps}",
            r.cell.motion,
            r.cell.space,
            r.cell.decoder,
            r.runs.len(),
            r.failures.len()
        );
    }
    out
}

/// Writes `ablation.md` and `ablation.csv` into `out`.
pub fn write_ablation(rows: &[AblationRow], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.md"), ablation_markdown(rows))?;
    fs::write(out.join("ablation.csv"), ablation_csv(rows))?;
    Ok(())
}

/// Generates a train and a test split from the run config's scene settings,
/// seeded from the run seed's `data` stream.
pub fn synthetic_splits(config: &RunConfig, num_train: usize, num_test: usize) -> Result<Split> {
    let mut scene = config.scene.clone();
    scene.seed = substream_seed(config.seed, "data");
    let all = generate_dataset(&scene, num_train + num_test)?;
    let mut train = all;
    let test = train.split_off(num_train);
    let test = test
        .into_iter()
        .enumerate()
        .map(|(i, v)| (crate::dataset::video_id(num_train + i), v))
        .collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthdata::SceneConfig;

    fn tiny() -> RunConfig {
        let mut c = RunConfig {
            model: ModelConfig {
                image_height: 16,
                image_width: 16,
                num_slots: 3,
                d_slot: 8,
                width_multiplier: 0.125,
                gru_hidden: 8,
                d_inp: 8,
                decoder_hidden: 8,
                heads: 2,
                codebook_size: 6,
                d_vq: 8,
                vq_hidden: 4,
                head_hidden: 4,
                ..Default::default()
            },
            scene: SceneConfig {
                height: 16,
                width: 16,
                frames: 4,
                min_radius: 2.0,
                max_radius: 3.0,
                ..Default::default()
            },
            ..Default::default()
        };
        c.train.batch_size = 2;
        c.train.clip_length = 3;
        c.train.steps = 3;
        c
    }

    #[test]
    fn ground_truth_as_prediction_scores_one() {
        let c = tiny();
        let (_, test) = synthetic_splits(&c, 0, 3).unwrap();
        for (_, s) in &test {
            let gt = ground_truth_labels(s).unwrap();
            let (fg, pf) = score_prediction(&gt, s, false).unwrap();
            assert_eq!((fg, pf), (1.0, 1.0));
        }
    }

    #[test]
    fn experiment_runs_end_to_end() {
        let c = tiny();
        let (train, test) = synthetic_splits(&c, 3, 2).unwrap();
        let r = run_experiment(&train, &test, &c).unwrap();
        assert_eq!(r.losses.len(), 3);
        assert_eq!(r.metrics.len(), 3);
        assert_eq!(r.records.len(), 2);
        assert!(r.summary.purity.is_some());
        let csv = report_csv(&r.records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "video_id,fg_ari,per_frame_fg_ari,purity");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
    }

    #[test]
    fn empty_evaluation_set_is_an_error() {
        let c = tiny();
        let t = Trainer::new(&c).unwrap();
        assert!(evaluate(&t.model, &[], false).is_err());
    }

    #[test]
    fn grid_parsing_and_cells() {
        let g = AblationGrid::from_toml_str(
            "decoders = [\"linear\", \"perceiver\"]\nmotion = [true, false]\nseeds = [0, 1, 2]\n[base.model]\nnum_slots = 4\n",
        )
        .unwrap();
        assert_eq!(g.cells().len(), 4);
        assert_eq!(g.base.model.num_slots, 4);
        let cfg = g.cell_config(&g.cells()[3], 2);
        assert_eq!(
            (cfg.seed, cfg.loss.motion, cfg.model.decoder),
            (2, false, DecoderKind::Perceiver)
        );
        let err = AblationGrid::from_toml_str("decoders = [\"mlp\"]").unwrap_err();
        assert!(err.to_string().contains("decoders"));
        let err = AblationGrid::from_toml_str("[base.model]\nspace = \"lidar\"").unwrap_err();
        assert!(err.to_string().contains("model.space"));
        assert!(AblationGrid::from_toml_str("seeds = []").is_err());
    }

    #[test]
    fn single_cell_sweep_gives_single_row() {
        let mut g = AblationGrid {
            base: tiny(),
            ..Default::default()
        };
        g.base.train.steps = 1;
        g.motion = vec![false];
        let (train, test) = synthetic_splits(&g.base, 2, 1).unwrap();
        let rows = run_ablation(&g, &train, &test, 1);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].runs.len(), 1);
        let md = ablation_markdown(&rows);
        assert!(md.lines().nth(2).unwrap().starts_with("| ✗ | vq | perceiver |"));
    }

    #[test]
    fn failing_runs_are_recorded() {
        let mut g = AblationGrid {
            base: tiny(),
            ..Default::default()
        };
        g.base.train.steps = 1;
        g.base.train.clip_length = 50;
        g.seeds = vec![0, 1];
        let (train, test) = synthetic_splits(&g.base, 2, 1).unwrap();
        let rows = run_ablation(&g, &train, &test, 1);
        assert_eq!(rows[0].failures.len(), 2);
        assert!(ablation_csv(&rows).lines().nth(1).unwrap().contains(",0,2,"));
    }

    #[test]
    fn holdout_split_sizes() {
        let c = tiny();
        let (a, _) = synthetic_splits(&c, 5, 0).unwrap();
        let ids: Vec<_> = a
            .into_iter()
            .enumerate()
            .map(|(i, v)| (crate::dataset::video_id(i), v))
            .collect();
        let (train, test) = holdout_split(ids, 0.2).unwrap();
        assert_eq!((train.len(), test.len()), (4, 1));
        assert_eq!(test[0].0, "video_00004");
    }
}
