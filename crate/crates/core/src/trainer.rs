//! Optimization: the composite objective, learning-rate schedule, Adam with
//! global-norm clipping, checkpoints, and the metrics stream.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{substream_seed, RunConfig, ScheduleConfig};
use crate::dataset::{check_format_version, parse_manifest, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{ClipRef, Model, PreparedVideo};
use crate::nn::ParamStore;
use crate::synthdata::VideoSample;

pub const TRAIN_DTYPE: DType = DType::F32;
/// Totals above this abort the run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
const CLIP_EPS: f64 = 1e-6;

/// `base_lr * min(step / warmup, 1) * decay_rate^(step / decay_steps)`.
pub fn learning_rate(s: &ScheduleConfig, step: u64) -> f64 {
    let warm = if s.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / s.warmup_steps as f64).min(1.0)
    };
    s.base_lr * warm * s.decay_rate.powf(step as f64 / s.decay_steps as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_c: f64,
    /// Whether the contrastive term is active (VQ spaces only).
    pub vq: bool,
}

impl LossWeights {
    pub fn from_config(c: &RunConfig) -> Self {
        LossWeights {
            lambda: c.loss.lambda,
            lambda_c: c.loss.lambda_c,
            vq: c.model.space.is_vq(),
        }
    }

    fn contrastive_factor(&self) -> f64 {
        if self.vq {
            self.lambda_c
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub motion: f64,
    pub recon: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// `total = lambda * motion + recon + lambda_c * [vq] * contrastive`.
pub fn total_loss(motion: f64, recon: f64, contrastive: f64, w: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [("motion", motion), ("recon", recon), ("contrastive", contrastive)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBundle {
        motion,
        recon,
        contrastive,
        total: w.lambda * motion + recon + w.contrastive_factor() * contrastive,
    })
}

/// Factor applied to all gradients so their global norm is at most `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    (clip / (norm + CLIP_EPS)).min(1.0)
}

/// Adam with bias correction; gradients are clipped by global norm first.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

fn gradients(ps: &ParamStore, grads: &GradStore) -> Result<Vec<(String, Tensor)>> {
    ps.iter()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.zeros_like()?,
            };
            Ok((name.clone(), g))
        })
        .collect()
}

pub fn global_norm(grads: &[(String, Tensor)]) -> Result<f64> {
    let mut sq = 0.0f64;
    for (_, g) in grads {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

impl Adam {
    /// Clips, then applies one update at learning rate `lr`. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64, clip_norm: f64) -> Result<f64> {
        let grads = gradients(ps, grads)?;
        let norm = global_norm(&grads)?;
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm is {norm}")));
        }
        let scale = clip_scale(norm, clip_norm);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let var = ps.get(&name).expect("gradient names come from the store");
            let g = (g * scale)?;
            let m = match self.m.get(&name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    fn to_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, m) in &self.m {
            out.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            out.insert(format!("v.{k}"), v.clone());
        }
        out
    }

    fn from_tensors(tensors: HashMap<String, Tensor>, t: u64) -> Result<Self> {
        let mut adam = Adam {
            t,
            ..Default::default()
        };
        for (k, v) in tensors {
            if let Some(name) = k.strip_prefix("m.") {
                adam.m.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.v.insert(name.to_string(), v);
            } else {
                return Err(Error::Format(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(adam)
    }
}

pub fn prepare_videos(samples: &[VideoSample], config: &RunConfig) -> Result<Vec<PreparedVideo>> {
    let (h, w) = (config.model.image_height, config.model.image_width);
    samples
        .iter()
        .map(|s| {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::config(
                    "model.image_height",
                    format!(
                        "model expects {h}x{w} frames but the data is {}x{}",
                        s.height(),
                        s.width()
                    ),
                ));
            }
            PreparedVideo::new(s, config.model.space)
        })
        .collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub ps: ParamStore,
    pub model: Model,
    adam: Adam,
    step: u64,
    sampler: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(substream_seed(config.seed, "init"), TRAIN_DTYPE);
        let model = Model::new(&mut ps, &config.model)?;
        Ok(Trainer {
            config: config.clone(),
            ps,
            model,
            adam: Adam::default(),
            step: 0,
            sampler: ChaCha8Rng::seed_from_u64(substream_seed(config.seed, "sampling")),
        })
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::from_config(&self.config)
    }

    /// Draws `batch_size` random clip windows.
    pub fn sample_clips(&mut self, videos: &[PreparedVideo]) -> Result<Vec<ClipRef>> {
        if videos.is_empty() {
            return Err(Error::config("train.data_root", "training set is empty"));
        }
        let len = self.config.train.clip_length;
        (0..self.config.train.batch_size)
            .map(|_| {
                let video = self.sampler.random_range(0..videos.len());
                let t = videos[video].num_frames();
                if t < len {
                    return Err(Error::config(
                        "train.clip_length",
                        format!("clip length {len} exceeds video length {t}"),
                    ));
                }
                let start = self.sampler.random_range(0..=t - len);
                Ok(ClipRef { video, start, len })
            })
            .collect()
    }

    fn forward(&self, videos: &[PreparedVideo], clips: &[ClipRef]) -> Result<(Tensor, LossBundle)> {
        let parts = self.model.losses(videos, clips, &self.config.loss, TRAIN_DTYPE)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let w = self.weights();
        let bundle = total_loss(
            scalar(&parts.motion)?,
            scalar(&parts.recon)?,
            scalar(&parts.contrastive)?,
            &w,
        )?;
        let total = (((&parts.motion * w.lambda)? + &parts.recon)? + (&parts.contrastive * w.contrastive_factor())?)?;
        Ok((total, bundle))
    }

    /// Loss on a fixed batch, without updating anything.
    pub fn evaluate_batch(&self, videos: &[PreparedVideo], clips: &[ClipRef]) -> Result<LossBundle> {
        Ok(self.forward(videos, clips)?.1)
    }

    /// One update on the given clips. The `s`-th update (1-based) uses `lr(s)`.
    pub fn train_on(&mut self, videos: &[PreparedVideo], clips: &[ClipRef]) -> Result<LossBundle> {
        let (total, bundle) = self.forward(videos, clips)?;
        let next = self.step + 1;
        if bundle.total > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged {
                step: next,
                detail: format!(
                    "total {} (motion {}, recon {}, contrastive {})",
                    bundle.total, bundle.motion, bundle.recon, bundle.contrastive
                ),
            });
        }
        let grads = total.backward()?;
        let lr = learning_rate(&self.config.schedule, next);
        self.adam.step(&self.ps, &grads, lr, self.config.schedule.clip_norm)?;
        self.step = next;
        Ok(bundle)
    }

    pub fn train_step(&mut self, videos: &[PreparedVideo]) -> Result<LossBundle> {
        let clips = self.sample_clips(videos)?;
        self.train_on(videos, &clips)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        candle_core::safetensors::save(&self.ps.to_tensors(), tmp.join("params.safetensors"))?;
        candle_core::safetensors::save(&self.adam.to_tensors(), tmp.join("adam.safetensors"))?;
        fs::write(tmp.join("config.toml"), self.config.to_toml_string())?;
        let manifest = format!(
            "format_version={FORMAT_VERSION}\nstep={}\nconfig_hash={}\nseed={}\nsampler_word_pos={}\n",
            self.step,
            self.config.hash(),
            self.config.seed,
            self.sampler.get_word_pos(),
        );
        fs::write(tmp.join("manifest.txt"), manifest)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let pairs = parse_manifest(&text)?;
        check_format_version(&pairs, &manifest_path.display().to_string())?;
        let entries: BTreeMap<String, String> = pairs.into_iter().collect();
        let field = |k: &str| {
            entries
                .get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint manifest missing `{k}`")))
        };
        let config = RunConfig::load(&dir.join("config.toml"))?;
        if field("config_hash")? != &config.hash() {
            return Err(Error::Format(
                "checkpoint config does not match its recorded hash".into(),
            ));
        }
        let step: u64 = field("step")?
            .parse()
            .map_err(|_| Error::Format("checkpoint step is not a number".into()))?;
        let word_pos: u128 = field("sampler_word_pos")?
            .parse()
            .map_err(|_| Error::Format("checkpoint sampler position is not a number".into()))?;

        let mut trainer = Trainer::new(&config)?;
        let load = |name: &str| {
            let path = dir.join(name);
            if !path.is_file() {
                return Err(Error::Format(format!("missing {}", path.display())));
            }
            Ok(candle_core::safetensors::load(&path, &Device::Cpu)?)
        };
        trainer.ps.load_tensors(&load("params.safetensors")?)?;
        trainer.adam = Adam::from_tensors(load("adam.safetensors")?, step)?;
        trainer.step = step;
        trainer.sampler.set_word_pos(word_pos);
        Ok(trainer)
    }
}

/// One metrics-stream line: `step,loss_total,loss_motion,loss_recon,loss_contrastive,lr`.
pub fn metrics_line(step: u64, b: &LossBundle, lr: f64) -> String {
    format!("{step},{},{},{},{},{lr}", b.total, b.motion, b.recon, b.contrastive)
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

/// Keeps the first `lines` lines of the metrics stream, dropping entries
/// logged after the checkpoint a run resumes from.
fn truncate_metrics(path: &Path, lines: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: Vec<&str> = text.lines().take(lines as usize).collect();
    let mut body = kept.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Trains until `config.train.steps` updates have been applied.
///
/// With `out`, appends to `<out>/metrics.csv` and writes `<out>/checkpoint`
/// every `checkpoint_every` steps and at the end. Returns the bundles of the
/// steps run by this call.
pub fn run_training(trainer: &mut Trainer, videos: &[PreparedVideo], out: Option<&Path>) -> Result<Vec<LossBundle>> {
    let target = trainer.config.train.steps;
    let every = trainer.config.train.checkpoint_every;
    let mut stream = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            truncate_metrics(&metrics_path(dir), trainer.step())?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(metrics_path(dir))?,
            )
        }
        None => None,
    };
    let mut bundles = Vec::new();
    while trainer.step() < target {
        let b = trainer.train_step(videos)?;
        let step = trainer.step();
        if let Some(f) = stream.as_mut() {
            writeln!(
                f,
                "{}",
                metrics_line(step, &b, learning_rate(&trainer.config.schedule, step))
            )?;
        }
        if step.is_multiple_of(100) {
            log::info!(
                "step {step}: total {:.5} motion {:.5} recon {:.5}",
                b.total,
                b.motion,
                b.recon
            );
        }
        if let (Some(dir), true) = (out, every > 0 && step.is_multiple_of(every)) {
            trainer.save_checkpoint(&checkpoint_dir(dir))?;
        }
        bundles.push(b);
    }
    if let Some(dir) = out {
        trainer.save_checkpoint(&checkpoint_dir(dir))?;
    }
    Ok(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthdata::{generate_dataset, SceneConfig};

    pub(crate) fn tiny_config() -> RunConfig {
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
        c.train.steps = 4;
        c.schedule.warmup_steps = 2;
        c
    }

    fn data(c: &RunConfig) -> Vec<PreparedVideo> {
        prepare_videos(&generate_dataset(&c.scene, 3).unwrap(), c).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = ScheduleConfig::default();
        let half = learning_rate(&s, 1500);
        let expected = 5e-4 * 0.5 * 0.5f64.powf(1500.0 / 50_000.0);
        assert!((half - expected).abs() < 1e-18);
        assert!((half - 2.5e-4).abs() / 2.5e-4 < 0.03);
        assert_eq!(learning_rate(&s, 3000), 5e-4 * 0.5f64.powf(0.06));
        assert!((learning_rate(&s, 50_000) - 2.5e-4).abs() < 1e-15);
    }

    #[test]
    fn schedule_shape() {
        let s = ScheduleConfig::default();
        let mut prev = 0.0;
        for step in (1..=3000).step_by(50) {
            let lr = learning_rate(&s, step);
            assert!(lr > prev);
            prev = lr;
        }
        for step in (3000..200_000).step_by(997) {
            let lr = learning_rate(&s, step + 1);
            assert!(lr < learning_rate(&s, step) && lr > 0.0);
        }
    }

    #[test]
    fn total_loss_examples() {
        let vq = LossWeights {
            lambda: 1.0,
            lambda_c: 0.05,
            vq: true,
        };
        assert_eq!(total_loss(2.0, 3.0, 10.0, &vq).unwrap().total, 5.5);
        let pixel = LossWeights { vq: false, ..vq };
        assert_eq!(total_loss(2.0, 3.0, 10.0, &pixel).unwrap().total, 5.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &vq).unwrap().total, 0.0);
        let err = total_loss(f64::NAN, 1.0, 1.0, &vq).unwrap_err();
        assert!(err.to_string().contains("motion"));
        let err = total_loss(1.0, 1.0, f64::INFINITY, &vq).unwrap_err();
        assert!(err.to_string().contains("contrastive"));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        assert_eq!(clip_scale(0.5, 1.0), 1.0);
        let norm: f64 = 40.0;
        assert!(norm * clip_scale(norm, 0.05) <= 0.05 + 1e-6);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut c = tiny_config();
        c.schedule.base_lr = 0.0;
        let d = data(&c);
        let mut t = Trainer::new(&c).unwrap();
        let before = t.ps.to_tensors();
        t.train_step(&d).unwrap();
        for (k, v) in t.ps.to_tensors() {
            let diff = (&v - &before[&k])
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(diff, 0.0, "{k}");
        }
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let c = tiny_config();
        let d = data(&c);
        let run = || {
            let mut t = Trainer::new(&c).unwrap();
            (0..4).map(|_| t.train_step(&d).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let c = tiny_config();
        let d = data(&c);
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(&c).unwrap();
        a.train_step(&d).unwrap();
        a.train_step(&d).unwrap();
        a.save_checkpoint(&dir.path().join("ck")).unwrap();
        let rest_a: Vec<_> = (0..2).map(|_| a.train_step(&d).unwrap()).collect();
        let mut b = Trainer::load_checkpoint(&dir.path().join("ck")).unwrap();
        assert_eq!(b.step(), 2);
        let rest_b: Vec<_> = (0..2).map(|_| b.train_step(&d).unwrap()).collect();
        assert_eq!(rest_a, rest_b);
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Trainer::load_checkpoint(&dir.path().join("none")),
            Err(Error::Format(_))
        ));
        let c = tiny_config();
        let t = Trainer::new(&c).unwrap();
        let ck = dir.path().join("ck");
        t.save_checkpoint(&ck).unwrap();
        let manifest = fs::read_to_string(ck.join("manifest.txt")).unwrap();
        fs::write(
            ck.join("manifest.txt"),
            manifest.replace("format_version=1", "format_version=7"),
        )
        .unwrap();
        let err = Trainer::load_checkpoint(&ck).err().unwrap();
        assert!(err.to_string().contains("format_version"));
        t.save_checkpoint(&ck).unwrap();
        fs::remove_file(ck.join("adam.safetensors")).unwrap();
        assert!(Trainer::load_checkpoint(&ck).is_err());
    }

    #[test]
    fn run_training_writes_stream_and_checkpoint() {
        let c = tiny_config();
        let d = data(&c);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&c).unwrap();
        let bundles = run_training(&mut t, &d, Some(dir.path())).unwrap();
        assert_eq!(bundles.len(), 4);
        let text = fs::read_to_string(metrics_path(dir.path())).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 6);
        assert!(lines[3].starts_with("4,"));
        let resumed = Trainer::load_checkpoint(&checkpoint_dir(dir.path())).unwrap();
        assert_eq!(resumed.step(), 4);
    }

    #[test]
    fn zero_steps_still_checkpoints() {
        let mut c = tiny_config();
        c.train.steps = 0;
        let d = data(&c);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&c).unwrap();
        assert!(run_training(&mut t, &d, Some(dir.path())).unwrap().is_empty());
        assert!(checkpoint_dir(dir.path()).join("params.safetensors").is_file());
        assert_eq!(fs::read_to_string(metrics_path(dir.path())).unwrap(), "");
    }

    #[test]
    fn clip_longer_than_video_is_rejected() {
        let mut c = tiny_config();
        c.train.clip_length = 9;
        let d = data(&c);
        let mut t = Trainer::new(&c).unwrap();
        assert!(matches!(t.train_step(&d), Err(Error::Config { .. })));
    }
}
