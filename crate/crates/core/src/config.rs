//! Run configuration: one TOML file covering model, losses, schedule,
//! training, evaluation, and the synthetic scene generator.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, STRIDE};
use crate::decoders::DecoderKind;
use crate::error::{Error, Result};
use crate::reconspace::ReconSpace;
use crate::synthdata::SceneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub num_slots: usize,
    pub d_slot: usize,
    /// Scales the encoder widths (64, 64, 128, 128).
    pub width_multiplier: f64,
    pub gru_hidden: usize,
    pub d_inp: usize,
    pub decoder: DecoderKind,
    pub decoder_hidden: usize,
    pub heads: usize,
    pub space: ReconSpace,
    pub codebook_size: usize,
    pub d_vq: usize,
    pub vq_hidden: usize,
    /// Width of the transposed-conv head used by the pixel spaces.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            num_slots: 6,
            d_slot: 64,
            width_multiplier: 1.0,
            gru_hidden: 128,
            d_inp: 64,
            decoder: DecoderKind::Perceiver,
            decoder_hidden: 64,
            heads: 4,
            space: ReconSpace::Vq,
            codebook_size: 32,
            d_vq: 64,
            vq_hidden: 64,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / STRIDE, self.image_width / STRIDE)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::scaled(self.width_multiplier, self.gru_hidden, self.d_inp)
    }

    /// Width of the decoded feature map: tied to the codebook in the VQ
    /// spaces, otherwise the decoder width.
    pub fn feature_dim(&self) -> usize {
        if self.space.is_vq() {
            self.d_vq
        } else {
            self.decoder_hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Supervise slot attention with motion masks.
    pub motion: bool,
    pub lambda: f64,
    pub lambda_c: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            motion: true,
            lambda: 1.0,
            lambda_c: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub clip_norm: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 5e-4,
            warmup_steps: 3000,
            decay_rate: 0.5,
            decay_steps: 50_000,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub clip_length: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub data_root: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            clip_length: 5,
            checkpoint_every: 0,
            data_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Drop ground-truth instances covering at most 0.5% of the first frame.
    pub area_filter: bool,
    pub top_k: usize,
    /// Slot masks covering more than this fraction of pixels are not drawn.
    pub max_mask_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            area_filter: false,
            top_k: 10,
            max_mask_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub scene: SceneConfig,
}

/// Enum-valued keys, checked before deserialization so errors name the key.
const ENUM_KEYS: &[(&str, &str, &[&str])] = &[
    ("model", "decoder", &["linear", "cnn", "transformer", "perceiver"]),
    (
        "model",
        "space",
        &["rgb", "flow", "depth", "flow_depth", "vq", "vq_flow"],
    ),
    ("scene", "background", &["solid", "gradient", "texture"]),
];

fn check_enum_values(table: &toml::Table) -> Result<()> {
    for (section, key, allowed) in ENUM_KEYS {
        let Some(value) = table.get(*section).and_then(|s| s.get(*key)) else {
            continue;
        };
        let field = format!("{section}.{key}");
        match value.as_str() {
            Some(v) if allowed.contains(&v) => {}
            _ => {
                return Err(Error::config(
                    field,
                    format!("invalid value {value}, expected one of {}", allowed.join(", ")),
                ))
            }
        }
    }
    if let Some(kinds) = table.get("scene").and_then(|s| s.get("kinds")) {
        let ok = kinds.as_array().is_some_and(|a| {
            a.iter()
                .all(|k| matches!(k.as_str(), Some("circle" | "square" | "triangle")))
        });
        if !ok {
            return Err(Error::config(
                "scene.kinds",
                format!("invalid value {kinds}, expected a list of circle, square, triangle"),
            ));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        check_enum_values(&table)?;
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let reason = e.message().to_string();
            let field = reason
                .split('`')
                .nth(1)
                .filter(|_| reason.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::config(field, reason)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RunConfig always serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.image_height", m.image_height),
            ("model.image_width", m.image_width),
            ("model.num_slots", m.num_slots),
            ("model.d_slot", m.d_slot),
            ("model.gru_hidden", m.gru_hidden),
            ("model.d_inp", m.d_inp),
            ("model.decoder_hidden", m.decoder_hidden),
            ("model.heads", m.heads),
            ("model.codebook_size", m.codebook_size),
            ("model.d_vq", m.d_vq),
            ("model.vq_hidden", m.vq_hidden),
            ("model.head_hidden", m.head_hidden),
            ("train.batch_size", self.train.batch_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !m.image_height.is_multiple_of(STRIDE) || !m.image_width.is_multiple_of(STRIDE) {
            return Err(Error::config(
                "model.image_height",
                format!("image sides must be divisible by {STRIDE}"),
            ));
        }
        if !(m.width_multiplier > 0.0 && m.width_multiplier.is_finite()) {
            return Err(Error::config("model.width_multiplier", "must be a positive number"));
        }
        if !m.decoder_hidden.is_multiple_of(m.heads) {
            return Err(Error::config("model.heads", "must divide model.decoder_hidden"));
        }
        if self.train.clip_length < 2 {
            return Err(Error::config("train.clip_length", "must be at least 2"));
        }
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.lambda.is_finite()) {
            return Err(Error::config("loss.lambda", "must be finite and non-negative"));
        }
        if !(l.lambda_c >= 0.0 && l.lambda_c.is_finite()) {
            return Err(Error::config("loss.lambda_c", "must be finite and non-negative"));
        }
        let s = &self.schedule;
        if !(s.base_lr >= 0.0 && s.base_lr.is_finite()) {
            return Err(Error::config("schedule.base_lr", "must be finite and non-negative"));
        }
        if !(s.decay_rate > 0.0 && s.decay_rate <= 1.0) {
            return Err(Error::config("schedule.decay_rate", "must be in (0, 1]"));
        }
        if s.decay_steps == 0 {
            return Err(Error::config("schedule.decay_steps", "must be positive"));
        }
        if s.clip_norm.is_nan() || s.clip_norm <= 0.0 {
            return Err(Error::config("schedule.clip_norm", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.max_mask_fraction) {
            return Err(Error::config("eval.max_mask_fraction", "must be in [0, 1]"));
        }
        self.scene.validate()
    }
}

/// Derives an independent seed for a named random stream from the run seed.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
