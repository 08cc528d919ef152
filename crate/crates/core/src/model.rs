//! The full pipeline: backbone, recurrent slot attention, slot decoder, and
//! reconstruction space, plus the preprocessing that turns a
//! [`VideoSample`] into model inputs.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array4};

use crate::backbone::{Backbone, STRIDE};
use crate::config::{LossConfig, ModelConfig};
use crate::decoders::{DecoderDims, SlotDecoder};
use crate::error::{Error, Result};
use crate::nn::{AttentionCall, ParamStore};
use crate::reconspace::{
    contrastive_loss, pixel_recon_loss, space_signal, upsample_ids, vq_align_loss, vqvae_loss, PixelHead, ReconSpace,
    VqVae,
};
use crate::slots::{clip_motion_loss, MotionMasks, SlotAttention};
use crate::synthdata::{downsample_masks, VideoSample};

/// A video converted once into the arrays the model consumes.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    /// RGB frames as (T, 3, H, W).
    pub frames: Array4<f32>,
    /// The reconstruction-space signal as (T, C, H, W).
    pub signal: Array4<f32>,
    /// Motion masks per frame at feature resolution.
    pub motion: Vec<MotionMasks>,
}

impl PreparedVideo {
    pub fn new(sample: &VideoSample, space: ReconSpace) -> Result<Self> {
        let frames = sample
            .frames
            .clone()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let mut motion = Vec::with_capacity(sample.num_frames());
        for segs in &sample.motion_segments {
            let (c, h, w) = segs.dim();
            let n = (h / STRIDE) * (w / STRIDE);
            let mut rows = Array2::<f32>::zeros((c, n));
            for (i, seg) in segs.outer_iter().enumerate() {
                let small = downsample_masks(seg, STRIDE)?;
                rows.row_mut(i)
                    .assign(&Array2::from(small).into_shape_with_order(n).expect("h*w cells"));
            }
            motion.push(MotionMasks::new(rows));
        }
        Ok(PreparedVideo {
            frames,
            signal: space_signal(sample, space),
            motion,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }
}

/// A window of `len` frames starting at `start` from one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub start: usize,
    pub len: usize,
}

/// Stacks clip windows into (B, T, C, H, W) tensors.
fn stack_windows(arrays: &[&Array4<f32>], clips: &[ClipRef], dtype: DType, device: &Device) -> Result<Tensor> {
    let (_, c, h, w) = arrays[0].dim();
    let len = clips[0].len;
    let mut data = Vec::with_capacity(clips.len() * len * c * h * w);
    for (a, clip) in arrays.iter().zip(clips) {
        let window = a.slice(ndarray::s![clip.start..clip.start + clip.len, .., .., ..]);
        data.extend(window.iter().copied());
    }
    Ok(Tensor::from_vec(data, (clips.len(), len, c, h, w), device)?.to_dtype(dtype)?)
}

pub enum SpaceHead {
    Pixel(PixelHead),
    Vq(VqVae),
}

/// Per-frame outputs of a clip forward pass. Index `t` in every vector is frame `t`.
pub struct ClipOutput {
    /// (B, K, N) attention maps.
    pub attn: Vec<Tensor>,
    /// (B, K, d_slot) slots.
    pub slots: Vec<Tensor>,
}

/// Scalar tensors of the per-term losses of one batch.
pub struct LossParts {
    pub motion: Tensor,
    pub recon: Tensor,
    pub contrastive: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub slots: SlotAttention,
    pub decoder: SlotDecoder,
    pub head: SpaceHead,
}

impl Model {
    pub fn new(ps: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let bb = config.backbone();
        let backbone = Backbone::new(ps, "backbone", &bb)?;
        let slots = SlotAttention::new(ps, "slots", config.num_slots, config.d_inp, config.d_slot)?;
        let grid = config.grid();
        let dims = DecoderDims {
            grid,
            d_slot: config.d_slot,
            hidden: config.decoder_hidden,
            d_out: config.feature_dim(),
            heads: config.heads,
        };
        let decoder = SlotDecoder::new(ps, "decoder", config.decoder, &dims)?;
        let head = if config.space.is_vq() {
            SpaceHead::Vq(VqVae::new(
                ps,
                "vq",
                config.space.channels(),
                config.vq_hidden,
                config.codebook_size,
                config.d_vq,
            )?)
        } else {
            SpaceHead::Pixel(PixelHead::new(
                ps,
                "head",
                config.feature_dim(),
                config.head_hidden,
                config.space.channels(),
                grid,
            )?)
        };
        Ok(Model {
            config: config.clone(),
            backbone,
            slots,
            decoder,
            head,
        })
    }

    /// Runs backbone and slot attention over a (B, T, 3, H, W) clip.
    pub fn forward_clip(&self, frames: &Tensor) -> Result<ClipOutput> {
        let (b, _, _, h, w) = frames.dims5()?;
        if (h, w) != (self.config.image_height, self.config.image_width) {
            return Err(Error::Shape(format!(
                "model expects {}x{} frames, got {h}x{w}",
                self.config.image_height, self.config.image_width
            )));
        }
        let features = self.backbone.forward_clip(frames)?;
        let mut state = self.slots.init_slots(b)?;
        let mut attn = Vec::with_capacity(features.len());
        let mut slots = Vec::with_capacity(features.len());
        for f in &features {
            let (fb, d, fh, fw) = f.dims4()?;
            let tokens = f.reshape((fb, d, fh * fw))?.transpose(1, 2)?.contiguous()?;
            let step = self.slots.step(&state, &tokens)?;
            state = step.slots.clone();
            attn.push(step.attn);
            slots.push(step.slots);
        }
        Ok(ClipOutput { attn, slots })
    }

    /// Decodes every frame in one batched call: (T * B, N, d_f), frame-major.
    pub fn decode(&self, out: &ClipOutput, trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        let slots = Tensor::cat(&out.slots, 0)?;
        let attn = Tensor::cat(&out.attn, 0)?;
        self.decoder.forward(&slots, &attn, trace)
    }

    /// Computes the loss terms for a batch of clips drawn from `videos`.
    pub fn losses(
        &self,
        videos: &[PreparedVideo],
        clips: &[ClipRef],
        loss: &LossConfig,
        dtype: DType,
    ) -> Result<LossParts> {
        let device = Device::Cpu;
        let frame_arrays: Vec<&Array4<f32>> = clips.iter().map(|c| &videos[c.video].frames).collect();
        let frames = stack_windows(&frame_arrays, clips, dtype, &device)?;
        let out = self.forward_clip(&frames)?;

        let motion = if loss.motion {
            let masks: Vec<Vec<MotionMasks>> = clips
                .iter()
                .map(|c| videos[c.video].motion[c.start..c.start + c.len].to_vec())
                .collect();
            clip_motion_loss(&out.attn, &masks)?
        } else {
            Tensor::zeros((), dtype, &device)?
        };

        let features = self.decode(&out, None)?;
        let signal_arrays: Vec<&Array4<f32>> = clips.iter().map(|c| &videos[c.video].signal).collect();
        // (B, T, C, H, W) -> frame-major (T * B, C, H, W) to line up with `features`.
        let signal = stack_windows(&signal_arrays, clips, dtype, &device)?;
        let (b, t, c, h, w) = signal.dims5()?;
        let signal = signal.transpose(0, 1)?.contiguous()?.reshape((t * b, c, h, w))?;

        let (recon, contrastive) = match &self.head {
            SpaceHead::Pixel(head) => (
                pixel_recon_loss(&head.forward(&features)?, &signal)?,
                Tensor::zeros((), dtype, &device)?,
            ),
            SpaceHead::Vq(vq) => {
                let o = vq.forward(&signal)?;
                let q = &o.quantized;
                let vqvae = vqvae_loss(&signal, &q.z_e, &q.z_q, &o.reconstruction)?;
                let align = vq_align_loss(&features, &q.z_q)?;
                ((vqvae + align)?, contrastive_loss(vq.codebook.embeddings())?)
            }
        };
        Ok(LossParts {
            motion,
            recon,
            contrastive,
        })
    }

    /// Per-frame attention maps (K x N) for a whole video, with no loss computation.
    pub fn infer_video(&self, video: &PreparedVideo, dtype: DType) -> Result<Vec<Array2<f32>>> {
        let clip = ClipRef {
            video: 0,
            start: 0,
            len: video.num_frames(),
        };
        let frames = stack_windows(&[&video.frames], &[clip], dtype, &Device::Cpu)?;
        let out = self.forward_clip(&frames)?;
        out.attn
            .iter()
            .map(|a| {
                let a = a.squeeze(0)?.to_dtype(DType::F32)?;
                let (k, n) = a.dims2()?;
                Array2::from_shape_vec((k, n), a.flatten_all()?.to_vec1::<f32>()?)
                    .map_err(|e| Error::Shape(e.to_string()))
            })
            .collect()
    }

    /// Token ids of every frame, upsampled to image resolution. VQ spaces only.
    pub fn token_assignments(&self, video: &PreparedVideo, dtype: DType) -> Result<Vec<Array2<u32>>> {
        let SpaceHead::Vq(vq) = &self.head else {
            return Err(Error::config("model.space", "token assignments need a vq space"));
        };
        let (t, c, h, w) = video.signal.dim();
        let signal = Tensor::from_slice(
            video.signal.as_slice().expect("standard layout"),
            (t, c, h, w),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        Ok(vq
            .tokens(&signal)?
            .iter()
            .map(|ids| upsample_ids(ids, STRIDE))
            .collect())
    }

    /// The model's reconstruction of every frame as (T, C, H, W): the VQ-VAE
    /// output in the VQ spaces, otherwise the pixel head applied to the decoded slots.
    pub fn reconstruct(&self, video: &PreparedVideo, dtype: DType) -> Result<Array4<f32>> {
        let (t, c, h, w) = video.signal.dim();
        let out = match &self.head {
            SpaceHead::Vq(vq) => {
                let signal = Tensor::from_slice(
                    video.signal.as_slice().expect("standard layout"),
                    (t, c, h, w),
                    &Device::Cpu,
                )?
                .to_dtype(dtype)?;
                vq.forward(&signal)?.reconstruction
            }
            SpaceHead::Pixel(head) => {
                let clip = ClipRef {
                    video: 0,
                    start: 0,
                    len: t,
                };
                let frames = stack_windows(&[&video.frames], &[clip], dtype, &Device::Cpu)?;
                head.forward(&self.decode(&self.forward_clip(&frames)?, None)?)?
            }
        };
        let flat = out.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Array4::from_shape_vec((t, c, h, w), flat).map_err(|e| Error::Shape(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::DecoderKind;
    use crate::synthdata::{generate_video, SceneConfig};

    fn tiny(space: ReconSpace, decoder: DecoderKind) -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            num_slots: 3,
            d_slot: 8,
            width_multiplier: 0.125,
            gru_hidden: 8,
            d_inp: 8,
            decoder,
            decoder_hidden: 8,
            heads: 2,
            space,
            codebook_size: 5,
            d_vq: 6,
            vq_hidden: 4,
            head_hidden: 4,
        }
    }

    fn video() -> VideoSample {
        generate_video(&SceneConfig {
            height: 16,
            width: 16,
            min_sprites: 2,
            max_sprites: 2,
            min_radius: 2.0,
            max_radius: 3.0,
            frames: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn prepared_video_shapes() {
        let v = video();
        let p = PreparedVideo::new(&v, ReconSpace::FlowDepth).unwrap();
        assert_eq!(p.frames.dim(), (4, 3, 16, 16));
        assert_eq!(p.signal.dim(), (4, 3, 16, 16));
        assert_eq!(p.motion.len(), 4);
        assert!(p.motion.iter().all(|m| m.masks.ncols() == 16));
        assert_eq!(p.frames[[2, 1, 3, 5]], v.frames[[2, 3, 5, 1]]);
    }

    #[test]
    fn every_space_and_decoder_produces_finite_losses() {
        let v = video();
        for space in ReconSpace::ALL {
            for decoder in DecoderKind::ALL {
                let cfg = tiny(space, decoder);
                let mut ps = ParamStore::new(3, DType::F32);
                let model = Model::new(&mut ps, &cfg).unwrap();
                let p = vec![PreparedVideo::new(&v, space).unwrap()];
                let clips = [ClipRef {
                    video: 0,
                    start: 1,
                    len: 3,
                }];
                let parts = model.losses(&p, &clips, &LossConfig::default(), DType::F32).unwrap();
                for t in [&parts.motion, &parts.recon, &parts.contrastive] {
                    let x = t.to_scalar::<f32>().unwrap();
                    assert!(x.is_finite() && x >= 0.0, "{space} {decoder}: {x}");
                }
                let c = parts.contrastive.to_scalar::<f32>().unwrap();
                assert_eq!(c > 0.0, space.is_vq(), "{space}");
            }
        }
    }

    #[test]
    fn inference_is_deterministic_and_shaped() {
        let cfg = tiny(ReconSpace::Vq, DecoderKind::Perceiver);
        let mut ps = ParamStore::new(4, DType::F32);
        let model = Model::new(&mut ps, &cfg).unwrap();
        let p = PreparedVideo::new(&video(), ReconSpace::Vq).unwrap();
        let a = model.infer_video(&p, DType::F32).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|m| m.dim() == (3, 16)));
        for m in &a {
            for col in m.columns() {
                assert!((col.sum() - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(a, model.infer_video(&p, DType::F32).unwrap());
        let ids = model.token_assignments(&p, DType::F32).unwrap();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|m| m.dim() == (16, 16) && m.iter().all(|&i| i < 5)));
        assert_eq!(model.reconstruct(&p, DType::F32).unwrap().dim(), (4, 3, 16, 16));
    }

    #[test]
    fn token_assignments_need_vq() {
        let cfg = tiny(ReconSpace::Rgb, DecoderKind::Linear);
        let mut ps = ParamStore::new(4, DType::F32);
        let model = Model::new(&mut ps, &cfg).unwrap();
        let p = PreparedVideo::new(&video(), ReconSpace::Rgb).unwrap();
        assert!(model.token_assignments(&p, DType::F32).is_err());
        assert_eq!(model.reconstruct(&p, DType::F32).unwrap().dim(), (4, 3, 16, 16));
    }

    #[test]
    fn wrong_frame_size_is_a_shape_error() {
        let cfg = ModelConfig {
            image_height: 32,
            image_width: 32,
            ..tiny(ReconSpace::Vq, DecoderKind::Linear)
        };
        let mut ps = ParamStore::new(4, DType::F32);
        let model = Model::new(&mut ps, &cfg).unwrap();
        let p = PreparedVideo::new(&video(), ReconSpace::Vq).unwrap();
        assert!(matches!(model.infer_video(&p, DType::F32), Err(Error::Shape(_))));
    }
}
