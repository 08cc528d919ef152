//! Per-frame residual CNN encoder and ConvGRU temporal aggregation.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, Linear, ParamStore};

/// Overall spatial downsampling of the encoder.
pub const STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Widths of the four residual blocks.
    pub channels: [usize; 4],
    pub gru_hidden: usize,
    /// Channels of the aggregated features fed to slot attention.
    pub d_inp: usize,
}

impl BackboneConfig {
    /// Residual widths `[64, 64, 128, 128]` and ConvGRU widths scaled by `width_multiplier`.
    pub fn scaled(width_multiplier: f64, gru_hidden: usize, d_inp: usize) -> Self {
        let s = |c: usize| ((c as f64 * width_multiplier).round() as usize).max(1);
        BackboneConfig {
            channels: [s(64), s(64), s(128), s(128)],
            gru_hidden,
            d_inp,
        }
    }
}

struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::same(ps, &format!("{name}.conv1"), c_in, c_out, 3)?,
            conv2: Conv2d::same(ps, &format!("{name}.conv2"), c_out, c_out, 3)?,
            shortcut: if c_in != c_out {
                Some(Conv2d::same(ps, &format!("{name}.shortcut"), c_in, c_out, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet-style encoder at stride 4: a stride-2 7x7 stem, a stride-2 3x3
/// downsampling conv, then four stride-1 residual blocks.
pub struct FrameEncoder {
    stem: Conv2d,
    down: Conv2d,
    blocks: Vec<ResBlock>,
    out_channels: usize,
}

impl FrameEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, channels: [usize; 4]) -> Result<Self> {
        let stem = Conv2d::new(ps, &format!("{name}.stem"), 3, channels[0], 7, 2, 3)?;
        let down = Conv2d::new(ps, &format!("{name}.down"), channels[0], channels[0], 3, 2, 1)?;
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = channels[0];
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(ResBlock::new(ps, &format!("{name}.block{i}"), c_in, c)?);
            c_in = c;
        }
        Ok(FrameEncoder {
            stem,
            down,
            blocks,
            out_channels: channels[3],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `frames`: (B, 3, H, W) -> (B, C, H/4, W/4).
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Shape(format!(
                "frame {h}x{w} is not divisible by the encoder stride {STRIDE}"
            )));
        }
        let mut x = self.stem.forward(frames)?.relu()?;
        x = self.down.forward(&x)?.relu()?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }
}

/// Single-layer convolutional GRU with a 1x1 output projection.
pub struct ConvGru {
    gates: Conv2d,
    candidate: Conv2d,
    proj: Conv2d,
    hidden: usize,
}

impl ConvGru {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(ConvGru {
            gates: Conv2d::same(ps, &format!("{name}.gates"), c_in + hidden, 2 * hidden, 3)?,
            candidate: Conv2d::same(ps, &format!("{name}.candidate"), c_in + hidden, hidden, 3)?,
            proj: Conv2d::same(ps, &format!("{name}.proj"), hidden, d_out, 1)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.hidden, h, w), dtype, &Device::Cpu)?)
    }

    /// One recurrent update. Returns `(output, new_state)`:
    /// `z = σ(Wz*[x,h])`, `r = σ(Wr*[x,h])`, `n = tanh(Wn*[x, r⊙h])`,
    /// `h' = (1 - z)⊙h + z⊙n`, `output = P*h'`.
    pub fn step(&self, state: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (bs, cs, hs, ws) = state.dims4()?;
        let (bx, _, hx, wx) = x.dims4()?;
        if (bs, hs, ws) != (bx, hx, wx) || cs != self.hidden {
            return Err(Error::Shape(format!(
                "ConvGRU state {:?} does not match input {:?}",
                state.dims(),
                x.dims()
            )));
        }
        let gates = sigmoid(&self.gates.forward(&Tensor::cat(&[x, state], 1)?)?)?;
        let update = gates.narrow(1, 0, self.hidden)?;
        let reset = gates.narrow(1, self.hidden, self.hidden)?;
        let gated = (reset * state)?;
        let cand = self.candidate.forward(&Tensor::cat(&[x, &gated], 1)?)?.tanh()?;
        let keep = (update.ones_like()? - &update)?;
        let new_state = ((keep * state)? + (update * cand)?)?;
        let out = self.proj.forward(&new_state)?;
        Ok((out, new_state))
    }
}

/// Learned projection of the normalized `[y, x, 1 - y, 1 - x]` grid, added
/// to feature maps so that slot attention can tell positions apart.
pub struct SoftPosition {
    proj: Linear,
}

impl SoftPosition {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(SoftPosition {
            proj: Linear::new(ps, &format!("{name}.proj"), 4, channels, true)?,
        })
    }

    /// The (C, h, w) embedding for an `h x w` grid.
    pub fn embedding(&self, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
        let coord = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
        let mut grid = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (coord(y, h), coord(x, w));
                grid.extend_from_slice(&[cy, cx, 1.0 - cy, 1.0 - cx]);
            }
        }
        let grid = Tensor::from_vec(grid, (h * w, 4), &Device::Cpu)?.to_dtype(dtype)?;
        let emb = self.proj.forward(&grid)?;
        Ok(emb.t()?.reshape((self.proj.out_dim(), h, w))?)
    }

    /// `x`: (B, C, h, w).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(x.broadcast_add(&self.embedding(h, w, x.dtype())?)?)
    }
}

/// Encoder, ConvGRU and the positional embedding of the aggregated features.
pub struct Backbone {
    pub encoder: FrameEncoder,
    pub gru: ConvGru,
    pub position: SoftPosition,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, name: &str, config: &BackboneConfig) -> Result<Self> {
        let encoder = FrameEncoder::new(ps, &format!("{name}.encoder"), config.channels)?;
        let gru = ConvGru::new(
            ps,
            &format!("{name}.gru"),
            encoder.out_channels(),
            config.gru_hidden,
            config.d_inp,
        )?;
        let position = SoftPosition::new(ps, &format!("{name}.position"), config.d_inp)?;
        Ok(Backbone { encoder, gru, position })
    }

    /// Runs the recurrent pipeline over a clip.
    ///
    /// `frames`: (B, T, 3, H, W). Returns T aggregated feature maps (B, d_inp, h, w)
    /// with the positional embedding added.
    /// The encoder is applied to all frames in one batched call; only the GRU
    /// is sequential, so output `t` depends on frames `0..=t` only.
    pub fn forward_clip(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let (b, t, c, h, w) = frames.dims5()?;
        let flat = frames.reshape((b * t, c, h, w))?;
        let feats = self.encoder.forward(&flat)?;
        let (_, fc, fh, fw) = feats.dims4()?;
        let feats = feats.reshape((b, t, fc, fh, fw))?;
        let mut state = self.gru.zero_state(b, fh, fw, frames.dtype())?;
        let mut outs = Vec::with_capacity(t);
        for i in 0..t {
            let x = feats.narrow(1, i, 1)?.squeeze(1)?;
            let (out, next) = self.gru.step(&state, &x)?;
            state = next;
            outs.push(self.position.forward(&out)?);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_store;

    fn zero_all(ps: &ParamStore) {
        for (_, v) in ps.iter() {
            v.set(&v.zeros_like().unwrap()).unwrap();
        }
    }

    #[test]
    fn encoder_output_shape() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = FrameEncoder::new(&mut ps, "enc", [8, 8, 16, 16]).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(enc.forward(&x).unwrap().dims(), &[1, 16, 16, 16]);
    }

    #[test]
    fn encoder_rejects_non_divisible_frames() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = FrameEncoder::new(&mut ps, "enc", [4, 4, 4, 4]).unwrap();
        let x = Tensor::zeros((1, 3, 30, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn encoder_is_deterministic_and_linear_at_zero() {
        let mut ps = ParamStore::new(3, DType::F32);
        let enc = FrameEncoder::new(&mut ps, "enc", [4, 4, 8, 8]).unwrap();
        let x = Tensor::rand(0f32, 1., (2, 3, 16, 16), &Device::Cpu).unwrap();
        let a = enc
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let b = enc
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);

        zero_all(&ps);
        let zero = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let out = enc
            .forward(&zero)
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(out, 0.0);
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut ps = ParamStore::new(0, DType::F64);
        let gru = ConvGru::new(&mut ps, "gru", 2, 3, 2).unwrap();
        zero_all(&ps);
        let state = Tensor::rand(-1f64, 1., (1, 3, 4, 4), &Device::Cpu).unwrap();
        let x = Tensor::rand(-1f64, 1., (1, 2, 4, 4), &Device::Cpu).unwrap();
        let (_, next) = gru.step(&state, &x).unwrap();
        let expected = (state * 0.5).unwrap();
        let diff = (next - expected)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-15);

        let zero_state = gru.zero_state(1, 4, 4, DType::F64).unwrap();
        let (_, next) = gru.step(&zero_state, &x).unwrap();
        assert_eq!(next.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn gru_preserves_spatial_dims_and_checks_shapes() {
        let mut ps = ParamStore::new(0, DType::F32);
        let gru = ConvGru::new(&mut ps, "gru", 4, 6, 5).unwrap();
        let state = gru.zero_state(2, 5, 7, DType::F32).unwrap();
        let x = Tensor::zeros((2, 4, 5, 7), DType::F32, &Device::Cpu).unwrap();
        let (out, next) = gru.step(&state, &x).unwrap();
        assert_eq!(out.dims(), &[2, 5, 5, 7]);
        assert_eq!(next.dims(), &[2, 6, 5, 7]);
        let bad = Tensor::zeros((2, 4, 4, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(gru.step(&state, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut ps = ParamStore::new(1, DType::F64);
        let gru = ConvGru::new(&mut ps, "gru", 2, 2, 2).unwrap();
        let state = Tensor::rand(-1f64, 1., (1, 2, 4, 4), &Device::Cpu).unwrap();
        let x = Tensor::rand(-1f64, 1., (1, 2, 4, 4), &Device::Cpu).unwrap();
        let report = check_store(
            &ps,
            || {
                let (out, next) = gru.step(&state, &x)?;
                Ok((out.sqr()?.sum_all()? + next.sin()?.sum_all()?)?)
            },
            1e-6,
            64,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn outputs_are_temporally_causal() {
        let mut ps = ParamStore::new(2, DType::F32);
        let bb = Backbone::new(&mut ps, "bb", &BackboneConfig::scaled(0.125, 8, 4)).unwrap();
        let frames = Tensor::rand(0f32, 1., (1, 3, 3, 16, 16), &Device::Cpu).unwrap();
        let a = bb.forward_clip(&frames).unwrap();
        let perturbed = Tensor::cat(
            &[
                frames.narrow(1, 0, 2).unwrap(),
                Tensor::rand(0f32, 1., (1, 1, 3, 16, 16), &Device::Cpu).unwrap(),
            ],
            1,
        )
        .unwrap();
        let b = bb.forward_clip(&perturbed).unwrap();
        for t in 0..2 {
            let d = (&a[t] - &b[t])
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert_eq!(d, 0.0);
        }
        let d = (&a[2] - &b[2])
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn position_embedding_follows_the_grid() {
        let mut ps = ParamStore::new(4, DType::F64);
        let pos = SoftPosition::new(&mut ps, "pos", 3).unwrap();
        let emb = pos.embedding(2, 3, DType::F64).unwrap();
        assert_eq!(emb.dims(), &[3, 2, 3]);
        // Corners are affine images of [0,0,1,1], [0,1,1,0], [1,0,0,1], [1,1,0,0].
        let e = emb.to_vec3::<f64>().unwrap();
        for m in &e {
            assert!((m[0][0] + m[1][2] - m[0][2] - m[1][0]).abs() < 1e-12);
            assert!((m[0][1] - 0.5 * (m[0][0] + m[0][2])).abs() < 1e-12);
        }
        let x = Tensor::zeros((2, 3, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let y = pos.forward(&x).unwrap();
        let d = (y.get(1).unwrap() - &emb).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }
}
