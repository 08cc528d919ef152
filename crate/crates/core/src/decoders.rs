//! Slot decoders: map slots (and their attention maps) to a dense feature map.
//!
//! All decoders return `(B, N, d_f)` where `N = h * w` positions in row-major order.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionCall, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};

/// Guards the per-position denominator of the linear decoder.
const LINEAR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Linear,
    Cnn,
    Transformer,
    Perceiver,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [
        DecoderKind::Linear,
        DecoderKind::Cnn,
        DecoderKind::Transformer,
        DecoderKind::Perceiver,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Cnn => "cnn",
            DecoderKind::Transformer => "transformer",
            DecoderKind::Perceiver => "perceiver",
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    /// Feature grid (h, w); N = h * w.
    pub grid: (usize, usize),
    pub d_slot: usize,
    /// Width of convolutions, attention, MLPs, and the positional query.
    pub hidden: usize,
    pub d_out: usize,
    pub heads: usize,
}

impl DecoderDims {
    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Attention-weighted average of slot vectors at every position:
/// `F(x) = Σ_i S_i W[i,x] / Σ_i W[i,x]`. `slots`: (B, K, d); `attn`: (B, K, N).
pub fn linear_decode(slots: &Tensor, attn: &Tensor) -> Result<Tensor> {
    let (b, k, _) = slots.dims3()?;
    let (ba, ka, _) = attn.dims3()?;
    if b != ba || k != ka {
        return Err(Error::Shape(format!(
            "slots {:?} and attention {:?} disagree",
            slots.dims(),
            attn.dims()
        )));
    }
    let weights_t = attn.transpose(1, 2)?.contiguous()?;
    let numer = weights_t.matmul(slots)?;
    let denom = (weights_t.sum_keepdim(2)? + LINEAR_EPS)?;
    Ok(numer.broadcast_div(&denom)?)
}

fn to_grid(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if n != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{n} positions do not form a {grid:?} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, d, grid.0, grid.1))?)
}

fn from_grid(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = x.dims4()?;
    Ok(x.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub struct LinearDecoder {
    proj: Linear,
}

impl LinearDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &DecoderDims) -> Result<Self> {
        Ok(LinearDecoder {
            proj: Linear::new(ps, &format!("{name}.proj"), dims.d_slot, dims.d_out, true)?,
        })
    }

    pub fn forward(&self, slots: &Tensor, attn: &Tensor) -> Result<Tensor> {
        self.proj.forward(&linear_decode(slots, attn)?)
    }
}

/// Linear decoding followed by a 5x5 and a 3x3 same-padded convolution.
pub struct CnnDecoder {
    conv1: Conv2d,
    conv2: Conv2d,
    grid: (usize, usize),
}

impl CnnDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &DecoderDims) -> Result<Self> {
        Ok(CnnDecoder {
            conv1: Conv2d::same(ps, &format!("{name}.conv1"), dims.d_slot, dims.hidden, 5)?,
            conv2: Conv2d::same(ps, &format!("{name}.conv2"), dims.hidden, dims.d_out, 3)?,
            grid: dims.grid,
        })
    }

    pub fn forward(&self, slots: &Tensor, attn: &Tensor) -> Result<Tensor> {
        let map = to_grid(&linear_decode(slots, attn)?, self.grid)?;
        let y = self.conv2.forward(&self.conv1.forward(&map)?.relu()?)?;
        from_grid(&y)
    }
}

fn batch_query(query: &Tensor, batch: usize) -> Result<Tensor> {
    let (n, d) = query.dims2()?;
    Ok(query.unsqueeze(0)?.broadcast_as((batch, n, d))?.contiguous()?)
}

/// One pre-norm transformer decoder layer over the positional queries:
/// self-attention among the N queries, cross-attention into the slots, feed-forward.
pub struct TransformerDecoder {
    query: Tensor,
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    norm_slots: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
    norm_out: LayerNorm,
    proj: Linear,
}

impl TransformerDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &DecoderDims) -> Result<Self> {
        let d = dims.hidden;
        Ok(TransformerDecoder {
            query: ps.normal(&format!("{name}.query"), &[dims.positions(), d], 0.5)?,
            norm_self: LayerNorm::new(ps, &format!("{name}.norm_self"), d)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), d, d, d, d, dims.heads)?,
            norm_cross: LayerNorm::new(ps, &format!("{name}.norm_cross"), d)?,
            norm_slots: LayerNorm::new(ps, &format!("{name}.norm_slots"), dims.d_slot)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, dims.d_slot, d, d, dims.heads)?,
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), d)?,
            ffn: Mlp::new(ps, &format!("{name}.ffn"), d, d, d)?,
            norm_out: LayerNorm::new(ps, &format!("{name}.norm_out"), d)?,
            proj: Linear::new(ps, &format!("{name}.proj"), d, dims.d_out, true)?,
        })
    }

    pub fn query(&self) -> &Tensor {
        &self.query
    }

    /// The cross-attention sublayer output (before its residual) for queries `x`.
    pub fn cross_attend(&self, x: &Tensor, slots: &Tensor, trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        let kv = self.norm_slots.forward(slots)?;
        self.cross_attn.forward(&self.norm_cross.forward(x)?, &kv, trace)
    }

    pub fn forward(&self, slots: &Tensor, mut trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        let (b, _, _) = slots.dims3()?;
        let mut x = batch_query(&self.query, b)?;
        let normed = self.norm_self.forward(&x)?;
        x = (&x + self.self_attn.forward(&normed, &normed, trace.as_deref_mut())?)?;
        x = (&x + self.cross_attend(&x, slots, trace)?)?;
        x = (&x + self.ffn.forward(&self.norm_ffn.forward(&x)?)?)?;
        self.proj.forward(&self.norm_out.forward(&x)?)
    }
}

/// Self-attention and an MLP over the K slots, then a single cross-attention
/// from the N positional queries into the refined slots. The queries never
/// attend to each other.
pub struct PerceiverDecoder {
    query: Tensor,
    norm_in: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_mid: LayerNorm,
    mlp: Mlp,
    norm_slots: LayerNorm,
    norm_query: LayerNorm,
    cross_attn: MultiHeadAttention,
}

impl PerceiverDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &DecoderDims) -> Result<Self> {
        let ds = dims.d_slot;
        let d = dims.hidden;
        Ok(PerceiverDecoder {
            query: ps.normal(&format!("{name}.query"), &[dims.positions(), d], 0.5)?,
            norm_in: LayerNorm::new(ps, &format!("{name}.norm_in"), ds)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), ds, ds, d, ds, dims.heads)?,
            norm_mid: LayerNorm::new(ps, &format!("{name}.norm_mid"), ds)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), ds, d, ds)?,
            norm_slots: LayerNorm::new(ps, &format!("{name}.norm_slots"), ds)?,
            norm_query: LayerNorm::new(ps, &format!("{name}.norm_query"), d)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), d, ds, d, dims.d_out, dims.heads)?,
        })
    }

    pub fn query(&self) -> &Tensor {
        &self.query
    }

    /// Slot refinement: norm, self-attention + residual, norm, MLP + residual, norm.
    pub fn refine_slots(&self, slots: &Tensor, trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        let s = self.norm_in.forward(slots)?;
        let s_hat = (self.self_attn.forward(&s, &s, trace)? + &s)?;
        let s_hat = self.norm_mid.forward(&s_hat)?;
        let s_tilde = (self.mlp.forward(&s_hat)? + &s_hat)?;
        self.norm_slots.forward(&s_tilde)
    }

    /// Cross-attention of (B, N, d) queries into already refined slots.
    pub fn read_out(&self, query: &Tensor, refined: &Tensor, trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        self.cross_attn
            .forward(&self.norm_query.forward(query)?, refined, trace)
    }

    pub fn forward(&self, slots: &Tensor, mut trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        let (b, _, _) = slots.dims3()?;
        let refined = self.refine_slots(slots, trace.as_deref_mut())?;
        self.read_out(&batch_query(&self.query, b)?, &refined, trace)
    }
}

pub enum SlotDecoder {
    Linear(LinearDecoder),
    Cnn(CnnDecoder),
    Transformer(TransformerDecoder),
    Perceiver(PerceiverDecoder),
}

impl SlotDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, kind: DecoderKind, dims: &DecoderDims) -> Result<Self> {
        Ok(match kind {
            DecoderKind::Linear => SlotDecoder::Linear(LinearDecoder::new(ps, name, dims)?),
            DecoderKind::Cnn => SlotDecoder::Cnn(CnnDecoder::new(ps, name, dims)?),
            DecoderKind::Transformer => SlotDecoder::Transformer(TransformerDecoder::new(ps, name, dims)?),
            DecoderKind::Perceiver => SlotDecoder::Perceiver(PerceiverDecoder::new(ps, name, dims)?),
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            SlotDecoder::Linear(_) => DecoderKind::Linear,
            SlotDecoder::Cnn(_) => DecoderKind::Cnn,
            SlotDecoder::Transformer(_) => DecoderKind::Transformer,
            SlotDecoder::Perceiver(_) => DecoderKind::Perceiver,
        }
    }

    /// `slots`: (B, K, d_slot); `attn`: (B, K, N) -> (B, N, d_out).
    pub fn forward(&self, slots: &Tensor, attn: &Tensor, trace: Option<&mut Vec<AttentionCall>>) -> Result<Tensor> {
        match self {
            SlotDecoder::Linear(d) => d.forward(slots, attn),
            SlotDecoder::Cnn(d) => d.forward(slots, attn),
            SlotDecoder::Transformer(d) => d.forward(slots, trace),
            SlotDecoder::Perceiver(d) => d.forward(slots, trace),
        }
    }
}
