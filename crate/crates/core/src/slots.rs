//! Recurrent slot attention and motion supervision.
//!
//! Each frame, the previous slots query the aggregated features once. The
//! attention map is normalized over the slot axis, so every position is
//! softly owned by the slots; slot vectors are the attention-weighted mean
//! of the value embeddings.
//!
//! Motion supervision matches each motion mask to one slot with the
//! Hungarian algorithm on a BCE cost, then applies BCE to matched slots only.

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::hungarian::min_cost_assignment;
use crate::nn::{ensure_finite, softmax, LayerNorm, Linear, ParamStore};

/// Probability clamp used by every BCE evaluation.
pub const BCE_EPS: f64 = 1e-6;

/// Added to the per-slot attention mass before the weighted-mean readout.
const READOUT_EPS: f64 = 1e-8;

/// Output of one slot update.
#[derive(Clone, Debug)]
pub struct SlotStep {
    /// (B, K, d_slot)
    pub slots: Tensor,
    /// (B, K, N), columns sum to one.
    pub attn: Tensor,
}

pub struct SlotAttention {
    initial: Tensor,
    norm_inputs: LayerNorm,
    norm_slots: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    num_slots: usize,
    d_slot: usize,
}

impl SlotAttention {
    pub fn new(ps: &mut ParamStore, name: &str, num_slots: usize, d_inp: usize, d_slot: usize) -> Result<Self> {
        if num_slots == 0 {
            return Err(Error::config("num_slots", "need at least one slot"));
        }
        Ok(SlotAttention {
            initial: ps.normal(&format!("{name}.initial"), &[num_slots, d_slot], 1.0)?,
            norm_inputs: LayerNorm::new(ps, &format!("{name}.norm_inputs"), d_inp)?,
            norm_slots: LayerNorm::new(ps, &format!("{name}.norm_slots"), d_slot)?,
            q: Linear::new(ps, &format!("{name}.q"), d_slot, d_slot, false)?,
            k: Linear::new(ps, &format!("{name}.k"), d_inp, d_slot, false)?,
            v: Linear::new(ps, &format!("{name}.v"), d_inp, d_slot, false)?,
            num_slots,
            d_slot,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn d_slot(&self) -> usize {
        self.d_slot
    }

    /// The learned initial state S^0, (K, d_slot).
    pub fn initial_state(&self) -> &Tensor {
        &self.initial
    }

    /// S^0 repeated over the batch, (B, K, d_slot).
    pub fn init_slots(&self, batch: usize) -> Result<Tensor> {
        Ok(self
            .initial
            .unsqueeze(0)?
            .broadcast_as((batch, self.num_slots, self.d_slot))?
            .contiguous()?)
    }

    /// Scaled dot-product logits q(S) k(H)^T / sqrt(d_slot), (B, K, N).
    pub fn logits(&self, prev: &Tensor, features: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(&self.norm_slots.forward(prev)?)?;
        let k = self.k.forward(&self.norm_inputs.forward(features)?)?;
        let scale = 1.0 / (self.d_slot as f64).sqrt();
        Ok((q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?)
    }

    /// One attention update. `prev`: (B, K, d_slot); `features`: (B, N, d_inp).
    pub fn step(&self, prev: &Tensor, features: &Tensor) -> Result<SlotStep> {
        let (b, k, d) = prev.dims3()?;
        let (bf, _, _) = features.dims3()?;
        if b != bf || k != self.num_slots || d != self.d_slot {
            return Err(Error::Shape(format!(
                "slots {:?} incompatible with features {:?}",
                prev.dims(),
                features.dims()
            )));
        }
        ensure_finite(features, "slot attention input")?;
        let attn = attention_from_logits(&self.logits(prev, features)?)?;
        let values = self.v.forward(&self.norm_inputs.forward(features)?)?;
        let slots = weighted_mean_readout(&attn, &values)?;
        Ok(SlotStep { slots, attn })
    }
}

/// Softmax over the slot axis (dim 1) of (B, K, N) logits.
pub fn attention_from_logits(logits: &Tensor) -> Result<Tensor> {
    softmax(logits, 1)
}

/// Renormalizes each slot's attention row to sum to one and reads out the
/// weighted mean of `values`: (B, K, N) x (B, N, d) -> (B, K, d).
pub fn weighted_mean_readout(attn: &Tensor, values: &Tensor) -> Result<Tensor> {
    let mass = (attn.sum_keepdim(2)? + READOUT_EPS)?;
    let weights = attn.broadcast_div(&mass)?;
    Ok(weights.matmul(values)?)
}

/// Motion masks of one frame at feature resolution: C x N values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMasks {
    pub masks: Array2<f32>,
}

impl MotionMasks {
    pub fn new(masks: Array2<f32>) -> Self {
        MotionMasks { masks }
    }

    pub fn empty(positions: usize) -> Self {
        MotionMasks {
            masks: Array2::zeros((0, positions)),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.nrows() == 0
    }

    /// Keeps the `max` largest-area masks (stable on ties), preserving their original order.
    pub fn truncated(&self, max: usize) -> MotionMasks {
        if self.len() <= max {
            return self.clone();
        }
        log::warn!(
            "{} motion masks exceed {} slots; dropping the smallest",
            self.len(),
            max
        );
        let areas: Vec<f32> = self.masks.rows().into_iter().map(|r| r.sum()).collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| areas[b].total_cmp(&areas[a]).then(a.cmp(&b)));
        let mut keep: Vec<usize> = order.into_iter().take(max).collect();
        keep.sort_unstable();
        MotionMasks {
            masks: self.masks.select(ndarray::Axis(0), &keep),
        }
    }
}

/// Injective map from mask index to slot index.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(mask, slot)` pairs, sorted by mask index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn bce_clamped(target: f64, p: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Mean-over-positions BCE between every mask (C x N) and every slot row (K x N).
pub fn bce_cost_matrix(masks: ArrayView2<f32>, attn: ArrayView2<f32>) -> Vec<Vec<f64>> {
    masks
        .rows()
        .into_iter()
        .map(|m| {
            attn.rows()
                .into_iter()
                .map(|w| {
                    let n = m.len() as f64;
                    m.iter()
                        .zip(w.iter())
                        .map(|(&y, &p)| bce_clamped(y as f64, p as f64))
                        .sum::<f64>()
                        / n
                })
                .collect()
        })
        .collect()
}

/// Lowest-cost injective assignment of masks to slots under the BCE cost.
///
/// `attn` is one frame's attention map (K x N). If there are more masks than
/// slots, the smallest masks are dropped first; the returned pairs then index
/// into `masks.truncated(K)`.
pub fn match_slots(masks: &MotionMasks, attn: ArrayView2<f32>) -> Result<Assignment> {
    let (k, n) = attn.dim();
    if masks.masks.ncols() != n {
        return Err(Error::Shape(format!(
            "masks have {} positions, attention has {n}",
            masks.masks.ncols()
        )));
    }
    let masks = masks.truncated(k);
    if masks.is_empty() {
        return Ok(Assignment::default());
    }
    let cost = bce_cost_matrix(masks.masks.view(), attn);
    let cols = min_cost_assignment(&cost);
    Ok(Assignment {
        pairs: cols.into_iter().enumerate().collect(),
    })
}

/// Per-row mean BCE between `targets` and clamped `probs`, both (P, N) -> (P).
pub fn bce_rows(targets: &Tensor, probs: &Tensor) -> Result<Tensor> {
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (targets * p.log()?)?;
    let neg = ((targets.ones_like()? - targets)? * (p.ones_like()? - &p)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean(1)?)
}

/// Motion loss for one frame: sum over matched masks of the mean BCE between
/// the mask and its slot's attention row. `attn` is (K, N).
pub fn motion_loss(masks: &MotionMasks, attn: &Tensor, assignment: &Assignment) -> Result<Tensor> {
    let (k, n) = attn.dims2()?;
    if assignment.is_empty() {
        return Ok(Tensor::zeros((), attn.dtype(), attn.device())?);
    }
    let masks = masks.truncated(k);
    let (mask_idx, slot_idx): (Vec<u32>, Vec<u32>) =
        assignment.pairs.iter().map(|&(m, s)| (m as u32, s as u32)).unzip();
    if mask_idx.iter().any(|&m| m as usize >= masks.len()) || slot_idx.iter().any(|&s| s as usize >= k) {
        return Err(Error::Shape("assignment out of range".into()));
    }
    let selected = masks.masks.select(
        ndarray::Axis(0),
        &mask_idx.iter().map(|&m| m as usize).collect::<Vec<_>>(),
    );
    let targets = Tensor::from_iter(selected.iter().copied(), attn.device())?
        .reshape((mask_idx.len(), n))?
        .to_dtype(attn.dtype())?;
    let index = Tensor::new(slot_idx.as_slice(), attn.device())?;
    let rows = attn.index_select(&index, 0)?;
    Ok(bce_rows(&targets, &rows)?.sum_all()?)
}

/// Motion loss over a batch of clips.
///
/// `attn`: per frame t, a (B, K, N) attention tensor. `masks[b][t]` are the
/// motion masks of sample `b` at frame `t`. Matching runs per frame on detached
/// values; the loss is the sum of matched BCE terms averaged over the frames
/// that have at least one mask. Returns zero when no frame has masks.
pub fn clip_motion_loss(attn: &[Tensor], masks: &[Vec<MotionMasks>]) -> Result<Tensor> {
    let t_len = attn.len();
    let first = attn
        .first()
        .ok_or_else(|| Error::Shape("empty attention sequence".into()))?;
    let (b, k, n) = first.dims3()?;
    if masks.len() != b || masks.iter().any(|m| m.len() != t_len) {
        return Err(Error::Shape("motion masks do not match the clip layout".into()));
    }

    // (T, B, K, N) flattened to rows, detached copy for matching.
    let stacked = Tensor::stack(attn, 0)?;
    let values = stacked.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut row_index: Vec<u32> = Vec::new();
    let mut targets: Vec<f32> = Vec::new();
    let mut nonempty_frames = 0usize;
    for (bi, sample) in masks.iter().enumerate() {
        for (t, frame_masks) in sample.iter().enumerate() {
            if frame_masks.is_empty() {
                continue;
            }
            if frame_masks.masks.ncols() != n {
                return Err(Error::Shape("motion mask resolution differs from attention".into()));
            }
            nonempty_frames += 1;
            let base = (t * b + bi) * k;
            let frame_attn = ArrayView2::from_shape((k, n), &values[base * n..(base + k) * n])
                .map_err(|e| Error::Shape(e.to_string()))?;
            let kept = frame_masks.truncated(k);
            let assignment = match_slots(&kept, frame_attn)?;
            for (m, s) in assignment.pairs {
                row_index.push((base + s) as u32);
                targets.extend(kept.masks.row(m).iter().copied());
            }
        }
    }
    if nonempty_frames == 0 {
        return Ok(Tensor::zeros((), first.dtype(), first.device())?);
    }
    let rows = stacked
        .reshape((t_len * b * k, n))?
        .index_select(&Tensor::new(row_index.as_slice(), first.device())?, 0)?;
    let targets = Tensor::from_vec(targets, (row_index.len(), n), first.device())?.to_dtype(first.dtype())?;
    Ok((bce_rows(&targets, &rows)?.sum_all()? / nonempty_frames as f64)?)
}
