//! Minimal layer kit on top of `candle_core`.
//!
//! Every learnable tensor lives in a [`ParamStore`] under a dotted name. Layers
//! hold clones of the store's tensors, which share storage with the backing
//! [`Var`]s, so optimizer updates made through the store are visible to the
//! layers without rebuilding them.
//!
//! Ops are composed from candle primitives with backward passes, except the
//! convolutions, which use a gather/scatter patch op pair defined here. Every
//! module can be checked against finite differences in `f64`.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named collection of trainable variables with seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(name, "parameter registered twice"));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform initialization on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 1.0)
    }

    /// Gaussian initialization with the given standard deviation (Box-Muller).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let u1: f64 = self.rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            values.push(std * r * (std::f64::consts::TAU * u2).cos());
            values.push(std * r * (std::f64::consts::TAU * u2).sin());
        }
        values.truncate(n);
        self.insert(name, values, shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = fan_in_bound(d_in);
        let weight = ps.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?;
        let bias = if bias {
            Some(ps.uniform(&format!("{name}.bias"), &[d_out], bound)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Linear { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, d_in))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// 2D convolution over NCHW inputs with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_in * kernel * kernel);
        let weight = ps.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Same-padding convolution with stride 1 (odd kernels).
    pub fn same(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(ps, name, c_in, c_out, kernel, 1, kernel / 2)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c_in, h, w) = x.dims4()?;
        let (c_out, wc, k, _) = self.weight.dims4()?;
        if wc != c_in {
            return Err(Error::Shape(format!("conv expects {wc} input channels, got {c_in}")));
        }
        let geom = PatchGeometry::conv(h, w, k, self.stride, self.padding);
        let y = patch_matmul(x, &self.weight.reshape((c_out, c_in * k * k))?, geom)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Marks a kernel tap that falls on padding or on a hole of a strided
/// transposed convolution.
const SKIP: u32 = u32::MAX;

/// Where each kernel tap of each output position reads from in a flattened
/// (H * W) input plane, tap-major.
struct PatchGeometry {
    indices: Vec<u32>,
    taps: usize,
    out_h: usize,
    out_w: usize,
}

impl PatchGeometry {
    fn conv(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Self {
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (w + 2 * padding - k) / stride + 1;
        let mut indices = Vec::with_capacity(k * k * out_h * out_w);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        indices.push(if inside {
                            (iy as usize * w + ix as usize) as u32
                        } else {
                            SKIP
                        });
                    }
                }
            }
        }
        PatchGeometry {
            indices,
            taps: k * k,
            out_h,
            out_w,
        }
    }

    /// Output `(oy, ox)` receives input `(iy, ix)` through tap `(ky, kx)` when
    /// `oy = iy * stride - padding + ky`.
    fn transposed(h: usize, w: usize, k: usize, stride: usize, padding: usize, output_padding: usize) -> Self {
        let out_h = (h - 1) * stride + k + output_padding - 2 * padding;
        let out_w = (w - 1) * stride + k + output_padding - 2 * padding;
        let source = |o: usize, kk: usize, n: usize| -> Option<usize> {
            let num = (o + padding) as isize - kk as isize;
            if num < 0 || num % stride as isize != 0 {
                return None;
            }
            let i = num as usize / stride;
            (i < n).then_some(i)
        };
        let mut indices = Vec::with_capacity(k * k * out_h * out_w);
        for ky in 0..k {
            for kx in 0..k {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        indices.push(match (source(oy, ky, h), source(ox, kx, w)) {
                            (Some(iy), Some(ix)) => (iy * w + ix) as u32,
                            _ => SKIP,
                        });
                    }
                }
            }
        }
        PatchGeometry {
            indices,
            taps: k * k,
            out_h,
            out_w,
        }
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Rearranges (B, C, H, W) into patch columns (C * taps, B * P) and back.
/// `Im2Col` gathers; `Col2Im` scatter-adds and is its adjoint, so each op is
/// the other's backward pass.
#[derive(Clone)]
struct PatchOp {
    geom: Arc<PatchGeometry>,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    plane: usize,
}

struct Im2Col(PatchOp);
struct Col2Im(PatchOp);

impl PatchOp {
    fn gather<T: Copy + Default>(&self, x: &[T]) -> Vec<T> {
        let (b, c, p, taps) = (self.batch, self.channels, self.geom.positions(), self.geom.taps);
        let mut out = vec![T::default(); c * taps * b * p];
        let mut o = 0;
        for ci in 0..c {
            for tap in self.geom.indices.chunks(p) {
                for n in 0..b {
                    let src = &x[(n * c + ci) * self.plane..(n * c + ci + 1) * self.plane];
                    for &i in tap {
                        if i != SKIP {
                            out[o] = src[i as usize];
                        }
                        o += 1;
                    }
                }
            }
        }
        debug_assert_eq!(o, out.len());
        out
    }

    fn scatter<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let (b, c, p) = (self.batch, self.channels, self.geom.positions());
        let mut out = vec![T::default(); b * c * self.plane];
        let mut o = 0;
        for ci in 0..c {
            for tap in self.geom.indices.chunks(p) {
                for n in 0..b {
                    let base = (n * c + ci) * self.plane;
                    for &i in tap {
                        if i != SKIP {
                            out[base + i as usize] += cols[o];
                        }
                        o += 1;
                    }
                }
            }
        }
        out
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("patch ops need contiguous inputs"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = &self.0;
        let shape = Shape::from((op.channels * op.geom.taps, op.batch * op.geom.positions()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(op.gather(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(op.gather(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0.clone()))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = &self.0;
        let shape = Shape::from((op.batch, op.channels, op.height, op.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(op.scatter(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(op.scatter(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0.clone()))?))
    }
}

/// Gathers kernel patches of `x` (B, C, H, W) and multiplies them by
/// `weight` (C_out, C * taps), giving (B, C_out, out_h, out_w).
fn patch_matmul(x: &Tensor, weight: &Tensor, geom: PatchGeometry) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let c_out = weight.dims()[0];
    let (out_h, out_w) = (geom.out_h, geom.out_w);
    let op = PatchOp {
        geom: Arc::new(geom),
        batch: b,
        channels: c,
        height: h,
        width: w,
        plane: h * w,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(op))?;
    let y = weight.matmul(&cols)?;
    Ok(y.reshape((c_out, b, out_h, out_w))?.transpose(0, 1)?.contiguous()?)
}

/// Transposed 2D convolution over NCHW inputs.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = fan_in_bound(c_out * kernel * kernel);
        let weight = ps.uniform(&format!("{name}.weight"), &[c_in, c_out, kernel, kernel], bound)?;
        let bias = ps.uniform(&format!("{name}.bias"), &[c_out], bound)?;
        // Output size is exactly `stride * input` for odd kernels.
        let padding = kernel / 2;
        let output_padding = stride - 1;
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c_in, h, w) = x.dims4()?;
        let (wc, c_out, k, _) = self.weight.dims4()?;
        if wc != c_in {
            return Err(Error::Shape(format!(
                "transposed conv expects {wc} input channels, got {c_in}"
            )));
        }
        let geom = PatchGeometry::transposed(h, w, k, self.stride, self.padding, self.output_padding);
        let weight = self.weight.transpose(0, 1)?.reshape((c_out, c_in * k * k))?;
        let y = patch_matmul(x, &weight, geom)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.ones(&format!("{name}.gamma"), &[dim])?,
            beta: ps.zeros(&format!("{name}.beta"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Numerically stable softmax along `dim`, built from differentiable primitives.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Tanh-approximate GELU. candle's fused op rounds the constants in its
/// backward pass, which is visible to gradient checks.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = ((x + ((x.sqr()? * x)? * 0.044715)?)? * c)?;
    Ok(((x * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mse between {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// One recorded attention call: how many query tokens attended over how many keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCall {
    pub queries: usize,
    pub keys: usize,
}

/// Multi-head scaled dot-product attention with separate q/k/v/output maps.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d_model: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("model width {d_model} not divisible by {heads} heads"),
            ));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d_query, d_model, false)?,
            k: Linear::new(ps, &format!("{name}.k"), d_kv, d_model, false)?,
            v: Linear::new(ps, &format!("{name}.v"), d_kv, d_model, false)?,
            out: Linear::new(ps, &format!("{name}.out"), d_model, d_out, true)?,
            heads,
            head_dim: d_model / heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `queries`: (B, Nq, d_query); `context`: (B, Nk, d_kv) -> (B, Nq, d_out).
    pub fn forward(
        &self,
        queries: &Tensor,
        context: &Tensor,
        trace: Option<&mut Vec<AttentionCall>>,
    ) -> Result<Tensor> {
        let (b, nq, _) = queries.dims3()?;
        let nk = context.dims()[1];
        if let Some(trace) = trace {
            trace.push(AttentionCall { queries: nq, keys: nk });
        }
        let q = self.split(&self.q.forward(queries)?)?;
        let k = self.split(&self.k.forward(context)?)?;
        let v = self.split(&self.v.forward(context)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = softmax(&logits, 3)?;
        let mixed = attn.matmul(&v)?;
        let merged = mixed.transpose(1, 2)?.reshape((b, nq, self.heads * self.head_dim))?;
        self.out.forward(&merged)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d_in, hidden, true)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d_out, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Fails with a numerical error if `t` holds any non-finite value.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let sum = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if sum.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite values in {what}")))
    }
}
