//! Reconstruction spaces: pixel targets (RGB, flow, depth) decoded by a
//! transposed-conv head, or a vector-quantized token space learned by a
//! small VQ-VAE that the slot features are aligned to.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mse, softmax, Conv2d, ConvTranspose2d, ParamStore};
use crate::synthdata::VideoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconSpace {
    Rgb,
    Flow,
    Depth,
    FlowDepth,
    Vq,
    VqFlow,
}

impl ReconSpace {
    pub const ALL: [ReconSpace; 6] = [
        ReconSpace::Rgb,
        ReconSpace::Flow,
        ReconSpace::Depth,
        ReconSpace::FlowDepth,
        ReconSpace::Vq,
        ReconSpace::VqFlow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReconSpace::Rgb => "rgb",
            ReconSpace::Flow => "flow",
            ReconSpace::Depth => "depth",
            ReconSpace::FlowDepth => "flow_depth",
            ReconSpace::Vq => "vq",
            ReconSpace::VqFlow => "vq_flow",
        }
    }

    pub fn is_vq(self) -> bool {
        matches!(self, ReconSpace::Vq | ReconSpace::VqFlow)
    }

    /// Channels of the per-frame signal: the pixel target, or the VQ-VAE input.
    pub fn channels(self) -> usize {
        match self {
            ReconSpace::Rgb | ReconSpace::Vq | ReconSpace::FlowDepth => 3,
            ReconSpace::Flow | ReconSpace::VqFlow => 2,
            ReconSpace::Depth => 1,
        }
    }
}

impl std::fmt::Display for ReconSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The per-frame signal of `space` for every frame of `sample`, as (T, C, H, W).
pub fn space_signal(sample: &VideoSample, space: ReconSpace) -> Array4<f32> {
    let rgb = || sample.frames.clone().permuted_axes([0, 3, 1, 2]);
    let flow = || sample.flow.clone().permuted_axes([0, 3, 1, 2]);
    let depth = || sample.depth.clone().insert_axis(Axis(1));
    let out = match space {
        ReconSpace::Rgb | ReconSpace::Vq => rgb(),
        ReconSpace::Flow | ReconSpace::VqFlow => flow(),
        ReconSpace::Depth => depth(),
        ReconSpace::FlowDepth => {
            ndarray::concatenate(Axis(1), &[flow().view(), depth().view()]).expect("flow and depth share T, H, W")
        }
    };
    out.as_standard_layout().to_owned()
}

fn grid_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = x.dims4()?;
    Ok(x.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn tokens_to_grid(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if n != grid.0 * grid.1 {
        return Err(Error::Shape(format!("{n} tokens do not form a {grid:?} grid")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, d, grid.0, grid.1))?)
}

/// Learnable token embeddings, `M x d_vq`.
pub struct Codebook {
    embeddings: Tensor,
}

impl Codebook {
    pub fn new(ps: &mut ParamStore, name: &str, size: usize, dim: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("codebook_size", "must be at least 1"));
        }
        let bound = 1.0 / size as f64;
        Ok(Codebook {
            embeddings: ps.uniform(&format!("{name}.embeddings"), &[size, dim], bound)?,
        })
    }

    pub fn from_tensor(embeddings: Tensor) -> Result<Self> {
        let (m, _) = embeddings.dims2()?;
        if m == 0 {
            return Err(Error::config("codebook_size", "must be at least 1"));
        }
        Ok(Codebook { embeddings })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn size(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dims()[1]
    }
}

/// Index of the nearest row of `codes` (row-major, `dim` wide) for every row
/// of `points`, by squared L2 distance. Ties go to the lowest index.
pub fn nearest_codes(points: &[f64], codes: &[f64], dim: usize) -> Vec<u32> {
    assert!(dim > 0 && !codes.is_empty());
    points
        .chunks_exact(dim)
        .map(|p| {
            let mut best = (0u32, f64::INFINITY);
            for (j, c) in codes.chunks_exact(dim).enumerate() {
                let dist: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j as u32, dist);
                }
            }
            best.0
        })
        .collect()
}

pub struct Quantized {
    /// Encoder output, (B, N, d_vq).
    pub z_e: Tensor,
    /// Selected codebook rows, (B, N, d_vq); gradients flow to the codebook.
    pub z_q: Tensor,
    /// `z_e + sg[z_q - z_e]`: the value of `z_q` with the gradient of `z_e`.
    pub straight_through: Tensor,
    /// Token ids, `B * N` in row-major order.
    pub indices: Vec<u32>,
}

/// Nearest-neighbour quantization of `z_e` (B, N, d_vq) against `codebook`.
pub fn quantize(z_e: &Tensor, codebook: &Codebook) -> Result<Quantized> {
    let (b, n, d) = z_e.dims3()?;
    if d != codebook.dim() {
        return Err(Error::config(
            "d_vq",
            format!(
                "encoder gives {d} channels but the codebook holds {}-d codes",
                codebook.dim()
            ),
        ));
    }
    let points = z_e.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let codes = codebook
        .embeddings
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    let indices = nearest_codes(&points, &codes, d);
    let ids = Tensor::from_slice(&indices, indices.len(), z_e.device())?;
    let z_q = codebook.embeddings.index_select(&ids, 0)?.reshape((b, n, d))?;
    let straight_through = (z_e + (&z_q - z_e)?.detach())?;
    Ok(Quantized {
        z_e: z_e.clone(),
        z_q,
        straight_through,
        indices,
    })
}

/// How many times each of the `m` tokens was selected.
pub fn usage_histogram(indices: &[u32], m: usize) -> Vec<usize> {
    let mut counts = vec![0usize; m];
    for &i in indices {
        counts[i as usize] += 1;
    }
    counts
}

/// Two stride-2 convolutions and a 1x1 projection: (B, C, H, W) -> (B, d_vq, H/4, W/4).
pub struct VqEncoder {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Conv2d,
}

impl VqEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, hidden: usize, d_vq: usize) -> Result<Self> {
        Ok(VqEncoder {
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, hidden, 3, 2, 1)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), hidden, hidden, 3, 2, 1)?,
            proj: Conv2d::new(ps, &format!("{name}.proj"), hidden, d_vq, 1, 1, 0)?,
        })
    }

    /// Returns `z_e` as tokens (B, N, d_vq) together with the grid (h, w).
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (_, c, h, w) = image.dims4()?;
        let c_in = self.conv1.weight().dims()[1];
        if c != c_in || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "VQ encoder expects {c_in} channels and sides divisible by 4, got {:?}",
                image.dims()
            )));
        }
        let x = self.conv1.forward(image)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let z = self.proj.forward(&x)?;
        let (_, _, hq, wq) = z.dims4()?;
        Ok((grid_to_tokens(&z)?, (hq, wq)))
    }
}

/// Mirror of [`VqEncoder`]: (B, N, d_vq) tokens on an (h, w) grid -> (B, C, 4h, 4w).
pub struct VqDecoder {
    proj: Conv2d,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl VqDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, d_vq: usize, hidden: usize, c_out: usize) -> Result<Self> {
        Ok(VqDecoder {
            proj: Conv2d::new(ps, &format!("{name}.proj"), d_vq, hidden, 1, 1, 0)?,
            up1: ConvTranspose2d::new(ps, &format!("{name}.up1"), hidden, hidden, 3, 2)?,
            up2: ConvTranspose2d::new(ps, &format!("{name}.up2"), hidden, c_out, 3, 2)?,
        })
    }

    pub fn forward(&self, z_q: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let x = self.proj.forward(&tokens_to_grid(z_q, grid)?)?.relu()?;
        let x = self.up1.forward(&x)?.relu()?;
        self.up2.forward(&x)
    }
}

pub struct VqVae {
    pub encoder: VqEncoder,
    pub codebook: Codebook,
    pub decoder: VqDecoder,
}

pub struct VqOutput {
    pub quantized: Quantized,
    pub grid: (usize, usize),
    pub reconstruction: Tensor,
}

impl VqVae {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, hidden: usize, size: usize, d_vq: usize) -> Result<Self> {
        Ok(VqVae {
            encoder: VqEncoder::new(ps, &format!("{name}.encoder"), c_in, hidden, d_vq)?,
            codebook: Codebook::new(ps, &format!("{name}.codebook"), size, d_vq)?,
            decoder: VqDecoder::new(ps, &format!("{name}.decoder"), d_vq, hidden, c_in)?,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<VqOutput> {
        let (z_e, grid) = self.encoder.forward(image)?;
        let quantized = quantize(&z_e, &self.codebook)?;
        let reconstruction = self.decoder.forward(&quantized.straight_through, grid)?;
        Ok(VqOutput {
            quantized,
            grid,
            reconstruction,
        })
    }

    /// Token ids for each image, (B, h, w).
    pub fn tokens(&self, image: &Tensor) -> Result<Vec<Array2<u32>>> {
        let (z_e, (h, w)) = self.encoder.forward(image)?;
        let q = quantize(&z_e, &self.codebook)?;
        Ok(q.indices
            .chunks_exact(h * w)
            .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk is h*w"))
            .collect())
    }
}

/// `MSE(image, recon) + MSE(sg[z_e], z_q) + MSE(sg[z_q], z_e)`.
pub fn vqvae_loss(image: &Tensor, z_e: &Tensor, z_q: &Tensor, reconstruction: &Tensor) -> Result<Tensor> {
    let recon = mse(image, reconstruction)?;
    let codebook = mse(&z_e.detach(), z_q)?;
    let commit = mse(&z_q.detach(), z_e)?;
    Ok(((recon + codebook)? + commit)?)
}

/// `MSE(sg[F], z_q) + MSE(sg[z_q], F)`: pulls codes toward slot features and
/// slot features toward codes.
pub fn vq_align_loss(features: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    if features.dims() != z_q.dims() {
        return Err(Error::Shape(format!(
            "features {:?} and tokens {:?} differ",
            features.dims(),
            z_q.dims()
        )));
    }
    Ok((mse(&features.detach(), z_q)? + mse(&z_q.detach(), features)?)?)
}

/// `||I - softmax_rows(E E^T)||_F`.
pub fn contrastive_loss(codebook: &Tensor) -> Result<Tensor> {
    let (m, _) = codebook.dims2()?;
    if m == 1 {
        // The only entry of the softmax is 1, and sqrt has no derivative at 0.
        return Ok(Tensor::zeros((), codebook.dtype(), codebook.device())?);
    }
    let gram = codebook.matmul(&codebook.t()?)?;
    let p = softmax(&gram, 1)?;
    let eye = Tensor::eye(m, codebook.dtype(), codebook.device())?;
    Ok((eye - p)?.sqr()?.sum_all()?.sqrt()?)
}

/// Six transposed convolutions (kernels 5,5,5,5,5,3; strides 2,1,1,2,1,1)
/// from the slot feature grid up to the target resolution.
pub struct PixelHead {
    layers: Vec<ConvTranspose2d>,
    grid: (usize, usize),
}

impl PixelHead {
    pub const KERNELS: [usize; 6] = [5, 5, 5, 5, 5, 3];
    pub const STRIDES: [usize; 6] = [2, 1, 1, 2, 1, 1];

    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        c_out: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(6);
        for (i, (&k, &s)) in Self::KERNELS.iter().zip(&Self::STRIDES).enumerate() {
            let ci = if i == 0 { d_in } else { hidden };
            let co = if i == 5 { c_out } else { hidden };
            layers.push(ConvTranspose2d::new(ps, &format!("{name}.layer{i}"), ci, co, k, s)?);
        }
        Ok(PixelHead { layers, grid })
    }

    /// (B, N, d_in) features -> (B, C, 4h, 4w).
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = tokens_to_grid(features, self.grid)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x)?;
            if i != last {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

pub fn pixel_recon_loss(prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    if prediction.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match target {:?}",
            prediction.dims(),
            target.dims()
        )));
    }
    mse(prediction, target)
}

/// Nearest-neighbour upsampling of a token-id map by an integer factor.
pub fn upsample_ids(ids: &Array2<u32>, factor: usize) -> Array2<u32> {
    let (h, w) = ids.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(i, j)| ids[[i / factor, j / factor]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_vars;
    use crate::synthdata::{generate_video, SceneConfig};
    use candle_core::{Device, Var};

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64)
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn codebook(rows: &[&[f64]]) -> Codebook {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::from_tensor(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()).unwrap()
    }

    fn point(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, v.len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let e = codebook(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let q = quantize(&point(&[0.4, 0.4]), &e).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.z_q.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
        assert_eq!(quantize(&point(&[0.5, 0.5]), &e).unwrap().indices, vec![0]);

        let e = codebook(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, 0.0], &[-1.0, 3.0]]);
        let q = quantize(&point(&[-1.0, 3.0]), &e).unwrap();
        assert_eq!(q.indices, vec![3]);
        assert_eq!(q.z_q.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![-1.0, 3.0]);
    }

    #[test]
    fn empty_codebook_is_a_config_error() {
        let mut ps = ParamStore::new(0, DType::F32);
        assert!(matches!(Codebook::new(&mut ps, "cb", 0, 4), Err(Error::Config { .. })));
        let empty = Tensor::zeros((0, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(Codebook::from_tensor(empty), Err(Error::Config { .. })));
    }

    #[test]
    fn straight_through_copies_gradients() {
        let e = codebook(&[&[0.0, 0.0], &[1.0, 1.0], &[2.0, -1.0]]);
        let z = Var::from_tensor(&Tensor::new(&[[[0.3f64, 0.9], [1.7, -0.4]]], &Device::Cpu).unwrap()).unwrap();
        let q = quantize(z.as_tensor(), &e).unwrap();
        let weights = Tensor::new(&[[[1.0f64, -2.0], [0.5, 3.0]]], &Device::Cpu).unwrap();
        // L(z_q) = sum(w * z_q^2) so dL/dz_q = 2 w z_q.
        let loss = (q.straight_through.sqr().unwrap() * &weights)
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let gz = grads
            .get(z.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let zq = q.z_q.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let w = weights.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..4 {
            assert!((gz[i] - 2.0 * w[i] * zq[i]).abs() < 1e-12);
        }
        let st = q.straight_through.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(st, zq);
    }

    #[test]
    fn vqvae_loss_examples() {
        let dev = Device::Cpu;
        let img = Tensor::rand(0f64, 1., (1, 3, 4, 4), &dev).unwrap();
        let z = Tensor::new(&[[[0.5f64, -0.5]]], &dev).unwrap();
        assert_eq!(scalar(&vqvae_loss(&img, &z, &z, &img).unwrap()), 0.0);
        let one = Tensor::new(&[[[1.0f64]]], &dev).unwrap();
        let zero = Tensor::new(&[[[0.0f64]]], &dev).unwrap();
        assert_eq!(scalar(&vqvae_loss(&img, &one, &zero, &img).unwrap()), 2.0);
    }

    #[test]
    fn codebook_term_gives_no_gradient_to_encoder() {
        let dev = Device::Cpu;
        let z_e = Var::from_tensor(&Tensor::new(&[[[1.0f64, 2.0]]], &dev).unwrap()).unwrap();
        let z_q = Var::from_tensor(&Tensor::new(&[[[0.0f64, 0.5]]], &dev).unwrap()).unwrap();
        let codebook_term = mse(&z_e.as_tensor().detach(), z_q.as_tensor()).unwrap();
        let grads = codebook_term.backward().unwrap();
        assert!(grads.get(z_e.as_tensor()).is_none());
        assert!(grads.get(z_q.as_tensor()).is_some());
    }

    #[test]
    fn align_loss_examples_and_gradient_routing() {
        let dev = Device::Cpu;
        let f = Var::from_tensor(&Tensor::new(&[[[2.0f64]]], &dev).unwrap()).unwrap();
        let zq = Var::from_tensor(&Tensor::new(&[[[0.0f64]]], &dev).unwrap()).unwrap();
        let loss = vq_align_loss(f.as_tensor(), zq.as_tensor()).unwrap();
        assert_eq!(scalar(&loss), 8.0);
        assert_eq!(scalar(&vq_align_loss(f.as_tensor(), f.as_tensor()).unwrap()), 0.0);
        let grads = loss.backward().unwrap();
        // Each side sees only its own term: d/dF (F - sg[z_q])^2 = 2 (F - z_q) = 4.
        assert_eq!(scalar(grads.get(f.as_tensor()).unwrap()), 4.0);
        assert_eq!(scalar(grads.get(zq.as_tensor()).unwrap()), -4.0);
    }

    #[test]
    fn contrastive_examples() {
        let dev = Device::Cpu;
        let single = Tensor::new(&[[0.3f64, -0.2]], &dev).unwrap();
        assert_eq!(scalar(&contrastive_loss(&single).unwrap()), 0.0);

        let ortho = Tensor::new(&[[1.0f64, 0.0], [0.0, 1.0]], &dev).unwrap();
        let off = 1.0 / (std::f64::consts::E + 1.0);
        let expected = (4.0 * off * off).sqrt();
        let got = scalar(&contrastive_loss(&ortho).unwrap());
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.5379).abs() < 1e-4);

        let dup = Tensor::new(&[[1.0f64, 0.0], [1.0, 0.0]], &dev).unwrap();
        assert!(scalar(&contrastive_loss(&dup).unwrap()) > got);
    }

    #[test]
    fn contrastive_step_from_duplicates_decreases_loss() {
        let dev = Device::Cpu;
        let e = Var::from_tensor(&Tensor::new(&[[1.0f64, 0.2], [1.0, 0.2], [0.1, 0.9]], &dev).unwrap()).unwrap();
        let before = contrastive_loss(e.as_tensor()).unwrap();
        let g = before.backward().unwrap();
        let grad = g.get(e.as_tensor()).unwrap();
        e.set(&(e.as_tensor() - (grad * 0.05).unwrap()).unwrap()).unwrap();
        let after = contrastive_loss(e.as_tensor()).unwrap();
        assert!(scalar(&after) < scalar(&before));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let dev = Device::Cpu;
        let var = |shape: &[usize]| Var::from_tensor(&Tensor::rand(-1f64, 1., shape, &dev).unwrap()).unwrap();
        let (img, rec, ze, zq, f, e) = (
            var(&[1, 2, 2, 2]),
            var(&[1, 2, 2, 2]),
            var(&[1, 3, 2]),
            var(&[1, 3, 2]),
            var(&[1, 3, 2]),
            var(&[4, 3]),
        );
        let pixels = vec![("image".to_string(), img.clone()), ("recon".to_string(), rec.clone())];
        let r = check_vars(
            &pixels,
            || vqvae_loss(img.as_tensor(), ze.as_tensor(), zq.as_tensor(), rec.as_tensor()),
            1e-6,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        // z_e and z_q each receive only their own stop-gradient term.
        let full = vqvae_loss(img.as_tensor(), ze.as_tensor(), zq.as_tensor(), rec.as_tensor())
            .unwrap()
            .backward()
            .unwrap();
        let commit = mse(&zq.as_tensor().detach(), ze.as_tensor())
            .unwrap()
            .backward()
            .unwrap();
        let diff = (full.get(ze.as_tensor()).unwrap() - commit.get(ze.as_tensor()).unwrap()).unwrap();
        assert_eq!(scalar(&diff.abs().unwrap()), 0.0);
        let r = check_vars(
            &[("z_e".to_string(), ze.clone())],
            || mse(&zq.as_tensor().detach(), ze.as_tensor()),
            1e-6,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = check_vars(
            &[("z_q".to_string(), zq.clone())],
            || mse(&ze.as_tensor().detach(), zq.as_tensor()),
            1e-6,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let vars = [("f".to_string(), f.clone()), ("z_q".to_string(), zq.clone())];
        // With stop-gradients the analytic gradient is half the total derivative,
        // so check each routed term separately against finite differences.
        let r = check_vars(&vars[..1], || mse(&zq.as_tensor().detach(), f.as_tensor()), 1e-6, 64).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = check_vars(&vars[1..], || mse(&f.as_tensor().detach(), zq.as_tensor()), 1e-6, 64).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = check_vars(
            &[("e".to_string(), e.clone())],
            || contrastive_loss(e.as_tensor()),
            1e-6,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn vq_shapes_and_zero_weights() {
        let mut ps = ParamStore::new(1, DType::F32);
        let vq = VqVae::new(&mut ps, "vq", 3, 8, 16, 6).unwrap();
        let img = Tensor::rand(0f32, 1., (2, 3, 64, 64), &Device::Cpu).unwrap();
        let out = vq.forward(&img).unwrap();
        assert_eq!(out.grid, (16, 16));
        assert_eq!(out.quantized.z_e.dims(), &[2, 256, 6]);
        assert_eq!(out.reconstruction.dims(), img.dims());
        assert!(out.quantized.indices.iter().all(|&i| i < 16));
        let again = vq.forward(&img).unwrap();
        assert_eq!(out.quantized.indices, again.quantized.indices);
        assert!(matches!(
            vq.encoder.forward(&img.narrow(1, 0, 2).unwrap()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            vq.encoder.forward(&img.narrow(2, 0, 30).unwrap()),
            Err(Error::Shape(_))
        ));

        for (name, v) in ps.iter() {
            if name.starts_with("vq.decoder") && name.ends_with("weight") || name.starts_with("vq.encoder") {
                v.set(&v.zeros_like().unwrap()).unwrap();
            }
        }
        ps.get("vq.decoder.up2.bias")
            .unwrap()
            .set(&Tensor::new(&[0.25f32, -1.0, 2.0], &Device::Cpu).unwrap())
            .unwrap();
        let zeros = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let (z_e, _) = vq.encoder.forward(&zeros).unwrap();
        assert_eq!(z_e.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let rec = vq.forward(&zeros).unwrap().reconstruction;
        let per_channel = rec
            .flatten_from(2)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        for (c, want) in [0.25f32, -1.0, 2.0].iter().enumerate() {
            assert!(per_channel[c].iter().all(|v| v == want));
        }
    }

    #[test]
    fn pixel_head_upsamples_by_four() {
        let mut ps = ParamStore::new(2, DType::F32);
        let head = PixelHead::new(&mut ps, "head", 5, 4, 2, (3, 4)).unwrap();
        let f = Tensor::rand(-1f32, 1., (2, 12, 5), &Device::Cpu).unwrap();
        assert_eq!(head.forward(&f).unwrap().dims(), &[2, 2, 12, 16]);
    }

    #[test]
    fn pixel_loss_examples() {
        let dev = Device::Cpu;
        let t = Tensor::rand(0f32, 1., (1, 3, 4, 4), &dev).unwrap();
        assert_eq!(scalar(&pixel_recon_loss(&t, &t).unwrap()), 0.0);
        let zeros = t.zeros_like().unwrap();
        let ones = t.ones_like().unwrap();
        assert_eq!(scalar(&pixel_recon_loss(&zeros, &ones).unwrap()), 1.0);
        assert!(matches!(
            pixel_recon_loss(&t, &t.narrow(1, 0, 2).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn space_signals_have_expected_channels() {
        let s = generate_video(&SceneConfig::default()).unwrap();
        for space in ReconSpace::ALL {
            let sig = space_signal(&s, space);
            assert_eq!(
                sig.dim(),
                (s.num_frames(), space.channels(), s.height(), s.width()),
                "{space}"
            );
        }
        let fd = space_signal(&s, ReconSpace::FlowDepth);
        assert_eq!(fd[[1, 2, 5, 7]], s.depth[[1, 5, 7]]);
        assert_eq!(fd[[1, 1, 5, 7]], s.flow[[1, 5, 7, 1]]);
    }

    #[test]
    fn upsample_and_histogram() {
        let ids = Array2::from_shape_vec((1, 2), vec![3u32, 1]).unwrap();
        let up = upsample_ids(&ids, 2);
        assert_eq!(
            up,
            Array2::from_shape_vec((2, 4), vec![3, 3, 1, 1, 3, 3, 1, 1]).unwrap()
        );
        assert_eq!(usage_histogram(&[3, 1, 1], 4), vec![0, 2, 0, 1]);
    }
}
