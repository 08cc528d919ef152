//! Tokenizes a sprite frame with an untrained VQ-VAE and reports codebook usage
//! and the contrastive codebook penalty.

use candle_core::{DType, Device, Tensor};
use objtok::nn::ParamStore;
use objtok::reconspace::{contrastive_loss, quantize, usage_histogram, VqVae};
use objtok::synthdata::{generate_video, SceneConfig};

fn main() -> objtok::Result<()> {
    let video = generate_video(&SceneConfig::default())?;
    let (t, h, w, _) = video.frames.dim();
    let frames = Tensor::from_slice(
        video.frames.as_slice().expect("standard layout"),
        (t, h, w, 3),
        &Device::Cpu,
    )?
    .permute((0, 3, 1, 2))?
    .contiguous()?;

    let mut ps = ParamStore::new(0, DType::F32);
    let vq = VqVae::new(&mut ps, "vq", 3, 16, 8, 16)?;
    let (z_e, grid) = vq.encoder.forward(&frames)?;
    let q = quantize(&z_e, &vq.codebook)?;
    println!(
        "{t} frames -> {} tokens on a {}x{} grid per frame",
        q.indices.len(),
        grid.0,
        grid.1
    );
    println!("codebook usage: {:?}", usage_histogram(&q.indices, vq.codebook.size()));
    println!(
        "contrastive penalty {:.4}",
        contrastive_loss(vq.codebook.embeddings())?.to_scalar::<f32>()?
    );

    let ids = vq.tokens(&frames)?;
    for row in ids[0].rows() {
        let line: Vec<String> = row.iter().map(|i| format!("{i:2}")).collect();
        println!("{}", line.join(" "));
    }
    Ok(())
}
