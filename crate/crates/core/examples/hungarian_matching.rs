//! Matches motion masks to slot attention maps with the Hungarian algorithm
//! and shows the resulting motion loss.

use candle_core::{Device, Tensor};
use ndarray::array;
use objtok::slots::{bce_cost_matrix, match_slots, motion_loss, MotionMasks};

fn main() -> objtok::Result<()> {
    // Two moving objects on a 2x3 grid and three slots.
    let masks = MotionMasks::new(array![
        [1.0f32, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0, 1.0]
    ]);
    let attn = array![
        [0.1f32, 0.1, 0.8, 0.7, 0.1, 0.2],
        [0.1, 0.2, 0.1, 0.2, 0.8, 0.7],
        [0.8, 0.7, 0.1, 0.1, 0.1, 0.1],
    ];
    for (i, row) in bce_cost_matrix(masks.masks.view(), attn.view()).iter().enumerate() {
        let costs: Vec<String> = row.iter().map(|c| format!("{c:.3}")).collect();
        println!("mask {i} costs per slot: {}", costs.join(" "));
    }
    let assignment = match_slots(&masks, attn.view())?;
    println!("assignment (mask, slot): {:?}", assignment.pairs);

    let (k, n) = attn.dim();
    let w = Tensor::from_slice(attn.as_slice().expect("standard layout"), (k, n), &Device::Cpu)?;
    let loss = motion_loss(&masks, &w, &assignment)?.to_scalar::<f32>()?;
    println!("motion loss {loss:.4}");
    Ok(())
}
