//! Renders a few sprite videos, writes them as a dataset directory, and reads
//! them back.
//!
//! ```text
//! cargo run --example generate_sprites -- /tmp/sprites
//! ```

use objtok::dataset::{read_dataset_with_ids, write_dataset};
use objtok::synthdata::{generate_dataset, SceneConfig};

fn main() -> objtok::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sprites".into());
    let scene = SceneConfig {
        seed: 7,
        ..Default::default()
    };
    let videos = generate_dataset(&scene, 4)?;
    write_dataset(&videos, out.as_ref())?;

    for (id, v) in read_dataset_with_ids(out.as_ref())? {
        let kinds: Vec<&str> = v.instance_kinds.iter().map(|k| k.name()).collect();
        let moving: Vec<usize> = v.motion_segments.iter().map(|m| m.dim().0).collect();
        println!(
            "{id}: {} frames of {}x{}, sprites {kinds:?}, moving per frame {moving:?}",
            v.num_frames(),
            v.height(),
            v.width()
        );
    }
    println!("dataset written to {out}");
    Ok(())
}
