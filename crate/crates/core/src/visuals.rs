//! Image panels: input frames, the largest foreground slot masks, token-id
//! maps (VQ spaces), and the model's reconstruction, one column per frame.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Array4};

use crate::backbone::STRIDE;
use crate::error::{Error, Result};
use crate::metrics::top_slots;
use crate::reconspace::ReconSpace;

const GAP: u32 = 2;
const GAP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

pub struct PanelInputs<'a> {
    /// (T, H, W, 3) RGB in [0, 1].
    pub frames: &'a Array4<f32>,
    /// (T, h, w) slot ids at feature resolution.
    pub slot_masks: &'a Array3<u32>,
    pub num_slots: usize,
    /// Per-frame token ids at image resolution.
    pub tokens: Option<&'a [Array2<u32>]>,
    /// (T, C, H, W) reconstruction in `space`.
    pub reconstruction: Option<(&'a Array4<f32>, ReconSpace)>,
    pub top_k: usize,
    pub max_mask_fraction: f64,
}

/// A distinct, deterministic color for id `i`.
pub fn palette(i: u32) -> Rgb<u8> {
    let hue = (i as f64 * 0.618_033_988_75).fract();
    let sector = hue * 6.0;
    let f = sector.fract();
    let (v, p, q, t) = (0.95, 0.25, 0.95 - 0.7 * f, 0.25 + 0.7 * f);
    let (r, g, b) = match sector as u32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn frame_pixel(frames: &Array4<f32>, t: usize, y: usize, x: usize) -> [f32; 3] {
    [frames[[t, y, x, 0]], frames[[t, y, x, 1]], frames[[t, y, x, 2]]]
}

/// Maps a (C, H, W) reconstruction to displayable RGB. RGB spaces are
/// clamped; other signals are min-max normalized per channel over the video.
fn reconstruction_rgb(recon: &Array4<f32>, space: ReconSpace) -> Array4<f32> {
    let (t, c, h, w) = recon.dim();
    let mut out = Array4::<f32>::zeros((t, h, w, 3));
    let rgb_like = matches!(space, ReconSpace::Rgb | ReconSpace::Vq);
    let ranges: Vec<(f32, f32)> = (0..c)
        .map(|ch| {
            let view = recon.slice(ndarray::s![.., ch, .., ..]);
            let lo = view.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = view.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            (lo, hi)
        })
        .collect();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                for o in 0..3 {
                    let ch = if c == 1 { 0 } else { o };
                    if ch >= c {
                        continue;
                    }
                    let v = recon[[ti, ch, y, x]];
                    out[[ti, y, x, o]] = if rgb_like {
                        v
                    } else {
                        let (lo, hi) = ranges[ch];
                        if hi > lo {
                            (v - lo) / (hi - lo)
                        } else {
                            0.5
                        }
                    };
                }
            }
        }
    }
    out
}

/// Renders the panel image.
pub fn render_panel(p: &PanelInputs) -> Result<RgbImage> {
    let (t, h, w, _) = p.frames.dim();
    let (mt, mh, mw) = p.slot_masks.dim();
    if mt != t || mh * STRIDE != h || mw * STRIDE != w {
        return Err(Error::Shape(format!(
            "slot masks {:?} do not match frames {:?}",
            p.slot_masks.dim(),
            p.frames.dim()
        )));
    }
    let slots = top_slots(p.slot_masks.view(), p.num_slots, p.top_k, p.max_mask_fraction);
    let recon = p.reconstruction.map(|(r, s)| reconstruction_rgb(r, s));
    let rows = 1 + slots.len() + usize::from(p.tokens.is_some()) + usize::from(recon.is_some());
    let width = t as u32 * (w as u32 + GAP) - GAP;
    let height = rows as u32 * (h as u32 + GAP) - GAP;
    let mut img = RgbImage::from_pixel(width.max(1), height.max(1), GAP_COLOR);

    let mut put_row = |row: usize, pixel: &dyn Fn(usize, usize, usize) -> Rgb<u8>| {
        for ti in 0..t {
            let ox = ti as u32 * (w as u32 + GAP);
            let oy = row as u32 * (h as u32 + GAP);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(ox + x as u32, oy + y as u32, pixel(ti, y, x));
                }
            }
        }
    };

    put_row(0, &|ti, y, x| {
        let c = frame_pixel(p.frames, ti, y, x);
        Rgb([to_byte(c[0]), to_byte(c[1]), to_byte(c[2])])
    });
    let mut row = 1;
    for &slot in &slots {
        let color = palette(slot as u32);
        put_row(row, &|ti, y, x| {
            let c = frame_pixel(p.frames, ti, y, x);
            let inside = p.slot_masks[[ti, y / STRIDE, x / STRIDE]] == slot as u32;
            let mix = |i: usize| {
                if inside {
                    to_byte(0.5 * c[i] + 0.5 * color.0[i] as f32 / 255.0)
                } else {
                    to_byte(0.25 * c[i])
                }
            };
            Rgb([mix(0), mix(1), mix(2)])
        });
        row += 1;
    }
    if let Some(tokens) = p.tokens {
        if tokens.len() != t || tokens.iter().any(|m| m.dim() != (h, w)) {
            return Err(Error::Shape("token maps do not match frames".into()));
        }
        put_row(row, &|ti, y, x| palette(tokens[ti][[y, x]]));
        row += 1;
    }
    if let Some(r) = &recon {
        if r.dim() != (t, h, w, 3) {
            return Err(Error::Shape("reconstruction does not match frames".into()));
        }
        put_row(row, &|ti, y, x| {
            Rgb([
                to_byte(r[[ti, y, x, 0]]),
                to_byte(r[[ti, y, x, 1]]),
                to_byte(r[[ti, y, x, 2]]),
            ])
        });
    }
    Ok(img)
}

pub fn panel_path(out_dir: &Path, video_id: &str) -> PathBuf {
    out_dir.join(format!("{video_id}_panel.png"))
}

/// Renders and writes `<out_dir>/<video_id>_panel.png`.
pub fn write_panel(p: &PanelInputs, out_dir: &Path, video_id: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let path = panel_path(out_dir, video_id);
    render_panel(p)?
        .save(&path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs<'a>(frames: &'a Array4<f32>, masks: &'a Array3<u32>) -> PanelInputs<'a> {
        PanelInputs {
            frames,
            slot_masks: masks,
            num_slots: 4,
            tokens: None,
            reconstruction: None,
            top_k: 10,
            max_mask_fraction: 0.2,
        }
    }

    fn masks() -> Array3<u32> {
        // 2 frames of 4x4 cells: slot 0 is background, slots 1 and 2 small.
        let mut m = Array3::<u32>::zeros((2, 4, 4));
        m[[0, 1, 1]] = 1;
        m[[1, 1, 2]] = 1;
        m[[0, 3, 3]] = 2;
        m[[1, 3, 3]] = 2;
        m[[1, 2, 3]] = 2;
        m
    }

    #[test]
    fn panel_rows_follow_contents() {
        let frames = Array4::<f32>::from_elem((2, 16, 16, 3), 0.5);
        let m = masks();
        let img = render_panel(&inputs(&frames, &m)).unwrap();
        // Input row plus slots 2 and 1; slot 0 covers too much to draw.
        assert_eq!(img.height(), 3 * 16 + 2 * GAP);
        assert_eq!(img.width(), 2 * 16 + GAP);

        let tokens = vec![Array2::<u32>::zeros((16, 16)); 2];
        let recon = Array4::<f32>::zeros((2, 2, 16, 16));
        let mut p = inputs(&frames, &m);
        p.tokens = Some(&tokens);
        p.reconstruction = Some((&recon, ReconSpace::Flow));
        p.top_k = 1;
        let img = render_panel(&p).unwrap();
        assert_eq!(img.height(), 4 * 16 + 3 * GAP);
    }

    #[test]
    fn writes_deterministic_file_name() {
        let frames = Array4::<f32>::from_elem((2, 16, 16, 3), 0.2);
        let m = masks();
        let dir = tempfile::tempdir().unwrap();
        let path = write_panel(&inputs(&frames, &m), dir.path(), "video_00003").unwrap();
        assert_eq!(path.file_name().unwrap(), "video_00003_panel.png");
        let first = std::fs::read(&path).unwrap();
        write_panel(&inputs(&frames, &m), dir.path(), "video_00003").unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn mismatched_masks_are_rejected() {
        let frames = Array4::<f32>::zeros((2, 12, 16, 3));
        let m = masks();
        assert!(matches!(render_panel(&inputs(&frames, &m)), Err(Error::Shape(_))));
    }

    #[test]
    fn palette_is_stable_and_varied() {
        assert_eq!(palette(3), palette(3));
        assert_ne!(palette(0), palette(1));
        assert_ne!(palette(1), palette(2));
    }
}
