//! Segmentation metrics: slot-mask extraction, foreground ARI, and cluster purity.

use std::collections::HashMap;
use std::hash::Hash;

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Instances covering at most this fraction of the first frame are dropped
/// when the area filter is on.
pub const MIN_INSTANCE_AREA: f64 = 0.005;

/// Argmax over slots for every position of every frame; ties go to the
/// lowest slot index. Each map is K x (h * w); the result is T x h x w.
pub fn extract_slot_masks(attn: &[Array2<f32>], grid: (usize, usize)) -> Result<Array3<u32>> {
    let (h, w) = grid;
    let mut out = Array3::<u32>::zeros((attn.len(), h, w));
    for (t, a) in attn.iter().enumerate() {
        if a.ncols() != h * w {
            return Err(Error::Shape(format!(
                "attention has {} positions, grid is {h}x{w}",
                a.ncols()
            )));
        }
        for (pos, col) in a.axis_iter(Axis(1)).enumerate() {
            let mut best = 0usize;
            for (k, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = k;
                }
            }
            out[[t, pos / w, pos % w]] = best as u32;
        }
    }
    Ok(out)
}

/// Nearest-neighbour downsampling of label maps: output cell (i, j) takes the
/// input pixel at (i * f + f / 2, j * f + f / 2).
pub fn downsample_labels(labels: ArrayView3<u8>, factor: usize) -> Result<Array3<u32>> {
    let (t, h, w) = labels.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!("{h}x{w} labels are not divisible by {factor}")));
    }
    Ok(Array3::from_shape_fn((t, h / factor, w / factor), |(k, i, j)| {
        labels[[k, i * factor + factor / 2, j * factor + factor / 2]] as u32
    }))
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand Index of two labelings of the same elements, by pair counting.
/// A zero denominator (both partitions trivial in the same way) scores 1.
pub fn adjusted_rand_index<A: Eq + Hash + Copy, B: Eq + Hash + Copy>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut joint: HashMap<(A, B), u64> = HashMap::new();
    let mut rows: HashMap<A, u64> = HashMap::new();
    let mut cols: HashMap<B, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&n| comb2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| comb2(n)).sum();
    let pairs = comb2(a.len() as u64);
    if pairs == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / pairs;
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return 1.0;
    }
    (index - expected) / denom
}

/// Ground-truth labels that survive the first-frame area filter.
fn kept_instances(gt: ArrayView3<u32>) -> Vec<u32> {
    let first = gt.index_axis(Axis(0), 0);
    let total = first.len() as f64;
    let mut area: HashMap<u32, usize> = HashMap::new();
    for &l in first.iter() {
        *area.entry(l).or_default() += 1;
    }
    let mut kept: Vec<u32> = area
        .into_iter()
        .filter(|&(l, n)| l != 0 && n as f64 > MIN_INSTANCE_AREA * total)
        .map(|(l, _)| l)
        .collect();
    kept.sort_unstable();
    kept
}

fn foreground_pairs(pred: ArrayView3<u32>, gt: ArrayView3<u32>, area_filter: bool) -> (Vec<u32>, Vec<u32>) {
    let kept = if area_filter && gt.len_of(Axis(0)) > 0 {
        Some(kept_instances(gt))
    } else {
        None
    };
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (&x, &y) in pred.iter().zip(gt.iter()) {
        if y == 0 || kept.as_ref().is_some_and(|k| k.binary_search(&y).is_err()) {
            continue;
        }
        p.push(x);
        g.push(y);
    }
    (p, g)
}

/// ARI over all foreground pixels of all frames pooled together, so a slot
/// that switches objects between frames is penalized. Label 0 in `gt` is
/// background. Returns 0 (with a warning) when there is no foreground.
pub fn fg_ari(pred: ArrayView3<u32>, gt: ArrayView3<u32>, area_filter: bool) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (p, g) = foreground_pairs(pred, gt, area_filter);
    if p.is_empty() {
        log::warn!("no foreground pixels; FG-ARI defined as 0");
        return Ok(0.0);
    }
    Ok(adjusted_rand_index(&p, &g))
}

/// FG-ARI of each frame separately, averaged over frames with foreground.
pub fn per_frame_fg_ari(pred: ArrayView3<u32>, gt: ArrayView3<u32>, area_filter: bool) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let kept = if area_filter && gt.len_of(Axis(0)) > 0 {
        Some(kept_instances(gt))
    } else {
        None
    };
    let mut sum = 0.0;
    let mut frames = 0usize;
    for (pf, gf) in pred.outer_iter().zip(gt.outer_iter()) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for (&x, &y) in pf.iter().zip(gf.iter()) {
            if y == 0 || kept.as_ref().is_some_and(|k| k.binary_search(&y).is_err()) {
                continue;
            }
            p.push(x);
            g.push(y);
        }
        if !p.is_empty() {
            sum += adjusted_rand_index(&p, &g);
            frames += 1;
        }
    }
    if frames == 0 {
        log::warn!("no foreground pixels; per-frame FG-ARI defined as 0");
        return Ok(0.0);
    }
    Ok(sum / frames as f64)
}

/// Fraction of elements whose cluster's majority label equals their own label.
pub fn cluster_purity<A: Eq + Hash + Copy, B: Eq + Hash + Copy>(clusters: &[A], labels: &[B]) -> Result<f64> {
    if clusters.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} cluster ids vs {} labels",
            clusters.len(),
            labels.len()
        )));
    }
    if clusters.is_empty() {
        return Err(Error::Shape("cluster purity of an empty labeling".into()));
    }
    let mut joint: HashMap<(A, B), usize> = HashMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *joint.entry((c, l)).or_default() += 1;
    }
    let mut best: HashMap<A, usize> = HashMap::new();
    for (&(c, _), &n) in &joint {
        let e = best.entry(c).or_default();
        *e = (*e).max(n);
    }
    Ok(best.values().sum::<usize>() as f64 / clusters.len() as f64)
}

/// Purity of per-pixel token maps against per-pixel semantic labels, pooled over frames.
pub fn token_purity(tokens: &[Array2<u32>], labels: &[Array2<u8>]) -> Result<f64> {
    if tokens.len() != labels.len() || tokens.iter().zip(labels).any(|(a, b)| a.dim() != b.dim()) {
        return Err(Error::Shape("token maps and label maps differ in shape".into()));
    }
    let c: Vec<u32> = tokens.iter().flat_map(|m| m.iter().copied()).collect();
    let l: Vec<u8> = labels.iter().flat_map(|m| m.iter().copied()).collect();
    cluster_purity(&c, &l)
}

/// Pixel counts of each slot in a T x h x w label map.
pub fn slot_areas(masks: ArrayView3<u32>, num_slots: usize) -> Vec<usize> {
    let mut areas = vec![0usize; num_slots];
    for &s in masks.iter() {
        if (s as usize) < num_slots {
            areas[s as usize] += 1;
        }
    }
    areas
}

/// Slots to draw: those covering at most `max_fraction` of all pixels,
/// largest first, at most `top_k`.
pub fn top_slots(masks: ArrayView3<u32>, num_slots: usize, top_k: usize, max_fraction: f64) -> Vec<usize> {
    let total = masks.len() as f64;
    let areas = slot_areas(masks, num_slots);
    let mut slots: Vec<usize> = (0..num_slots)
        .filter(|&s| areas[s] > 0 && areas[s] as f64 <= max_fraction * total)
        .collect();
    slots.sort_by(|&a, &b| areas[b].cmp(&areas[a]).then(a.cmp(&b)));
    slots.truncate(top_k);
    slots
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
