//! Procedural multi-sprite videos with exact ground truth.
//!
//! Each video is a handful of flat-colored shapes moving with constant velocity
//! over a static background, bouncing off the image borders. Because the scene
//! is rendered analytically, instance masks, optical flow, depth, and motion
//! segments are exact.

use ndarray::{Array2, Array3, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteKind {
    Circle,
    Square,
    Triangle,
}

impl SpriteKind {
    pub const ALL: [SpriteKind; 3] = [SpriteKind::Circle, SpriteKind::Square, SpriteKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            SpriteKind::Circle => "circle",
            SpriteKind::Square => "square",
            SpriteKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Semantic label used by purity scoring; 0 is reserved for background.
    pub fn label(self) -> u8 {
        match self {
            SpriteKind::Circle => 1,
            SpriteKind::Square => 2,
            SpriteKind::Triangle => 3,
        }
    }

    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            SpriteKind::Circle => dx * dx + dy * dy <= r * r,
            SpriteKind::Square => {
                let half = 0.85 * r;
                dx.abs() <= half && dy.abs() <= half
            }
            SpriteKind::Triangle => {
                // Apex at (0, -r), flat base at y = 0.6 r spanning [-r, r].
                let depth = dy + r;
                let height = 1.6 * r;
                depth >= 0.0 && depth <= height && dx.abs() <= r * depth / height
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Solid,
    Gradient,
    Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub frames: usize,
    pub kinds: Vec<SpriteKind>,
    /// Sprite radius range in pixels.
    pub min_radius: f32,
    pub max_radius: f32,
    /// Speed range in pixels per frame.
    pub min_speed: f32,
    pub max_speed: f32,
    pub fraction_static: f32,
    pub background: Background,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            min_sprites: 2,
            max_sprites: 4,
            frames: 8,
            kinds: SpriteKind::ALL.to_vec(),
            min_radius: 3.0,
            max_radius: 5.5,
            min_speed: 0.75,
            max_speed: 2.0,
            fraction_static: 0.0,
            background: Background::Texture,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("height", "image dimensions must be positive"));
        }
        if self.min_sprites < 1 {
            return Err(Error::config("min_sprites", "must be at least 1"));
        }
        if self.max_sprites < self.min_sprites {
            return Err(Error::config("max_sprites", "must be >= min_sprites"));
        }
        if self.max_sprites > 250 {
            return Err(Error::config("max_sprites", "instance ids are stored as u8"));
        }
        if self.frames < 2 {
            return Err(Error::config("frames", "need at least 2 frames"));
        }
        if self.kinds.is_empty() {
            return Err(Error::config("kinds", "need at least one sprite kind"));
        }
        if !(self.min_radius > 0.0 && self.max_radius >= self.min_radius) {
            return Err(Error::config("min_radius", "need 0 < min_radius <= max_radius"));
        }
        let span = self.height.min(self.width) as f32;
        if 2.0 * self.max_radius + 2.0 >= span {
            return Err(Error::config("max_radius", "sprites do not fit in the image"));
        }
        if !(self.min_speed >= 0.0 && self.max_speed >= self.min_speed) {
            return Err(Error::config("min_speed", "need 0 <= min_speed <= max_speed"));
        }
        if !(0.0..=1.0).contains(&self.fraction_static) {
            return Err(Error::config("fraction_static", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One rendered video with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub seed: u64,
    /// T x H x W x 3, values in [0, 1].
    pub frames: Array4<f32>,
    /// T x H x W instance ids; 0 is background, sprite `j` has id `j + 1`.
    pub instance_masks: Array3<u8>,
    /// T x H x W x 2 displacement (x, y) to the next frame in pixels.
    pub flow: Array4<f32>,
    /// T x H x W, positive, background farthest.
    pub depth: Array3<f32>,
    /// Per frame: C x H x W binary masks of the sprites that move at that frame.
    pub motion_segments: Vec<Array3<u8>>,
    /// Sprite kind per instance id minus one.
    pub instance_kinds: Vec<SpriteKind>,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    /// Per-pixel sprite-kind labels (0 background) for frame `t`.
    pub fn semantic_labels(&self, t: usize) -> Array2<u8> {
        self.instance_masks.index_axis(ndarray::Axis(0), t).mapv(|id| {
            if id == 0 {
                0
            } else {
                self.instance_kinds[id as usize - 1].label()
            }
        })
    }
}

struct Sprite {
    kind: SpriteKind,
    radius: f32,
    color: [f32; 3],
    depth: f32,
    /// Center per time step, one more than the number of frames.
    path: Vec<(f32, f32)>,
}

fn simulate_path(
    start: (f32, f32),
    velocity: (f32, f32),
    steps: usize,
    bounds: ((f32, f32), (f32, f32)),
) -> Vec<(f32, f32)> {
    let ((x_lo, x_hi), (y_lo, y_hi)) = bounds;
    let reflect = |p: f32, v: f32, lo: f32, hi: f32| -> (f32, f32) {
        let mut p = p + v;
        let mut v = v;
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        }
        (p.clamp(lo, hi), v)
    };
    let mut path = Vec::with_capacity(steps);
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = velocity;
    path.push((x, y));
    for _ in 1..steps {
        (x, vx) = reflect(x, vx, x_lo, x_hi);
        (y, vy) = reflect(y, vy, y_lo, y_hi);
        path.push((x, y));
    }
    path
}

fn background_image(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (h, w) = (config.height, config.width);
    let mut color = || {
        [
            rng.random_range(0.0..1.0f32),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    };
    let base = color();
    let other = color();
    let mut img = Array3::<f32>::zeros((h, w, 3));
    match config.background {
        Background::Solid => {
            for ((_, _, c), v) in img.indexed_iter_mut() {
                *v = base[c];
            }
        }
        Background::Gradient => {
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let norm = (h.max(w)) as f32;
            for ((y, x, c), v) in img.indexed_iter_mut() {
                let s = ((x as f32 - w as f32 / 2.0) * dx + (y as f32 - h as f32 / 2.0) * dy) / norm + 0.5;
                let s = s.clamp(0.0, 1.0);
                *v = base[c] * (1.0 - s) + other[c] * s;
            }
        }
        Background::Texture => {
            let waves: Vec<(f32, f32, f32, usize)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(0.2..1.2f32),
                        rng.random_range(0.0..std::f32::consts::TAU),
                        rng.random_range(0.0..std::f32::consts::TAU),
                        rng.random_range(0..3usize),
                    )
                })
                .collect();
            for ((y, x, c), v) in img.indexed_iter_mut() {
                let mut s = base[c] * 0.7 + 0.15;
                for &(freq, angle, phase, channel) in &waves {
                    let arg = freq * (x as f32 * angle.cos() + y as f32 * angle.sin()) + phase;
                    let amp = if channel == c { 0.12 } else { 0.05 };
                    s += amp * arg.sin();
                }
                *v = s.clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Renders one video. Identical configs (including the seed) give identical output.
pub fn generate_video(config: &SceneConfig) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (h, w, t_len) = (config.height, config.width, config.frames);
    let background = background_image(config, &mut rng);
    let num = rng.random_range(config.min_sprites..=config.max_sprites);

    let mut sprites = Vec::with_capacity(num);
    for j in 0..num {
        let kind = config.kinds[rng.random_range(0..config.kinds.len())];
        let radius = rng.random_range(config.min_radius..=config.max_radius);
        let bounds = ((radius, w as f32 - 1.0 - radius), (radius, h as f32 - 1.0 - radius));
        let start = (
            rng.random_range(bounds.0 .0..=bounds.0 .1),
            rng.random_range(bounds.1 .0..=bounds.1 .1),
        );
        let color = [
            rng.random_range(0.05..1.0f32),
            rng.random_range(0.05..1.0f32),
            rng.random_range(0.05..1.0f32),
        ];
        let is_static = rng.random::<f32>() < config.fraction_static;
        let speed = rng.random_range(config.min_speed..=config.max_speed);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let velocity = if is_static {
            (0.0, 0.0)
        } else {
            (speed * angle.cos(), speed * angle.sin())
        };
        sprites.push(Sprite {
            kind,
            radius,
            color,
            // Fixed layer order: lower index is nearer.
            depth: 1.0 + j as f32,
            path: simulate_path(start, velocity, t_len + 1, bounds),
        });
    }
    let background_depth = num as f32 + 2.0;

    let mut frames = Array4::<f32>::zeros((t_len, h, w, 3));
    let mut masks = Array3::<u8>::zeros((t_len, h, w));
    let mut flow = Array4::<f32>::zeros((t_len, h, w, 2));
    let mut depth = Array3::<f32>::from_elem((t_len, h, w), background_depth);
    let mut motion_segments = Vec::with_capacity(t_len);

    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                // Nearest sprite covering the pixel wins.
                let hit = sprites.iter().enumerate().find(|(_, s)| {
                    let (cx, cy) = s.path[t];
                    s.kind.contains(x as f32 - cx, y as f32 - cy, s.radius)
                });
                match hit {
                    Some((j, s)) => {
                        for c in 0..3 {
                            frames[[t, y, x, c]] = s.color[c];
                        }
                        masks[[t, y, x]] = (j + 1) as u8;
                        depth[[t, y, x]] = s.depth;
                        let (x0, y0) = s.path[t];
                        let (x1, y1) = s.path[t + 1];
                        flow[[t, y, x, 0]] = x1 - x0;
                        flow[[t, y, x, 1]] = y1 - y0;
                    }
                    None => {
                        for c in 0..3 {
                            frames[[t, y, x, c]] = background[[y, x, c]];
                        }
                    }
                }
            }
        }

        let mut segs: Vec<Array2<u8>> = Vec::new();
        for (j, s) in sprites.iter().enumerate() {
            let (x0, y0) = s.path[t];
            let (x1, y1) = s.path[t + 1];
            if x1 == x0 && y1 == y0 {
                continue;
            }
            let id = (j + 1) as u8;
            let seg = masks.index_axis(ndarray::Axis(0), t).mapv(|v| u8::from(v == id));
            if seg.iter().any(|&v| v == 1) {
                segs.push(seg);
            }
        }
        let mut stacked = Array3::<u8>::zeros((segs.len(), h, w));
        for (i, seg) in segs.iter().enumerate() {
            stacked.index_axis_mut(ndarray::Axis(0), i).assign(seg);
        }
        motion_segments.push(stacked);
    }

    Ok(VideoSample {
        seed: config.seed,
        frames,
        instance_masks: masks,
        flow,
        depth,
        motion_segments,
        instance_kinds: sprites.iter().map(|s| s.kind).collect(),
    })
}

/// Generates `count` videos with seeds `base.seed, base.seed + 1, ...`.
pub fn generate_dataset(base: &SceneConfig, count: usize) -> Result<Vec<VideoSample>> {
    (0..count)
        .map(|i| {
            let mut cfg = base.clone();
            cfg.seed = base.seed.wrapping_add(i as u64);
            generate_video(&cfg)
        })
        .collect()
}

/// Mean-pools a binary mask by `factor` in both directions.
pub fn downsample_masks(mask: ArrayView2<u8>, factor: usize) -> Result<Array2<f32>> {
    let (h, w) = mask.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "mask {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Array2::<f32>::zeros((oh, ow));
    let norm = (factor * factor) as f32;
    for ((y, x), v) in mask.indexed_iter() {
        out[[y / factor, x / factor]] += f32::from(*v.min(&1));
    }
    out.mapv_inplace(|v| v / norm);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn moving_config(seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn flow_equals_velocity_before_bounce() {
        let path = simulate_path((10.0, 10.0), (2.0, 0.0), 4, ((3.0, 28.0), (3.0, 28.0)));
        for pair in path.windows(2) {
            assert_eq!(pair[1].0 - pair[0].0, 2.0);
            assert_eq!(pair[1].1 - pair[0].1, 0.0);
        }
    }

    #[test]
    fn rendered_flow_matches_path_displacement() {
        let cfg = SceneConfig {
            min_sprites: 1,
            max_sprites: 1,
            ..moving_config(3)
        };
        let v = generate_video(&cfg).unwrap();
        for t in 0..v.num_frames() {
            let mut seen = None;
            for ((y, x), id) in v.instance_masks.index_axis(Axis(0), t).indexed_iter() {
                if *id == 1 {
                    let f = (v.flow[[t, y, x, 0]], v.flow[[t, y, x, 1]]);
                    if let Some(prev) = seen {
                        assert_eq!(prev, f);
                    }
                    seen = Some(f);
                } else {
                    assert_eq!(v.flow[[t, y, x, 0]], 0.0);
                }
            }
        }
    }

    #[test]
    fn all_static_means_no_motion_segments() {
        let cfg = SceneConfig {
            fraction_static: 1.0,
            ..moving_config(11)
        };
        let v = generate_video(&cfg).unwrap();
        assert!(v.motion_segments.iter().all(|m| m.dim().0 == 0));
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = generate_video(&moving_config(42)).unwrap();
        let b = generate_video(&moving_config(42)).unwrap();
        assert_eq!(a, b);
        let c = generate_video(&moving_config(43)).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(SceneConfig, &str)> = vec![
            (
                SceneConfig {
                    min_sprites: 0,
                    ..Default::default()
                },
                "min_sprites",
            ),
            (
                SceneConfig {
                    max_sprites: 1,
                    min_sprites: 2,
                    ..Default::default()
                },
                "max_sprites",
            ),
            (
                SceneConfig {
                    frames: 1,
                    ..Default::default()
                },
                "frames",
            ),
            (
                SceneConfig {
                    fraction_static: 1.5,
                    ..Default::default()
                },
                "fraction_static",
            ),
        ];
        for (cfg, field) in cases {
            match generate_video(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn depth_is_constant_per_sprite_and_background_farthest() {
        let v = generate_video(&moving_config(5)).unwrap();
        let bg = v.depth.iter().cloned().fold(f32::MIN, f32::max);
        for ((t, y, x), id) in v.instance_masks.indexed_iter() {
            let d = v.depth[[t, y, x]];
            if *id == 0 {
                assert_eq!(d, bg);
            } else {
                assert_eq!(d, *id as f32);
                assert!(d < bg);
            }
        }
    }

    #[test]
    fn downsample_examples() {
        let ones = Array2::<u8>::ones((8, 8));
        assert_eq!(downsample_masks(ones.view(), 4).unwrap(), Array2::<f32>::ones((2, 2)));

        let mut quad = Array2::<u8>::zeros((4, 4));
        quad.slice_mut(ndarray::s![0..2, 2..4]).fill(1);
        assert_eq!(
            downsample_masks(quad.view(), 2).unwrap(),
            array![[0.0, 1.0], [0.0, 0.0]]
        );

        let checker = Array2::from_shape_fn((4, 4), |(y, x)| ((y + x) % 2) as u8);
        assert_eq!(
            downsample_masks(checker.view(), 2).unwrap(),
            Array2::from_elem((2, 2), 0.5)
        );
    }

    #[test]
    fn downsample_rejects_non_divisible() {
        let m = Array2::<u8>::zeros((6, 8));
        assert!(matches!(downsample_masks(m.view(), 4), Err(Error::Shape(_))));
    }
}
