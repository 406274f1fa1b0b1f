//! MovingShapes: a textured drifting background plus one object per
//! foreground class, each class moving at its own characteristic speed.
//!
//! All geometry is integer fixed point in 1/16 pixel units, so a scene
//! renders bit-identically everywhere. Pixel (x, y) is sampled at its
//! centre `(16x + 8, 16y + 8)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Clip, DataError};

const SUB: i32 = 16;
/// Background lattice spacing in pixels.
const CELL: i32 = 4;
const PALETTE: [[u8; 3]; 3] = [[200, 70, 70], [70, 190, 70], [80, 80, 210]];
const COLOR_JITTER: i32 = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub height: usize,
    pub width: usize,
    /// Number of classes including background, 2..=4.
    pub classes: usize,
    pub half_len: usize,
    /// Multiplies every velocity; 0 freezes the scene.
    pub velocity_scale: f64,
    /// Per-frame uniform sensor noise amplitude in u8 levels.
    pub noise: u8,
    /// Per-frame brightness gain jitter in percent.
    pub gain_jitter: u8,
    pub render_gt: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            half_len: 15,
            velocity_scale: 1.0,
            noise: 12,
            gain_jitter: 10,
            render_gt: true,
        }
    }
}

impl GenParams {
    /// No motion and no per-frame photometric change.
    pub fn static_scene() -> Self {
        Self {
            velocity_scale: 0.0,
            noise: 0,
            gain_jitter: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(2..=4).contains(&self.classes) {
            return Err(DataError::Params(format!(
                "classes must be in 2..=4, got {}",
                self.classes
            )));
        }
        if self.height < 48 || self.width < 48 {
            return Err(DataError::Params(format!(
                "frames must be at least 48x48, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.velocity_scale >= 0.0 && self.velocity_scale.is_finite()) {
            return Err(DataError::Params("velocity_scale must be >= 0".into()));
        }
        if self.gain_jitter > 50 {
            return Err(DataError::Params("gain_jitter must be <= 50".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        2 * self.half_len + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Radius in 1/16 px.
    Disc(i32),
    /// Half side in 1/16 px.
    Square(i32),
}

impl Shape {
    fn extent(self) -> i32 {
        match self {
            Shape::Disc(r) | Shape::Square(r) => r,
        }
    }

    fn contains(self, dx: i32, dy: i32) -> bool {
        match self {
            Shape::Disc(r) => {
                (dx as i64).pow(2) + (dy as i64).pow(2) <= (r as i64).pow(2)
            }
            Shape::Square(h) => dx.abs() <= h && dy.abs() <= h,
        }
    }
}

/// A shape at one instant; centre in 1/16 px.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedShape {
    pub class: u8,
    pub shape: Shape,
    pub cx: i32,
    pub cy: i32,
}

/// Label map for shapes drawn in slice order over background class 0.
pub fn render_labels(shapes: &[PlacedShape], height: usize, width: usize) -> Vec<u8> {
    let mut out = vec![0u8; height * width];
    for y in 0..height {
        let py = SUB * y as i32 + SUB / 2;
        for x in 0..width {
            let px = SUB * x as i32 + SUB / 2;
            for s in shapes {
                if s.shape.contains(px - s.cx, py - s.cy) {
                    out[y * width + x] = s.class;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Track {
    class: u8,
    shape: Shape,
    color: [u8; 3],
    /// Centre per frame.
    path: Vec<(i32, i32)>,
}

#[derive(Debug, Clone)]
struct Background {
    nodes_x: i32,
    nodes_y: i32,
    lattice: Vec<[u8; 3]>,
    /// Texture offset per frame, 1/16 px.
    path: Vec<(i32, i32)>,
}

impl Background {
    fn node(&self, ix: i32, iy: i32) -> [u8; 3] {
        let ix = ix.rem_euclid(self.nodes_x);
        let iy = iy.rem_euclid(self.nodes_y);
        self.lattice[(iy * self.nodes_x + ix) as usize]
    }

    /// Bilinear value noise, rounded to nearest.
    fn sample(&self, x: i32, y: i32, t: usize) -> [u8; 3] {
        let span = CELL * SUB;
        let (ox, oy) = self.path[t];
        let sx = SUB * x + SUB / 2 + ox;
        let sy = SUB * y + SUB / 2 + oy;
        let (ix, fx) = (sx.div_euclid(span), sx.rem_euclid(span));
        let (iy, fy) = (sy.div_euclid(span), sy.rem_euclid(span));
        let (a, b) = (self.node(ix, iy), self.node(ix + 1, iy));
        let (c, d) = (self.node(ix, iy + 1), self.node(ix + 1, iy + 1));
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let v = (span - fx) * (span - fy) * a[ch] as i32
                + fx * (span - fy) * b[ch] as i32
                + (span - fx) * fy * c[ch] as i32
                + fx * fy * d[ch] as i32;
            let denom = span * span;
            out[ch] = ((v + denom / 2) / denom) as u8;
        }
        out
    }
}

/// The full generative state of one clip.
#[derive(Debug, Clone)]
pub struct Scene {
    height: usize,
    width: usize,
    frames: usize,
    background: Background,
    tracks: Vec<Track>,
    gains: Vec<i32>,
    noise: u8,
    noise_seed: u64,
}

/// Integer velocity with squared magnitude in `[lo2, hi2]`, scaled.
fn sample_velocity(rng: &mut impl Rng, lo2: i32, hi2: i32, scale: f64) -> (i32, i32) {
    let r = (hi2 as f64).sqrt().ceil() as i32;
    let (vx, vy) = loop {
        let vx = rng.random_range(-r..=r);
        let vy = rng.random_range(-r..=r);
        let m = vx * vx + vy * vy;
        if m >= lo2 && m <= hi2 {
            break (vx, vy);
        }
    };
    if scale == 1.0 {
        (vx, vy)
    } else {
        (
            (vx as f64 * scale).round() as i32,
            (vy as f64 * scale).round() as i32,
        )
    }
}

/// Centre path that reflects off `[lo, hi]` before stepping, so every step
/// moves by exactly the velocity magnitude.
fn bounce_path(start: (i32, i32), vel: (i32, i32), lo: (i32, i32), hi: (i32, i32), n: usize) -> Vec<(i32, i32)> {
    let (mut x, mut y) = start;
    let (mut vx, mut vy) = vel;
    let mut path = Vec::with_capacity(n);
    path.push((x, y));
    for _ in 1..n {
        if x + vx < lo.0 || x + vx > hi.0 {
            vx = -vx;
        }
        if y + vy < lo.1 || y + vy > hi.1 {
            vy = -vy;
        }
        x += vx;
        y += vy;
        path.push((x, y));
    }
    path
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Object colour: a per-class palette entry with per-channel jitter.
fn class_color(class: u8, rng: &mut impl Rng) -> [u8; 3] {
    let base = PALETTE[(class as usize - 1) % PALETTE.len()];
    let mut c = [0u8; 3];
    for ch in 0..3 {
        c[ch] = (base[ch] as i32 + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0, 255) as u8;
    }
    c
}

impl Scene {
    pub fn sample(params: &GenParams, rng: &mut impl Rng) -> Result<Self, DataError> {
        params.validate()?;
        let (h, w) = (params.height as i32, params.width as i32);
        let frames = params.frames();
        let scale = params.velocity_scale;

        let nodes_x = w / CELL + 2;
        let nodes_y = h / CELL + 2;
        let base = random_color(rng);
        let lattice = (0..nodes_x * nodes_y)
            .map(|_| {
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let v = base[ch] as i32 + rng.random_range(-64..=64);
                    c[ch] = v.clamp(0, 255) as u8;
                }
                c
            })
            .collect();
        let bg_vel = sample_velocity(rng, 0, 10, scale);
        let bg_start = (
            rng.random_range(0..nodes_x * CELL * SUB),
            rng.random_range(0..nodes_y * CELL * SUB),
        );
        let bg_path = (0..frames as i32)
            .map(|t| (bg_start.0 + bg_vel.0 * t, bg_start.1 + bg_vel.1 * t))
            .collect();

        let mut tracks = Vec::new();
        for class in 1..params.classes as u8 {
            let (shape, lo2, hi2) = match class {
                1 => (Shape::Disc(rng.random_range(16 * SUB..=20 * SUB)), 1, 23),
                2 => (Shape::Square(rng.random_range(6 * SUB..=8 * SUB)), 164, 368),
                _ => (Shape::Disc(rng.random_range(56..=72)), 1239, 2304),
            };
            let e = shape.extent();
            let lo = (e, e);
            let hi = (SUB * w - e, SUB * h - e);
            let start = (rng.random_range(lo.0..=hi.0), rng.random_range(lo.1..=hi.1));
            let vel = sample_velocity(rng, lo2, hi2, scale);
            tracks.push(Track {
                class,
                shape,
                color: class_color(class, rng),
                path: bounce_path(start, vel, lo, hi, frames),
            });
        }

        let j = params.gain_jitter as i32;
        let gains = (0..frames).map(|_| 100 + rng.random_range(-j..=j)).collect();
        Ok(Self {
            height: params.height,
            width: params.width,
            frames,
            background: Background {
                nodes_x,
                nodes_y,
                lattice,
                path: bg_path,
            },
            tracks,
            gains,
            noise: params.noise,
            noise_seed: rng.random(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Shapes at frame `t` in painter's order.
    pub fn shapes_at(&self, t: usize) -> Vec<PlacedShape> {
        self.tracks
            .iter()
            .map(|tr| PlacedShape {
                class: tr.class,
                shape: tr.shape,
                cx: tr.path[t].0,
                cy: tr.path[t].1,
            })
            .collect()
    }

    pub fn render_labels(&self, t: usize) -> Vec<u8> {
        render_labels(&self.shapes_at(t), self.height, self.width)
    }

    /// u8 `[3, H, W]` image for frame `t`.
    pub fn render_frame(&self, t: usize) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let labels = self.render_labels(t);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        noise_rng.set_stream(t as u64);
        let amp = self.noise as i32;
        let gain = self.gains[t];
        let mut out = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let l = labels[y * w + x];
                let base = if l == 0 {
                    self.background.sample(x as i32, y as i32, t)
                } else {
                    self.tracks[l as usize - 1].color
                };
                for ch in 0..3 {
                    let n = if amp > 0 { noise_rng.random_range(-amp..=amp) } else { 0 };
                    let v = (base[ch] as i32 * gain + 50) / 100 + n;
                    out[ch * h * w + y * w + x] = v.clamp(0, 255) as u8;
                }
            }
        }
        out
    }

    pub fn into_clip(self, clip_id: usize, render_gt: bool) -> Clip {
        let key_index = self.frames / 2;
        let frames = (0..self.frames).map(|t| Arc::new(self.render_frame(t))).collect();
        let key_label = Arc::new(self.render_labels(key_index));
        let gt_all = render_gt.then(|| {
            (0..self.frames)
                .map(|t| {
                    if t == key_index {
                        Arc::clone(&key_label)
                    } else {
                        Arc::new(self.render_labels(t))
                    }
                })
                .collect()
        });
        Clip {
            clip_id,
            height: self.height,
            width: self.width,
            frames,
            key_index,
            key_label,
            gt_all,
        }
    }
}

/// One clip from `rng`.
pub fn gen_clip(params: &GenParams, clip_id: usize, rng: &mut impl Rng) -> Result<Clip, DataError> {
    Ok(Scene::sample(params, rng)?.into_clip(clip_id, params.render_gt))
}

/// Clips `first_id..first_id + count`, clip `k` seeded with `base_seed + k`,
/// generated on up to `jobs` threads. Output does not depend on `jobs`.
pub fn gen_clips(
    params: &GenParams,
    first_id: usize,
    count: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<Vec<Clip>, DataError> {
    params.validate()?;
    let one = |id: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(id as u64));
        gen_clip(params, id, &mut rng)
    };
    let ids: Vec<usize> = (first_id..first_id + count).collect();
    let jobs = jobs.clamp(1, count.max(1));
    if jobs == 1 {
        return ids.into_iter().map(one).collect();
    }
    let chunk = count.div_ceil(jobs);
    let parts: Vec<Result<Vec<Clip>, DataError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&id| one(id)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generator thread panicked"))
            .collect()
    });
    let mut clips = Vec::with_capacity(count);
    for p in parts {
        clips.extend(p?);
    }
    Ok(clips)
}
