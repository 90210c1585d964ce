//! Synthetic moving-sprite scenes with exact ground-truth flow.
//!
//! Rendering is hard-edged (no antialiasing) and all velocities are integer
//! pixels per frame, so the ground truth has no mixed pixels and surface
//! labels can be traced exactly. Half of a generated dataset (by default)
//! consists of thin-structure scenes: 1-2 px wide bars moving against the
//! background motion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RfpmError};
use crate::metrics_io::{atomic_write, read_flo, read_ppm, write_flo, write_ppm, RgbImage};
use crate::tensor::Tensor;

/// Sprite geometry. Positions refer to the top-left corner (rect, bar) or
/// the center (disk) in frame t.
#[derive(Clone, Debug)]
pub enum SpriteShape {
    Rect { w: usize, h: usize },
    Disk { radius: f64 },
    Bar { width: usize, length: usize, vertical: bool },
}

#[derive(Clone, Debug)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub pos: (i64, i64),
    pub color: [f64; 3],
    /// Integer pixels per frame.
    pub vel: (i64, i64),
}

impl Sprite {
    /// Bounding box (x0, y0, x1, y1), exclusive upper corner, at frame `f`.
    fn bbox(&self, f: i64) -> (i64, i64, i64, i64) {
        let (x, y) = (self.pos.0 + f * self.vel.0, self.pos.1 + f * self.vel.1);
        match self.shape {
            SpriteShape::Rect { w, h } => (x, y, x + w as i64, y + h as i64),
            SpriteShape::Disk { radius } => {
                let r = radius.ceil() as i64;
                (x - r, y - r, x + r + 1, y + r + 1)
            }
            SpriteShape::Bar {
                width,
                length,
                vertical,
            } => {
                if vertical {
                    (x, y, x + width as i64, y + length as i64)
                } else {
                    (x, y, x + length as i64, y + width as i64)
                }
            }
        }
    }

    fn covers(&self, px: i64, py: i64, f: i64) -> bool {
        let (x, y) = (self.pos.0 + f * self.vel.0, self.pos.1 + f * self.vel.1);
        match self.shape {
            SpriteShape::Rect { w, h } => {
                px >= x && px < x + w as i64 && py >= y && py < y + h as i64
            }
            SpriteShape::Disk { radius } => {
                let dx = (px - x) as f64;
                let dy = (py - y) as f64;
                dx * dx + dy * dy <= radius * radius
            }
            SpriteShape::Bar {
                width,
                length,
                vertical,
            } => {
                let (w, h) = if vertical {
                    (width as i64, length as i64)
                } else {
                    (length as i64, width as i64)
                };
                px >= x && px < x + w && py >= y && py < y + h
            }
        }
    }
}

/// Parametric scene: textured moving background plus sprites drawn in
/// order (later entries occlude earlier ones).
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub height: usize,
    pub width: usize,
    pub bg_vel: (i64, i64),
    pub bg_seed: u64,
    pub sprites: Vec<Sprite>,
}

/// One rendered image pair with dense exact ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub img1: RgbImage,
    pub img2: RgbImage,
    /// (1,2,H,W) flow from frame 1 to frame 2, in pixels.
    pub flow: Tensor,
    pub thin: bool,
    pub seed: u64,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.img1.height
    }

    pub fn width(&self) -> usize {
        self.img1.width
    }

    /// All-valid mask matching the flow field.
    pub fn valid(&self) -> Tensor {
        Tensor::ones(&[1, 1, self.height(), self.width()])
    }
}

fn hash01(seed: u64, a: i64, b: i64, tag: u64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [a as u64, b as u64, tag] {
        h ^= v.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = h.rotate_left(31).wrapping_mul(0x94D0_49BB_1331_11EB);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise on an unbounded integer domain.
fn value_noise(seed: u64, x: i64, y: i64, channel: u64) -> f64 {
    let mut acc = 0.0;
    for (octave, (cell, weight)) in [(8.0, 0.7), (4.0, 0.3)].into_iter().enumerate() {
        let fx = x as f64 / cell;
        let fy = y as f64 / cell;
        let x0 = fx.floor() as i64;
        let y0 = fy.floor() as i64;
        let tx = smoothstep(fx - x0 as f64);
        let ty = smoothstep(fy - y0 as f64);
        let tag = channel * 2 + octave as u64;
        let v00 = hash01(seed, x0, y0, tag);
        let v10 = hash01(seed, x0 + 1, y0, tag);
        let v01 = hash01(seed, x0, y0 + 1, tag);
        let v11 = hash01(seed, x0 + 1, y0 + 1, tag);
        let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11);
        acc += weight * v;
    }
    0.15 + 0.7 * acc
}

/// Index of the topmost element covering each pixel at frame `f`
/// (0 = background, i+1 = sprite i).
pub fn surface_labels(scene: &SyntheticScene, f: i64) -> Vec<u16> {
    let (h, w) = (scene.height, scene.width);
    let mut labels = vec![0u16; h * w];
    for (i, sprite) in scene.sprites.iter().enumerate() {
        let (x0, y0, x1, y1) = sprite.bbox(f);
        let ylo = y0.max(0) as usize;
        let yhi = (y1.min(h as i64)).max(0) as usize;
        let xlo = x0.max(0) as usize;
        let xhi = (x1.min(w as i64)).max(0) as usize;
        for py in ylo..yhi {
            for px in xlo..xhi {
                if sprite.covers(px as i64, py as i64, f) {
                    labels[py * w + px] = (i + 1) as u16;
                }
            }
        }
    }
    labels
}

fn render_frame(scene: &SyntheticScene, f: i64) -> RgbImage {
    let (h, w) = (scene.height, scene.width);
    let labels = surface_labels(scene, f);
    let mut img = RgbImage::new(w, h);
    let (ub, vb) = scene.bg_vel;
    for y in 0..h {
        for x in 0..w {
            let label = labels[y * w + x];
            let rgb = if label == 0 {
                let sx = x as i64 - f * ub;
                let sy = y as i64 - f * vb;
                [
                    value_noise(scene.bg_seed, sx, sy, 0),
                    value_noise(scene.bg_seed, sx, sy, 1),
                    value_noise(scene.bg_seed, sx, sy, 2),
                ]
            } else {
                scene.sprites[label as usize - 1].color
            };
            img.set(
                x,
                y,
                [
                    (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ],
            );
        }
    }
    img
}

/// Renders both frames and the exact ground-truth flow of `scene`.
///
/// The flow at a pixel is the velocity of the topmost element covering it
/// in frame t; the valid mask (from [`Sample::valid`]) is dense.
pub fn render_pair(scene: &SyntheticScene, seed: u64, thin: bool) -> Result<Sample> {
    if scene.height == 0 || scene.width == 0 {
        return Err(RfpmError::Generation("empty scene".into()));
    }
    for (i, sprite) in scene.sprites.iter().enumerate() {
        for f in [0, 1] {
            let (x0, y0, x1, y1) = sprite.bbox(f);
            if x1 <= 0 || y1 <= 0 || x0 >= scene.width as i64 || y0 >= scene.height as i64 {
                return Err(RfpmError::Generation(format!(
                    "sprite {i} is fully outside the frame at frame {f}"
                )));
            }
        }
    }
    let img1 = render_frame(scene, 0);
    let img2 = render_frame(scene, 1);
    let labels = surface_labels(scene, 0);
    let (h, w) = (scene.height, scene.width);
    let mut flow = Tensor::zeros(&[1, 2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let label = labels[y * w + x];
            let (u, v) = if label == 0 {
                scene.bg_vel
            } else {
                scene.sprites[label as usize - 1].vel
            };
            flow.set4(0, 0, y, x, u as f64);
            flow.set4(0, 1, y, x, v as f64);
        }
    }
    Ok(Sample {
        img1,
        img2,
        flow,
        thin,
        seed,
    })
}

/// The two-bar probe: adjacent thin bars moving in opposite directions.
pub fn two_bar_probe(size: usize, seed: u64) -> SyntheticScene {
    let mid = size as i64 / 2;
    SyntheticScene {
        height: size,
        width: size,
        bg_vel: (0, 0),
        bg_seed: seed,
        sprites: vec![
            Sprite {
                shape: SpriteShape::Bar {
                    width: 2,
                    length: size / 2,
                    vertical: true,
                },
                pos: (mid - 3, size as i64 / 4),
                color: [0.95, 0.9, 0.2],
                vel: (3, 0),
            },
            Sprite {
                shape: SpriteShape::Bar {
                    width: 2,
                    length: size / 2,
                    vertical: true,
                },
                pos: (mid + 1, size as i64 / 4),
                color: [0.2, 0.9, 0.95],
                vel: (-3, 0),
            },
        ],
    }
}

/// Dataset generation parameters.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub count: usize,
    /// Square image side length.
    pub size: usize,
    pub seed: u64,
    /// Fraction of thin-structure scenes (deterministically interleaved).
    pub thin_fraction: f64,
    /// Velocity bound per axis in pixels.
    pub max_speed: i64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            count: 100,
            size: 64,
            seed: 42,
            thin_fraction: 0.5,
            max_speed: 6,
        }
    }
}

fn splitmix(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_vel<R: Rng>(rng: &mut R, max_speed: i64, avoid: (i64, i64)) -> (i64, i64) {
    loop {
        let u = rng.gen_range(-max_speed..=max_speed);
        let v = rng.gen_range(-max_speed..=max_speed);
        let du = u - avoid.0;
        let dv = v - avoid.1;
        // move, and move differently from the background
        if (u != 0 || v != 0) && du * du + dv * dv >= 4 {
            return (u, v);
        }
    }
}

fn random_scene(seed: u64, size: usize, thin: bool, max_speed: i64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_speed = max_speed.min(3);
    let bg_vel = (
        rng.gen_range(-bg_speed..=bg_speed),
        rng.gen_range(-bg_speed..=bg_speed),
    );
    let mut sprites = Vec::new();
    let margin = max_speed + 1;
    let s = size as i64;
    let place = |rng: &mut ChaCha8Rng, bw: i64, bh: i64, vel: (i64, i64)| -> (i64, i64) {
        let xlo = margin;
        let xhi = (s - bw - margin).max(xlo + 1);
        let ylo = margin;
        let yhi = (s - bh - margin).max(ylo + 1);
        (
            rng.gen_range(xlo..xhi) - vel.0.min(0),
            rng.gen_range(ylo..yhi) - vel.1.min(0),
        )
    };
    if thin {
        let bars = rng.gen_range(2..=3);
        for _ in 0..bars {
            let width = rng.gen_range(1..=2usize);
            let length = rng.gen_range(8..=(size / 2).max(9));
            let vertical = rng.gen_bool(0.5);
            let vel = draw_vel(&mut rng, max_speed, bg_vel);
            let (bw, bh) = if vertical {
                (width as i64, length as i64)
            } else {
                (length as i64, width as i64)
            };
            let pos = place(&mut rng, bw, bh, vel);
            let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            sprites.push(Sprite {
                shape: SpriteShape::Bar {
                    width,
                    length,
                    vertical,
                },
                pos,
                color,
                vel,
            });
        }
    } else {
        let n = rng.gen_range(1..=3);
        for _ in 0..n {
            let vel = draw_vel(&mut rng, max_speed, bg_vel);
            let color = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            if rng.gen_bool(0.5) {
                let w = rng.gen_range(6..=14usize);
                let h = rng.gen_range(6..=14usize);
                let pos = place(&mut rng, w as i64, h as i64, vel);
                sprites.push(Sprite {
                    shape: SpriteShape::Rect { w, h },
                    pos,
                    color,
                    vel,
                });
            } else {
                let radius = 2.5 + 3.0 * rng.gen::<f64>();
                let r = radius.ceil() as i64;
                let pos = place(&mut rng, 2 * r + 1, 2 * r + 1, vel);
                sprites.push(Sprite {
                    shape: SpriteShape::Disk { radius },
                    pos: (pos.0 + r, pos.1 + r),
                    color,
                    vel,
                });
            }
        }
    }
    SyntheticScene {
        height: size,
        width: size,
        bg_vel,
        bg_seed: splitmix(seed, 999),
        sprites,
    }
}

/// Deterministically generates `spec.count` samples; thin-structure scenes
/// are interleaved so any contiguous split keeps the configured fraction.
pub fn gen_dataset(spec: &GenSpec) -> Result<Vec<Sample>> {
    if spec.count == 0 {
        return Err(RfpmError::Parameter("gen_dataset count must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&spec.thin_fraction) {
        return Err(RfpmError::Parameter("thin_fraction must be in [0,1]".into()));
    }
    if spec.max_speed < 1 {
        return Err(RfpmError::Parameter("max_speed must be >= 1".into()));
    }
    (0..spec.count)
        .map(|i| {
            let thin = is_thin(i, spec.thin_fraction);
            let seed = splitmix(spec.seed, i as u64);
            let scene = random_scene(seed, spec.size, thin, spec.max_speed);
            render_pair(&scene, seed, thin)
        })
        .collect()
}

fn is_thin(i: usize, fraction: f64) -> bool {
    (((i + 1) as f64) * fraction).floor() > ((i as f64) * fraction).floor()
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Geometric + chromatic augmentation parameters. Geometry is always shared
/// across pyramid columns; with probability `ada_probability` each column
/// gets its own chromatic draw (asymmetric augmentation).
#[derive(Clone, Debug)]
pub struct AugmentationSpec {
    /// Square crop size; 0 disables cropping.
    pub crop: usize,
    pub flip_prob: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
    pub ada_probability: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop: 0,
            flip_prob: 0.5,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            noise_sigma: 0.01,
            ada_probability: 0.2,
        }
    }
}

impl AugmentationSpec {
    /// No-op spec: unchanged samples.
    pub fn identity() -> Self {
        Self {
            crop: 0,
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            noise_sigma: 0.0,
            ada_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ada_probability) {
            return Err(RfpmError::Parameter("ada_probability must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(RfpmError::Parameter("flip_prob must be in [0,1]".into()));
        }
        if self.brightness.0 > self.brightness.1 || self.contrast.0 > self.contrast.1 {
            return Err(RfpmError::Parameter("augmentation range lo > hi".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(RfpmError::Parameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training-ready sample: per-column image pairs plus shared ground truth.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    /// One `(I_t, I_t1)` tensor pair per column, or one shared pair.
    pub frames: Vec<(Tensor, Tensor)>,
    pub flow: Tensor,
    pub valid: Tensor,
}

/// Converts 8-bit RGB to a (1,3,H,W) tensor in [0,1].
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            for c in 0..3 {
                t.set4(0, c, y, x, p[c] as f64 / 255.0);
            }
        }
    }
    t
}

/// Unaugmented tensors for evaluation.
pub fn sample_frames(sample: &Sample) -> (Tensor, Tensor) {
    (image_to_tensor(&sample.img1), image_to_tensor(&sample.img2))
}

fn crop_tensor(t: &Tensor, ox: usize, oy: usize, size: usize) -> Tensor {
    let (b, c, _, _) = t.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, c, size, size]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..size {
                for x in 0..size {
                    out.set4(bi, ci, y, x, t.at4(bi, ci, oy + y, ox + x));
                }
            }
        }
    }
    out
}

fn flip_image_tensor(t: &Tensor) -> Tensor {
    let (b, c, h, w) = t.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set4(bi, ci, y, x, t.at4(bi, ci, y, w - 1 - x));
                }
            }
        }
    }
    out
}

/// Mirrors a flow field horizontally and negates the u channel.
pub fn flip_flow(t: &Tensor) -> Tensor {
    let (b, _, h, w) = t.dims4().unwrap();
    let mut out = Tensor::zeros(&[b, 2, h, w]);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                out.set4(bi, 0, y, x, -t.at4(bi, 0, y, w - 1 - x));
                out.set4(bi, 1, y, x, t.at4(bi, 1, y, w - 1 - x));
            }
        }
    }
    out
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; u1 kept away from zero
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn chromatic<R: Rng>(img: &Tensor, spec: &AugmentationSpec, rng: &mut R) -> (f64, f64, Tensor) {
    let scale = rng.gen_range(spec.brightness.0..=spec.brightness.1);
    let contrast = rng.gen_range(spec.contrast.0..=spec.contrast.1);
    (scale, contrast, apply_chromatic(img, scale, contrast, spec.noise_sigma, rng))
}

fn apply_chromatic<R: Rng>(
    img: &Tensor,
    scale: f64,
    contrast: f64,
    sigma: f64,
    rng: &mut R,
) -> Tensor {
    let mut out = img.clone();
    for v in out.data_mut().iter_mut() {
        let mut x = *v;
        if scale != 1.0 {
            x *= scale;
        }
        if contrast != 1.0 {
            x = (x - 0.5) * contrast + 0.5;
        }
        if sigma > 0.0 {
            x += sigma * gaussian(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    out
}

/// Applies one shared geometric transform (crop, flip) to images and flow,
/// then chromatic transforms: with probability `ada_probability` each of
/// the `ncols` columns receives an independent chromatic draw, otherwise a
/// single shared variant is produced. Both frames of a variant share the
/// same brightness/contrast draw. The ground truth is identical across
/// variants.
pub fn augment<R: Rng>(
    sample: &Sample,
    spec: &AugmentationSpec,
    ncols: usize,
    rng: &mut R,
) -> Result<AugmentedSample> {
    spec.validate()?;
    let (mut t1, mut t2) = sample_frames(sample);
    let mut flow = sample.flow.clone();
    if spec.crop > 0 {
        let (h, w) = (sample.height(), sample.width());
        if spec.crop > h || spec.crop > w {
            return Err(RfpmError::Parameter(format!(
                "crop {} larger than image {h}x{w}",
                spec.crop
            )));
        }
        let ox = rng.gen_range(0..=w - spec.crop);
        let oy = rng.gen_range(0..=h - spec.crop);
        t1 = crop_tensor(&t1, ox, oy, spec.crop);
        t2 = crop_tensor(&t2, ox, oy, spec.crop);
        flow = crop_tensor(&flow, ox, oy, spec.crop);
    }
    if spec.flip_prob > 0.0 && rng.gen::<f64>() < spec.flip_prob {
        t1 = flip_image_tensor(&t1);
        t2 = flip_image_tensor(&t2);
        flow = flip_flow(&flow);
    }
    let use_ada = spec.ada_probability > 0.0 && rng.gen::<f64>() < spec.ada_probability;
    let variants = if use_ada { ncols } else { 1 };
    let mut frames = Vec::with_capacity(variants);
    for _ in 0..variants {
        let (scale, contrast, a1) = chromatic(&t1, spec, rng);
        let a2 = apply_chromatic(&t2, scale, contrast, spec.noise_sigma, rng);
        frames.push((a1, a2));
    }
    let (h, w) = {
        let s = flow.shape();
        (s[2], s[3])
    };
    Ok(AugmentedSample {
        frames,
        flow,
        valid: Tensor::ones(&[1, 1, h, w]),
    })
}

// ---------------------------------------------------------------------------
// dataset files
// ---------------------------------------------------------------------------

/// Writes `NNNNN_img1.ppm` / `NNNNN_img2.ppm` / `NNNNN_flow.flo` triplets
/// plus `manifest.txt`.
pub fn write_dataset(dir: &Path, samples: &[Sample], spec: &GenSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "count = {}", samples.len());
    let _ = writeln!(manifest, "size = {}", spec.size);
    let _ = writeln!(manifest, "seed = {}", spec.seed);
    let _ = writeln!(manifest, "thin_fraction = {}", spec.thin_fraction);
    let _ = writeln!(manifest, "max_speed = {}", spec.max_speed);
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&s.img1, &dir.join(format!("{i:05}_img1.ppm")))?;
        write_ppm(&s.img2, &dir.join(format!("{i:05}_img2.ppm")))?;
        write_flo(&s.flow, &dir.join(format!("{i:05}_flow.flo")))?;
        let _ = writeln!(manifest, "sample {i:05} seed={} thin={}", s.seed, u8::from(s.thin));
    }
    atomic_write(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| RfpmError::Format(format!("cannot read manifest: {e}")))?;
    let mut samples = Vec::new();
    for line in manifest.lines() {
        let line = line.trim();
        if !line.starts_with("sample ") {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(RfpmError::Format(format!("bad manifest line: {line}")));
        }
        let idx = fields[1];
        let seed: u64 = fields[2]
            .strip_prefix("seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| RfpmError::Format(format!("bad manifest line: {line}")))?;
        let thin = fields[3] == "thin=1";
        let img1 = read_ppm(&dir.join(format!("{idx}_img1.ppm")))?;
        let img2 = read_ppm(&dir.join(format!("{idx}_img2.ppm")))?;
        let flow = read_flo(&dir.join(format!("{idx}_flow.flo")))?;
        samples.push(Sample {
            img1,
            img2,
            flow,
            thin,
            seed,
        });
    }
    if samples.is_empty() {
        return Err(RfpmError::Format("manifest lists no samples".into()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn static_scene(size: usize) -> SyntheticScene {
        SyntheticScene {
            height: size,
            width: size,
            bg_vel: (0, 0),
            bg_seed: 5,
            sprites: vec![Sprite {
                shape: SpriteShape::Rect { w: 6, h: 5 },
                pos: (4, 7),
                color: [0.9, 0.1, 0.2],
                vel: (0, 0),
            }],
        }
    }

    #[test]
    fn static_scene_renders_identical_frames() {
        let s = render_pair(&static_scene(32), 1, false).unwrap();
        assert_eq!(s.img1, s.img2);
        assert!(s.flow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moving_rect_has_exact_flow() {
        let mut scene = static_scene(32);
        scene.sprites[0].vel = (3, 0);
        scene.bg_vel = (0, 1);
        let s = render_pair(&scene, 2, false).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let on_rect = x >= 4 && x < 10 && y >= 7 && y < 12;
                let expect = if on_rect { (3.0, 0.0) } else { (0.0, 1.0) };
                assert_eq!(s.flow.at4(0, 0, y, x), expect.0, "({x},{y})");
                assert_eq!(s.flow.at4(0, 1, y, x), expect.1, "({x},{y})");
            }
        }
    }

    #[test]
    fn two_bar_probe_flow_structure() {
        let scene = two_bar_probe(32, 3);
        let s = render_pair(&scene, 3, true).unwrap();
        let mut bar_flows = Vec::new();
        for y in 0..32 {
            for x in 0..32 {
                let u = s.flow.at4(0, 0, y, x);
                if u != 0.0 {
                    bar_flows.push(u);
                }
            }
        }
        assert!(!bar_flows.is_empty());
        // per-bar values are +-3 and the mean over both bars is 0
        assert!(bar_flows.iter().all(|&u| u == 3.0 || u == -3.0));
        let mean: f64 = bar_flows.iter().sum::<f64>() / bar_flows.len() as f64;
        assert_eq!(mean, 0.0);
    }

    #[test]
    fn sprite_fully_outside_errors() {
        let mut scene = static_scene(32);
        scene.sprites[0].pos = (100, 100);
        assert!(matches!(
            render_pair(&scene, 0, false),
            Err(RfpmError::Generation(_))
        ));
        // moving fully out by frame 2 also errors
        let mut scene2 = static_scene(32);
        scene2.sprites[0].pos = (26, 7);
        scene2.sprites[0].vel = (40, 0);
        assert!(matches!(
            render_pair(&scene2, 0, false),
            Err(RfpmError::Generation(_))
        ));
    }

    #[test]
    fn dataset_determinism_and_counts() {
        let spec = GenSpec {
            count: 24,
            size: 32,
            seed: 9,
            ..GenSpec::default()
        };
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a.len(), 24);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.img1, y.img1);
            assert_eq!(x.img2, y.img2);
            assert_eq!(x.flow, y.flow);
        }
        let thin = a.iter().filter(|s| s.thin).count();
        assert_eq!(thin, 12);
    }

    #[test]
    fn gen_dataset_bad_params() {
        assert!(gen_dataset(&GenSpec {
            count: 0,
            ..GenSpec::default()
        })
        .is_err());
        assert!(gen_dataset(&GenSpec {
            thin_fraction: 2.0,
            ..GenSpec::default()
        })
        .is_err());
    }

    #[test]
    fn label_tracing_matches_ground_truth() {
        // warping frame-2 labels by the gt flow reproduces frame-1 labels on
        // non-occluded pixels; occluders must have a higher draw order
        for seed in [11u64, 12, 13, 14] {
            for thin in [false, true] {
                let scene = random_scene(seed, 32, thin, 6);
                let labels1 = surface_labels(&scene, 0);
                let labels2 = surface_labels(&scene, 1);
                let s = render_pair(&scene, seed, thin).unwrap();
                for y in 0..32i64 {
                    for x in 0..32i64 {
                        let l1 = labels1[(y * 32 + x) as usize];
                        let u = s.flow.at4(0, 0, y as usize, x as usize) as i64;
                        let v = s.flow.at4(0, 1, y as usize, x as usize) as i64;
                        let (qx, qy) = (x + u, y + v);
                        if qx < 0 || qx >= 32 || qy < 0 || qy >= 32 {
                            continue;
                        }
                        let l2 = labels2[(qy * 32 + qx) as usize];
                        assert!(
                            l2 == l1 || l2 > l1,
                            "seed {seed}: ({x},{y}) label {l1} traced to occluder {l2}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn augment_identity_is_noop() {
        let s = render_pair(&two_bar_probe(32, 4), 4, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&s, &AugmentationSpec::identity(), 3, &mut rng).unwrap();
        assert_eq!(out.frames.len(), 1);
        let (t1, t2) = sample_frames(&s);
        assert_eq!(out.frames[0].0, t1);
        assert_eq!(out.frames[0].1, t2);
        assert_eq!(out.flow, s.flow);
    }

    #[test]
    fn augment_flip_negates_u() {
        let s = render_pair(&two_bar_probe(32, 5), 5, true).unwrap();
        let spec = AugmentationSpec {
            flip_prob: 1.0,
            ..AugmentationSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&s, &spec, 1, &mut rng).unwrap();
        let (t1, _) = sample_frames(&s);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.flow.at4(0, 0, y, x), -s.flow.at4(0, 0, y, 31 - x));
                assert_eq!(out.flow.at4(0, 1, y, x), s.flow.at4(0, 1, y, 31 - x));
                for c in 0..3 {
                    assert_eq!(out.frames[0].0.at4(0, c, y, x), t1.at4(0, c, y, 31 - x));
                }
            }
        }
    }

    #[test]
    fn augment_crop_too_large_errors() {
        let s = render_pair(&two_bar_probe(32, 6), 6, true).unwrap();
        let spec = AugmentationSpec {
            crop: 64,
            ..AugmentationSpec::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            augment(&s, &spec, 1, &mut rng),
            Err(RfpmError::Parameter(_))
        ));
    }

    #[test]
    fn augment_ada_gives_distinct_column_variants() {
        let s = render_pair(&two_bar_probe(32, 7), 7, true).unwrap();
        let spec = AugmentationSpec {
            ada_probability: 1.0,
            noise_sigma: 0.02,
            ..AugmentationSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&s, &spec, 3, &mut rng).unwrap();
        assert_eq!(out.frames.len(), 3);
        assert_ne!(out.frames[0].0, out.frames[1].0);
        assert_ne!(out.frames[1].0, out.frames[2].0);
        // ground truth is shared across variants by construction
        assert_eq!(out.flow, s.flow);
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            count: 4,
            size: 32,
            seed: 21,
            ..GenSpec::default()
        };
        let samples = gen_dataset(&spec).unwrap();
        write_dataset(dir.path(), &samples, &spec).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.img1, b.img1);
            assert_eq!(a.img2, b.img2);
            assert_eq!(a.thin, b.thin);
            // integer flows survive the f32 file format exactly
            assert_eq!(a.flow, b.flow);
        }
    }
}
