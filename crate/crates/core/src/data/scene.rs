use std::f64::consts::PI;

use rand::Rng as _;

use super::{DepthMap, Grid, LabelMap};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, STREAM_DATA};
use crate::tensor::{Shape, Tensor};
use crate::unet::SPATIAL_MULTIPLE;

pub const MIN_OBJECTS: usize = 3;
pub const MAX_OBJECTS: usize = 8;

const SKY_DEPTH: f64 = 8.0;
const NEAR_DEPTH: f64 = 0.5;
const FAR_DEPTH: f64 = 6.0;
/// Apparent object height in image heights at unit depth.
const OBJECT_SCALE: f64 = 0.32;

/// Peak relative amplitude of an object's oriented texture.
const OBJECT_TEXTURE: f64 = 0.35;

/// Half-width of the hue band around each class's hue, as a fraction of the
/// colour wheel.
const HUE_JITTER: f64 = 0.06;

const SHAPE_NAMES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

/// A rendered scene with its per-pixel ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `(1, 3, h, w)` linear RGB in `[0, 1]`.
    pub image: Tensor<f64>,
    pub labels: LabelMap,
    pub depth: DepthMap,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn width(&self) -> usize {
        self.labels.width()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SceneOptions {
    /// Overrides the random object count. `Some(0)` renders background only.
    pub objects: Option<usize>,
}

/// Names for classes `0..num_classes`. Class 0 is background; object classes
/// cycle through the three shapes.
pub fn class_names(num_classes: usize) -> Vec<String> {
    let mut names = vec!["background".to_string()];
    for c in 1..num_classes {
        let base = SHAPE_NAMES[(c - 1) % 3];
        let round = (c - 1) / 3;
        names.push(if round == 0 { base.to_string() } else { format!("{base}-{}", round + 1) });
    }
    names
}

pub fn generate_scene(seed: u64, height: usize, width: usize, num_classes: usize) -> Result<SceneSample> {
    generate_scene_with(seed, height, width, num_classes, &SceneOptions::default())
}

pub fn generate_scene_with(
    seed: u64,
    height: usize,
    width: usize,
    num_classes: usize,
    options: &SceneOptions,
) -> Result<SceneSample> {
    if height == 0 || width == 0 || height % SPATIAL_MULTIPLE != 0 || width % SPATIAL_MULTIPLE != 0 {
        return Err(Error::invalid(format!(
            "scene size {height}x{width} must be positive multiples of {SPATIAL_MULTIPLE}"
        )));
    }
    if num_classes < 3 || num_classes > u16::MAX as usize {
        return Err(Error::invalid(format!("need at least 3 classes, got {num_classes}")));
    }
    let mut rng = substream(seed, STREAM_DATA);
    let (h, w) = (height as f64, width as f64);

    let horizon = rng.gen_range(0.25..0.4) * h;
    let ground_depth = |y: f64| {
        if y < horizon {
            SKY_DEPTH
        } else {
            (NEAR_DEPTH * (h - horizon) / (y - horizon + 0.5)).clamp(NEAR_DEPTH, FAR_DEPTH)
        }
    };

    let mut labels = Grid::filled(height, width, 0u16);
    let mut depth = Grid::filled(height, width, 0.0);
    let mut albedo = vec![[0.0f64; 3]; height * width];

    let sky_tint = rng.gen_range(0.75..1.0);
    let sky = [0.55 * sky_tint, 0.65 * sky_tint, 0.8 * sky_tint];
    let ground_base = {
        let g = rng.gen_range(0.3..0.5);
        [g * rng.gen_range(0.9..1.1), g, g * rng.gen_range(0.8..1.0)]
    };
    let ground_tex = Texture::random(&mut rng, None, 0.12);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        for x in 0..width {
            let i = y * width + x;
            depth.data_mut()[i] = ground_depth(yc);
            albedo[i] = if yc < horizon {
                let fade = 1.0 - 0.25 * yc / horizon;
                sky.map(|v| v * fade)
            } else {
                let t = 1.0 + ground_tex.at(x as f64, yc);
                ground_base.map(|v| v * t)
            };
        }
    }

    let count = options.objects.unwrap_or_else(|| rng.gen_range(MIN_OBJECTS..=MAX_OBJECTS));
    let object_classes = num_classes - 1;
    let class_offset = rng.gen_range(0..object_classes);
    let mut objects: Vec<Object> = (0..count)
        .map(|i| {
            let class = 1 + (class_offset + i) % object_classes;
            Object::random(&mut rng, class, object_classes, h, w, horizon, &ground_depth)
        })
        .collect();
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for obj in &objects {
        obj.paint(&mut labels, &mut depth, &mut albedo);
    }

    let illum = Illumination::random(&mut rng);
    let mut image = Tensor::zeros(Shape::new(1, 3, height, width));
    for y in 0..height {
        for x in 0..width {
            let l = illum.at((x as f64 + 0.5) / w, (y as f64 + 0.5) / h);
            let a = albedo[y * width + x];
            for (c, v) in a.iter().enumerate() {
                image.set(0, c, y, x, (v * l).clamp(0.0, 1.0));
            }
        }
    }
    Ok(SceneSample { image, labels, depth })
}

/// Base albedo drawn around a hue owned by the class.
fn class_color(rng: &mut Rng, class: usize, object_classes: usize) -> [f64; 3] {
    let hue = ((class - 1) as f64 / object_classes as f64 + rng.gen_range(-HUE_JITTER..HUE_JITTER)).rem_euclid(1.0);
    let saturation = rng.gen_range(0.45..0.85);
    let value = rng.gen_range(0.45..0.95);
    hsv_to_rgb(hue, saturation, value)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let k = |n: f64| {
        let k = (n + 6.0 * h) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [k(5.0), k(3.0), k(1.0)]
}

/// Band-limited noise: a few oriented sinusoids.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    /// `orientation = None` draws isotropic directions.
    fn random(rng: &mut Rng, orientation: Option<f64>, amplitude: f64) -> Self {
        let n = 3;
        let waves = (0..n)
            .map(|_| {
                let theta = match orientation {
                    Some(t) => t + rng.gen_range(-0.15..0.15),
                    None => rng.gen_range(0.0..PI),
                };
                let freq = rng.gen_range(0.15..0.3) * 2.0 * PI;
                let amp = amplitude / n as f64 * rng.gen_range(0.7..1.3);
                (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..2.0 * PI), amp)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum()
    }
}

/// Multiplicative linear ramp across the frame.
struct Illumination {
    dir: (f64, f64),
    low: f64,
    high: f64,
}

impl Illumination {
    fn random(rng: &mut Rng) -> Self {
        let a = rng.gen_range(0.0..2.0 * PI);
        Self {
            dir: (a.cos(), a.sin()),
            low: rng.gen_range(0.25..0.5),
            high: rng.gen_range(0.9..1.1),
        }
    }

    /// `u, v` are normalized image coordinates.
    fn at(&self, u: f64, v: f64) -> f64 {
        // Projection of the unit square onto `dir`, rescaled to [0, 1].
        let (dx, dy) = self.dir;
        let lo = dx.min(0.0) + dy.min(0.0);
        let hi = dx.max(0.0) + dy.max(0.0);
        let s = (u * dx + v * dy - lo) / (hi - lo);
        self.low + (self.high - self.low) * s
    }
}

enum Outline {
    Rect,
    Ellipse,
    Triangle,
}

struct Object {
    class: u16,
    outline: Outline,
    depth: f64,
    /// Horizontal center and bottom edge, in pixels.
    cx: f64,
    foot: f64,
    half_width: f64,
    height: f64,
    color: [f64; 3],
    texture: Texture,
}

impl Object {
    fn random(
        rng: &mut Rng,
        class: usize,
        object_classes: usize,
        h: f64,
        w: f64,
        horizon: f64,
        ground_depth: &impl Fn(f64) -> f64,
    ) -> Self {
        let foot = rng.gen_range(horizon + 2.0..=h);
        let depth = ground_depth(foot - 0.5);
        let height = (OBJECT_SCALE * h / depth).clamp(5.0, 0.7 * h);
        let half_width = 0.5 * height * rng.gen_range(0.7..1.5);
        let outline = match (class - 1) % 3 {
            0 => Outline::Rect,
            1 => Outline::Ellipse,
            _ => Outline::Triangle,
        };
        let orientation = PI * (class - 1) as f64 / object_classes as f64;
        Self {
            class: class as u16,
            outline,
            depth,
            cx: rng.gen_range(0.0..w),
            foot,
            half_width,
            height,
            color: class_color(rng, class, object_classes),
            texture: Texture::random(rng, Some(orientation), OBJECT_TEXTURE),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let top = self.foot - self.height;
        if y < top || y > self.foot {
            return false;
        }
        let dx = (x - self.cx).abs();
        match self.outline {
            Outline::Rect => dx <= self.half_width,
            Outline::Ellipse => {
                let u = dx / self.half_width;
                let v = (y - (self.foot - 0.5 * self.height)) / (0.5 * self.height);
                u * u + v * v <= 1.0
            }
            Outline::Triangle => dx <= self.half_width * (y - top) / self.height,
        }
    }

    fn paint(&self, labels: &mut LabelMap, depth: &mut DepthMap, albedo: &mut [[f64; 3]]) {
        let (height, width) = (labels.height(), labels.width());
        let y0 = (self.foot - self.height).floor().max(0.0) as usize;
        let y1 = (self.foot.ceil() as usize).min(height);
        let x0 = (self.cx - self.half_width).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.half_width).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            let yc = y as f64 + 0.5;
            for x in x0..x1 {
                let xc = x as f64 + 0.5;
                if self.contains(xc, yc) {
                    labels.set(y, x, self.class);
                    depth.set(y, x, self.depth);
                    let t = 1.0 + self.texture.at(xc, yc);
                    albedo[y * width + x] = self.color.map(|v| (v * t).clamp(0.0, 1.0));
                }
            }
        }
    }
}
