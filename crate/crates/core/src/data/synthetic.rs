//! Procedural scenes of coloured shapes with exact per-pixel ground truth.
//!
//! Class 0 is background; class `i >= 1` is the `i`-th [`ShapeKind`]. Each
//! shape kind has a prototype colour that is perturbed per instance by up to
//! `color_jitter` per channel, so colour is only a partial cue and large
//! jitter leaves geometry as the main signal. Membership
//! is tested at pixel centres `(x + 0.5, y + 0.5)`; later shapes occlude
//! earlier ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Image, LabelMap, SegSample};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    Diamond,
    Ring,
}

const KINDS: [ShapeKind; 5] = [
    ShapeKind::Rectangle,
    ShapeKind::Circle,
    ShapeKind::Triangle,
    ShapeKind::Diamond,
    ShapeKind::Ring,
];

pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rectangle { y0: f64, x0: f64, h: f64, w: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
    Diamond { cy: f64, cx: f64, ry: f64, rx: f64 },
    Ring { cy: f64, cx: f64, r_in: f64, r_out: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Circle { .. } => ShapeKind::Circle,
            Shape::Triangle { .. } => ShapeKind::Triangle,
            Shape::Diamond { .. } => ShapeKind::Diamond,
            Shape::Ring { .. } => ShapeKind::Ring,
        }
    }

    pub fn class(&self) -> u8 {
        KINDS.iter().position(|&k| k == self.kind()).expect("known kind") as u8 + 1
    }

    /// Analytic membership of the point `(y, x)`.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rectangle { y0, x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Triangle { pts } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Diamond { cy, cx, ry, rx } => (y - cy).abs() / ry + (x - cx).abs() / rx <= 1.0,
            Shape::Ring { cy, cx, r_in, r_out } => {
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
        }
    }
}

/// A shape and its fill colour.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub shape: Shape,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default = "default_max_shapes")]
    pub max_shapes: usize,
    /// Per-channel half-width of the uniform perturbation around the class colour.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f32,
}

fn default_color_jitter() -> f32 {
    0.15
}

fn default_noise() -> f32 {
    0.06
}

fn default_max_shapes() -> usize {
    4
}

impl SyntheticConfig {
    pub fn new(n_images: usize, size: (usize, usize), num_classes: usize, seed: u64) -> Self {
        Self {
            n_images,
            height: size.0,
            width: size.1,
            num_classes,
            seed,
            noise: default_noise(),
            max_shapes: default_max_shapes(),
            color_jitter: default_color_jitter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > KINDS.len() + 1 {
            return Err(Error::Config(format!(
                "synthetic data supports 2..={} classes, got {}",
                KINDS.len() + 1,
                self.num_classes
            )));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Config(format!(
                "image size {}x{} too small to place a shape (min {MIN_SIDE})",
                self.height, self.width
            )));
        }
        if !(self.color_jitter >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("noise and color_jitter must be non-negative".into()));
        }
        if self.max_shapes == 0 {
            return Err(Error::Config("max_shapes must be positive".into()));
        }
        Ok(())
    }
}

const PROTOTYPES: [[f32; 3]; 5] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.3, 0.85],
    [0.85, 0.8, 0.2],
    [0.75, 0.25, 0.8],
];

fn class_color<R: Rng>(rng: &mut R, class: u8, jitter: f32) -> [f32; 3] {
    let proto = PROTOTYPES[usize::from(class) - 1];
    std::array::from_fn(|c| {
        let d = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        (proto[c] + d).clamp(0.0, 1.0)
    })
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn random_shape<R: Rng>(rng: &mut R, kind: ShapeKind, h: usize, w: usize) -> Shape {
    let side = h.min(w) as f64;
    let r = rng.random_range(side * 0.09..side * 0.2);
    let cy = rng.random_range(r..h as f64 - r);
    let cx = rng.random_range(r..w as f64 - r);
    match kind {
        ShapeKind::Rectangle => {
            let hh = rng.random_range(r * 1.2..r * 2.2);
            let ww = rng.random_range(r * 1.2..r * 2.2);
            Shape::Rectangle {
                y0: (cy - hh / 2.0).max(0.0),
                x0: (cx - ww / 2.0).max(0.0),
                h: hh,
                w: ww,
            }
        }
        ShapeKind::Circle => Shape::Circle { cy, cx, r },
        ShapeKind::Triangle => {
            let rot = rng.random_range(0.0..std::f64::consts::TAU);
            let r = r * 1.2;
            let pts = std::array::from_fn(|i| {
                let a = rot + i as f64 * std::f64::consts::TAU / 3.0;
                (cy + r * a.sin(), cx + r * a.cos())
            });
            Shape::Triangle { pts }
        }
        ShapeKind::Diamond => Shape::Diamond {
            cy,
            cx,
            ry: r * rng.random_range(0.9..1.3),
            rx: r * rng.random_range(0.9..1.3),
        },
        ShapeKind::Ring => Shape::Ring {
            cy,
            cx,
            r_in: r * 0.5,
            r_out: r,
        },
    }
}

/// Rasterizes a scene: textured background, shapes, then additive noise.
pub fn render_scene<R: Rng>(
    rng: &mut R,
    shapes: &[PlacedShape],
    height: usize,
    width: usize,
    noise: f32,
) -> (Image, LabelMap) {
    let mut image = Image::zeros(3, height, width);
    let mut label = LabelMap::filled(height, width, 0);
    let base = random_color(rng);
    let stripe = random_color(rng);
    let fy = rng.random_range(0.05..0.4);
    let fx = rng.random_range(0.05..0.4);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 + 0.5 * (fy * y as f32 + fx * x as f32 + phase).sin();
            for c in 0..3 {
                image.plane_mut(c)[y * width + x] = 0.7 * base[c] + 0.3 * t * stripe[c];
            }
        }
    }
    for placed in shapes {
        let class = placed.shape.class();
        for y in 0..height {
            for x in 0..width {
                if placed.shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    label.set(y, x, class);
                    for c in 0..3 {
                        image.plane_mut(c)[y * width + x] = placed.color[c];
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0f32, noise).expect("positive noise");
        for v in &mut image.values {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    }
    (image, label)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn sample_id(index: usize) -> String {
    format!("syn_{index:05}")
}

/// Generates the dataset in memory; ids are `syn_00000`, `syn_00001`, ...
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let kinds = &KINDS[..cfg.num_classes - 1];
    let samples = (0..cfg.n_images)
        .map(|i| {
            let mut rng = image_rng(cfg.seed, i);
            let n = rng.random_range(1..=cfg.max_shapes);
            let shapes: Vec<PlacedShape> = (0..n)
                .map(|_| {
                    let kind = kinds[rng.random_range(0..kinds.len())];
                    let shape = random_shape(&mut rng, kind, cfg.height, cfg.width);
                    let color = class_color(&mut rng, shape.class(), cfg.color_jitter);
                    PlacedShape { shape, color }
                })
                .collect();
            let (image, label) = render_scene(&mut rng, &shapes, cfg.height, cfg.width, cfg.noise);
            SegSample::new(sample_id(i), image, Some(label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes: cfg.num_classes,
        samples,
    })
}
