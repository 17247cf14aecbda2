//! Geometric and photometric augmentation.
//!
//! Geometry (flip, scale, crop) is sampled once as [`AugmentParams`] and then
//! applied to the image and to any number of aligned per-pixel maps, so
//! labels, pseudo-labels, confidences and masks stay registered.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Grid, Image, SegSample, IGNORE_INDEX};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongAugConfig {
    pub enabled: bool,
    /// Max relative change for brightness, contrast and saturation.
    pub color_jitter: f32,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub cutout_prob: f64,
    /// Cutout side length as a fraction of the crop side.
    pub cutout_frac: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            color_jitter: 0.4,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            cutout_prob: 0.5,
            cutout_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale_range: (f64, f64),
    pub crop: (usize, usize),
    /// Photometric ops, applied to unlabeled images only.
    #[serde(default)]
    pub strong: StrongAugConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            scale_range: (0.5, 2.0),
            crop: (321, 321),
            strong: StrongAugConfig::default(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled geometric transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub src: (usize, usize),
    pub scaled: (usize, usize),
    /// Top-left corner of the crop in scaled coordinates; negative means padding.
    pub origin: (isize, isize),
    pub crop: (usize, usize),
}

fn offset_range(scaled: usize, crop: usize) -> (isize, isize) {
    let d = scaled as isize - crop as isize;
    (d.min(0), d.max(0))
}

impl AugmentParams {
    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig, src: (usize, usize)) -> Self {
        let flip = cfg.flip && rng.random_bool(0.5);
        let (lo, hi) = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let scaled = scaled_dims(src, scale);
        let (ylo, yhi) = offset_range(scaled.0, cfg.crop.0);
        let (xlo, xhi) = offset_range(scaled.1, cfg.crop.1);
        let origin = (
            rng.random_range(ylo as i64..=yhi as i64) as isize,
            rng.random_range(xlo as i64..=xhi as i64) as isize,
        );
        Self {
            flip,
            scale,
            src,
            scaled,
            origin,
            crop: cfg.crop,
        }
    }

    /// Centred crop at a fixed scale with no flip.
    pub fn centered(src: (usize, usize), scale: f64, flip: bool, crop: (usize, usize)) -> Self {
        let scaled = scaled_dims(src, scale);
        let origin = (
            (scaled.0 as isize - crop.0 as isize) / 2,
            (scaled.1 as isize - crop.1 as isize) / 2,
        );
        Self {
            flip,
            scale,
            src,
            scaled,
            origin,
            crop,
        }
    }

    /// Source pixel feeding output pixel `(r, c)`, or `None` for padding.
    pub fn source_of(&self, r: usize, c: usize) -> Option<(usize, usize)> {
        let y = self.origin.0 + r as isize;
        let x = self.origin.1 + c as isize;
        if y < 0 || x < 0 || y >= self.scaled.0 as isize || x >= self.scaled.1 as isize {
            return None;
        }
        let sy = nearest(y as usize, self.scaled.0, self.src.0);
        let mut sx = nearest(x as usize, self.scaled.1, self.src.1);
        if self.flip {
            sx = self.src.1 - 1 - sx;
        }
        Some((sy, sx))
    }

    fn check(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.src {
            return Err(Error::Contract(format!(
                "augmentation sampled for {:?}, applied to {dims:?}",
                self.src
            )));
        }
        Ok(())
    }

    /// Applies the transform to a per-pixel map, filling padding with `pad`.
    pub fn apply_grid<T: Clone>(&self, grid: &Grid<T>, pad: T) -> Result<Grid<T>> {
        self.check(grid.dims())?;
        let (ch, cw) = self.crop;
        let mut values = Vec::with_capacity(ch * cw);
        for r in 0..ch {
            for c in 0..cw {
                values.push(match self.source_of(r, c) {
                    Some((y, x)) => grid.get(y, x).clone(),
                    None => pad.clone(),
                });
            }
        }
        Grid::from_vec(ch, cw, values)
    }

    /// Applies the transform to an image; padding takes the per-channel mean.
    pub fn apply_image(&self, image: &Image) -> Result<Image> {
        self.check((image.height, image.width))?;
        let (ch, cw) = self.crop;
        let mut out = Image::zeros(image.channels, ch, cw);
        for c in 0..image.channels {
            let src = image.plane(c);
            let mean = src.iter().sum::<f32>() / src.len().max(1) as f32;
            let dst = out.plane_mut(c);
            for r in 0..ch {
                for col in 0..cw {
                    dst[r * cw + col] = match self.source_of(r, col) {
                        Some((y, x)) => src[y * image.width + x],
                        None => mean,
                    };
                }
            }
        }
        Ok(out)
    }

    /// Mask of output pixels that come from the source image (not padding).
    pub fn valid_mask(&self) -> Grid<bool> {
        let (ch, cw) = self.crop;
        let mut g = Grid::filled(ch, cw, false);
        for r in 0..ch {
            for c in 0..cw {
                g.set(r, c, self.source_of(r, c).is_some());
            }
        }
        g
    }
}

fn scaled_dims(src: (usize, usize), scale: f64) -> (usize, usize) {
    (
        ((src.0 as f64 * scale).round() as usize).max(1),
        ((src.1 as f64 * scale).round() as usize).max(1),
    )
}

/// Nearest-neighbour source index under half-pixel-centre mapping.
fn nearest(dst: usize, n_dst: usize, n_src: usize) -> usize {
    let s = ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64).floor() as usize;
    s.min(n_src - 1)
}

/// Random flip, scale and crop applied jointly to image and label.
pub fn augment<R: Rng>(sample: &SegSample, cfg: &AugmentConfig, rng: &mut R) -> Result<SegSample> {
    let params = AugmentParams::sample(rng, cfg, sample.dims());
    apply_params(sample, &params)
}

pub fn apply_params(sample: &SegSample, params: &AugmentParams) -> Result<SegSample> {
    let image = params.apply_image(&sample.image)?;
    let label = match &sample.label {
        Some(l) => Some(params.apply_grid(l, IGNORE_INDEX)?),
        None => None,
    };
    SegSample::new(sample.id.clone(), image, label)
}

/// Axis-aligned rectangle `(y0, x0, h, w)` blanked by cutout.
pub type CutoutRect = (usize, usize, usize, usize);

/// Photometric perturbation of an unlabeled image. Returns the cutout
/// rectangle, if any, so callers can drop the covered targets.
pub fn strong_augment<R: Rng>(image: &mut Image, cfg: &StrongAugConfig, rng: &mut R) -> Option<CutoutRect> {
    if !cfg.enabled {
        return None;
    }
    if rng.random_bool(cfg.jitter_prob) {
        color_jitter(image, cfg.color_jitter, rng);
    }
    if image.channels == 3 && rng.random_bool(cfg.grayscale_prob) {
        grayscale(image);
    }
    if rng.random_bool(cfg.blur_prob) {
        blur3(image);
    }
    if rng.random_bool(cfg.cutout_prob) {
        let ch = ((image.height as f64 * cfg.cutout_frac).round() as usize).clamp(1, image.height);
        let cw = ((image.width as f64 * cfg.cutout_frac).round() as usize).clamp(1, image.width);
        let y0 = rng.random_range(0..=image.height - ch);
        let x0 = rng.random_range(0..=image.width - cw);
        for c in 0..image.channels {
            let fill: f32 = rng.random_range(0.0..1.0);
            let w = image.width;
            let plane = image.plane_mut(c);
            for y in y0..y0 + ch {
                plane[y * w + x0..y * w + x0 + cw].fill(fill);
            }
        }
        return Some((y0, x0, ch, cw));
    }
    None
}

fn color_jitter<R: Rng>(image: &mut Image, strength: f32, rng: &mut R) {
    let factor = |rng: &mut R| 1.0 + rng.random_range(-strength..=strength);
    let brightness = factor(rng);
    let contrast = factor(rng);
    let saturation = factor(rng);
    for v in &mut image.values {
        *v *= brightness;
    }
    let mean = image.values.iter().sum::<f32>() / image.values.len() as f32;
    for v in &mut image.values {
        *v = mean + (*v - mean) * contrast;
    }
    if image.channels == 3 {
        let hw = image.height * image.width;
        for j in 0..hw {
            let g = luminance(image, j);
            for c in 0..3 {
                let v = &mut image.values[c * hw + j];
                *v = g + (*v - g) * saturation;
            }
        }
    }
    for v in &mut image.values {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luminance(image: &Image, j: usize) -> f32 {
    let hw = image.height * image.width;
    0.299 * image.values[j] + 0.587 * image.values[hw + j] + 0.114 * image.values[2 * hw + j]
}

fn grayscale(image: &mut Image) {
    let hw = image.height * image.width;
    for j in 0..hw {
        let g = luminance(image, j);
        for c in 0..3 {
            image.values[c * hw + j] = g;
        }
    }
}

/// 3x3 binomial blur with replicate borders.
fn blur3(image: &mut Image) {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let (h, w) = (image.height, image.width);
    for c in 0..image.channels {
        let src = image.plane(c).to_vec();
        let dst = image.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in K.iter().enumerate() {
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in K.iter().enumerate() {
                        let xx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += ky * kx * src[yy * w + xx];
                    }
                }
                dst[y * w + x] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::LabelMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> SegSample {
        let image = Image::from_vec(3, h, w, (0..3 * h * w).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
        let label = LabelMap::from_vec(h, w, (0..h * w).map(|i| (i % 4) as u8).collect()).unwrap();
        SegSample::new("s", image, Some(label)).unwrap()
    }

    #[test]
    fn identity_transform() {
        let s = sample(8, 10);
        let p = AugmentParams::centered((8, 10), 1.0, false, (8, 10));
        assert_eq!(apply_params(&s, &p).unwrap(), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(6, 7);
        let p = AugmentParams::centered((6, 7), 1.0, true, (6, 7));
        let once = apply_params(&s, &p).unwrap();
        assert_ne!(once, s);
        assert_eq!(apply_params(&once, &p).unwrap(), s);
    }

    #[test]
    fn labels_follow_the_image() {
        // encode each pixel's source position in the image so alignment can be read back
        let (h, w) = (12, 9);
        let mut image = Image::zeros(3, h, w);
        let mut label = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                image.plane_mut(0)[y * w + x] = y as f32;
                image.plane_mut(1)[y * w + x] = x as f32;
                label.set(y, x, ((y * 7 + x * 3) % 5) as u8);
            }
        }
        let s = SegSample::new("a", image, Some(label.clone())).unwrap();
        let cfg = AugmentConfig {
            flip: true,
            scale_range: (0.5, 2.0),
            crop: (10, 10),
            strong: StrongAugConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let p = AugmentParams::sample(&mut rng, &cfg, (h, w));
            let out = apply_params(&s, &p).unwrap();
            let ol = out.label.as_ref().unwrap();
            for r in 0..10 {
                for c in 0..10 {
                    match p.source_of(r, c) {
                        Some((y, x)) => {
                            assert_eq!(out.image.plane(0)[r * 10 + c], y as f32);
                            assert_eq!(out.image.plane(1)[r * 10 + c], x as f32);
                            assert_eq!(*ol.get(r, c), *label.get(y, x));
                        }
                        None => assert_eq!(*ol.get(r, c), IGNORE_INDEX),
                    }
                }
            }
        }
    }

    #[test]
    fn sampled_scale_and_crop_respect_config() {
        let cfg = AugmentConfig {
            flip: false,
            scale_range: (0.75, 1.25),
            crop: (16, 16),
            strong: StrongAugConfig::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = AugmentParams::sample(&mut rng, &cfg, (20, 20));
            assert!((0.75..=1.25).contains(&p.scale));
            assert!(!p.flip);
            let out = augment(&sample(20, 20), &cfg, &mut rng).unwrap();
            assert_eq!(out.dims(), (16, 16));
        }
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let p = AugmentParams::centered((4, 4), 1.0, false, (4, 4));
        assert!(p.apply_grid(&Grid::filled(5, 4, 0u8), 0).is_err());
    }

    #[test]
    fn strong_ops_keep_range_and_report_cutout() {
        let cfg = StrongAugConfig {
            enabled: true,
            cutout_prob: 1.0,
            ..StrongAugConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut img = sample(16, 16).image;
        let rect = strong_augment(&mut img, &cfg, &mut rng).unwrap();
        assert!(img.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((rect.2, rect.3), (4, 4));
        let disabled = StrongAugConfig::default();
        let before = img.clone();
        assert!(strong_augment(&mut img, &disabled, &mut rng).is_none());
        assert_eq!(img, before);
    }
}
