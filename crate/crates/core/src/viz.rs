//! Figure export: prediction triptychs, boundary overlays and training curves.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::boundary::BoundaryMask;
use crate::error::{Error, IoContext, Result};
use crate::maps::{Image, LabelMap};
use crate::training::MetricsRecord;

const SEPARATOR: u32 = 2;
const IGNORE_COLOR: [u8; 3] = [0, 0, 0];
const BOUNDARY_COLOR: [u8; 3] = [255, 255, 255];

/// Distinct colour per class, cycling after the first eight.
pub fn class_color(class: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [40, 40, 40],
        [230, 80, 60],
        [60, 170, 90],
        [70, 110, 230],
        [240, 200, 50],
        [190, 80, 200],
        [60, 200, 210],
        [250, 150, 60],
    ];
    if class == crate::maps::IGNORE_INDEX {
        return IGNORE_COLOR;
    }
    let c = BASE[class as usize % BASE.len()];
    // later cycles get darker so they stay distinguishable
    let shade = 1.0 - 0.25 * (class as usize / BASE.len()).min(3) as f32;
    c.map(|v| (v as f32 * shade) as u8)
}

/// First three channels as RGB (grey for single-channel images).
pub fn image_to_rgb(image: &Image) -> RgbImage {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(image.width as u32, image.height as u32, |x, y| {
        let i = y as usize * image.width + x as usize;
        let ch = |c: usize| to_u8(image.plane(c.min(image.channels - 1))[i]);
        Rgb([ch(0), ch(1), ch(2)])
    })
}

pub fn labels_to_rgb(labels: &LabelMap) -> RgbImage {
    let (h, w) = labels.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(class_color(*labels.get(y as usize, x as usize))))
}

/// Input, ground truth (grey when unknown) and prediction side by side.
pub fn triptych(image: &Image, gt: Option<&LabelMap>, pred: &LabelMap) -> RgbImage {
    let (w, h) = (image.width as u32, image.height as u32);
    let mut out = RgbImage::from_pixel(3 * w + 2 * SEPARATOR, h, Rgb([255, 255, 255]));
    let gt_panel = match gt {
        Some(g) => labels_to_rgb(g),
        None => RgbImage::from_pixel(w, h, Rgb([128, 128, 128])),
    };
    for (k, panel) in [image_to_rgb(image), gt_panel, labels_to_rgb(pred)].iter().enumerate() {
        image::imageops::replace(&mut out, panel, (k as u32 * (w + SEPARATOR)) as i64, 0);
    }
    out
}

/// The input image with mask pixels painted white. Returns the image and the
/// number of painted pixels.
pub fn boundary_overlay(image: &Image, mask: &BoundaryMask) -> (RgbImage, usize) {
    let mut out = image_to_rgb(image);
    let mut drawn = 0;
    for (y, x, px) in out.enumerate_pixels_mut() {
        if *mask.get(y as usize, x as usize) {
            *px = Rgb(BOUNDARY_COLOR);
            drawn += 1;
        }
    }
    (out, drawn)
}

/// Single-channel export of a mask: 255 on boundary pixels, 0 elsewhere.
pub fn mask_to_gray(mask: &BoundaryMask) -> GrayImage {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if *mask.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

/// Reads a metrics stream, one JSON record per line. Empty streams are errors.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("metrics stream {} is empty", path.display())));
    }
    Ok(out)
}

/// CSV with one column per metrics series; missing values are written as `nan`.
pub fn write_curves_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", MetricsRecord::COLUMNS.join(",")).at(path)?;
    for r in records {
        let row: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).at(path)?;
    }
    w.flush().at(path)
}

const PANEL: (u32, u32) = (240, 120);
const MARGIN: u32 = 6;

/// Small-multiples line chart: one panel per series against the step index,
/// laid out row-major in [`MetricsRecord::COLUMNS`] order (step excluded).
pub fn plot_curves(records: &[MetricsRecord]) -> RgbImage {
    let series = MetricsRecord::COLUMNS.len() - 1;
    let cols = 3u32;
    let rows = (series as u32).div_ceil(cols);
    let mut img = RgbImage::from_pixel(cols * PANEL.0, rows * PANEL.1, Rgb([255, 255, 255]));
    let values: Vec<[f64; 12]> = records.iter().map(MetricsRecord::values).collect();
    for s in 0..series {
        let (px, py) = ((s as u32 % cols) * PANEL.0, (s as u32 / cols) * PANEL.1);
        let (x0, y0) = (px + MARGIN, py + MARGIN);
        let (w, h) = (PANEL.0 - 2 * MARGIN, PANEL.1 - 2 * MARGIN);
        draw_rect(&mut img, (x0, y0), (w, h), [200, 200, 200]);
        let ys: Vec<f64> = values.iter().map(|v| v[s + 1]).collect();
        let finite = ys.iter().copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            continue;
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = ys.len().max(2) - 1;
        let point = |i: usize, v: f64| {
            let x = x0 as f64 + (w - 1) as f64 * i as f64 / n as f64;
            let y = (y0 + h - 1) as f64 - (h - 1) as f64 * (v - lo) / span;
            (x.round() as i64, y.round() as i64)
        };
        let mut prev = None;
        for (i, &v) in ys.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = point(i, v);
            draw_line(&mut img, prev.unwrap_or(p), p, [30, 90, 200]);
            prev = Some(p);
        }
    }
    img
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn draw_rect(img: &mut RgbImage, (x, y): (u32, u32), (w, h): (u32, u32), c: [u8; 3]) {
    let (x, y, w, h) = (x as i64, y as i64, w as i64, h as i64);
    draw_line(img, (x, y), (x + w - 1, y), c);
    draw_line(img, (x, y + h - 1), (x + w - 1, y + h - 1), c);
    draw_line(img, (x, y), (x, y + h - 1), c);
    draw_line(img, (x + w - 1, y), (x + w - 1, y + h - 1), c);
}

// Bresenham
fn draw_line(img: &mut RgbImage, (mut x, mut y): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::boundary_from_labels;
    use crate::maps::Grid;

    fn record(step: u64, total: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            epoch: 0,
            stage: 1,
            lr: 0.01,
            labeled: total,
            weighted: 0.0,
            boundary: 0.0,
            total,
            mean_confidence: None,
            threshold: 0.3,
            retention_fraction: 1.0,
            boundary_fraction: 0.0,
        }
    }

    #[test]
    fn constant_prediction_draws_no_boundary() {
        let img = Image::zeros(3, 8, 8);
        let mask = boundary_from_labels(&Grid::filled(8, 8, 2u8)).unwrap();
        let (overlay, drawn) = boundary_overlay(&img, &mask);
        assert_eq!(drawn, 0);
        assert_eq!(overlay, image_to_rgb(&img));
        assert!(mask_to_gray(&mask).pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn triptych_layout() {
        let img = Image::zeros(3, 4, 5);
        let pred = Grid::filled(4, 5, 1u8);
        let t = triptych(&img, None, &pred);
        assert_eq!(t.dimensions(), (3 * 5 + 2 * SEPARATOR, 4));
        assert_eq!(t.get_pixel(2 * (5 + SEPARATOR), 0).0, class_color(1));
    }

    #[test]
    fn curves_csv_has_one_column_per_series() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let recs: Vec<_> = (0..5).map(|i| record(i, 1.0 / (i + 1) as f64)).collect();
        write_curves_csv(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.split(',').count() == MetricsRecord::COLUMNS.len()));
        let img = plot_curves(&recs);
        assert!(img.pixels().any(|p| p.0 == [30, 90, 200]));
    }

    #[test]
    fn empty_metrics_stream_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ndjson");
        std::fs::write(&path, "\n").unwrap();
        assert!(read_metrics(&path).is_err());
    }
}
