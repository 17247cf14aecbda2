//! Boundary masks from label maps via 3x3 Sobel gradients.
//!
//! Labels are convolved as raw class indices, so any change of class between
//! neighbours registers regardless of which classes meet. Borders use
//! replicate padding: a constant map yields an empty mask everywhere.

use crate::error::{shape_err, Error, Result};
use crate::maps::{Grid, LabelMap, PixelMask};

/// Per-pixel boolean boundary indicator.
pub type BoundaryMask = PixelMask;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub gx: Grid<f64>,
    pub gy: Grid<f64>,
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses (cross-correlation, replicate padding).
pub fn sobel_gradients(labels: &LabelMap) -> Result<GradientPair> {
    let (h, w) = labels.dims();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("label map is {h}x{w}")));
    }
    let mut gx = Grid::filled(h, w, 0.0);
    let mut gy = Grid::filled(h, w, 0.0);
    let at = |y: isize, x: isize| -> f64 {
        let yc = y.clamp(0, h as isize - 1) as usize;
        let xc = x.clamp(0, w as isize - 1) as usize;
        f64::from(labels.values[yc * w + xc])
    };
    for y in 0..h {
        for x in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (dy, (row_x, row_y)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for dx in 0..3 {
                    let v = at(y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    sx += row_x[dx] * v;
                    sy += row_y[dx] * v;
                }
            }
            gx.values[y * w + x] = sx;
            gy.values[y * w + x] = sy;
        }
    }
    Ok(GradientPair { gx, gy })
}

pub fn gradient_magnitude(g: &GradientPair) -> Result<Grid<f64>> {
    if g.gx.dims() != g.gy.dims() {
        return Err(shape_err(format!("{:?}", g.gx.dims()), format!("{:?}", g.gy.dims())));
    }
    let values = g
        .gx
        .values
        .iter()
        .zip(&g.gy.values)
        .map(|(x, y)| x.hypot(*y))
        .collect();
    Grid::from_vec(g.gx.height, g.gx.width, values)
}

/// True where the magnitude strictly exceeds `epsilon` (0 for integer labels).
pub fn boundary_mask(magnitude: &Grid<f64>, epsilon: f64) -> BoundaryMask {
    magnitude.map(|&m| m > epsilon)
}

/// Sobel, magnitude and strict `> 0` test in one call.
pub fn boundary_from_labels(labels: &LabelMap) -> Result<BoundaryMask> {
    let g = sobel_gradients(labels)?;
    Ok(boundary_mask(&gradient_magnitude(&g)?, 0.0))
}

pub fn mask_fraction(mask: &BoundaryMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.values.iter().filter(|&&b| b).count() as f64 / mask.len() as f64
}
