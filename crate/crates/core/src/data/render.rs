//! Procedural rendering of cell-like scenes: textured background plus soft
//! rotated ellipses with a darker nucleus.

use ndarray::Array3;
use rand::Rng;

/// HSV (all in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Pale textured background: base tint plus bilinearly upsampled value noise.
pub fn paint_background<R: Rng>(size: usize, rng: &mut R) -> Array3<f64> {
    let grid = size / 16 + 2;
    let noise: Vec<f64> = (0..grid * grid)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let base = [0.93, 0.90, 0.95];
    let amp = [0.035, 0.045, 0.03];
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let gy = y as f64 / 16.0;
            let gx = x as f64 / 16.0;
            let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - y0 as f64, gx - x0 as f64);
            let at = |yy: usize, xx: usize| noise[yy.min(grid - 1) * grid + xx.min(grid - 1)];
            let n = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1) * (1.0 - fy) * fx
                + at(y0 + 1, x0) * fy * (1.0 - fx)
                + at(y0 + 1, x0 + 1) * fy * fx;
            for c in 0..3 {
                img[[c, y, x]] = (base[c] + amp[c] * n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Geometry and appearance of one rendered cell.
#[derive(Debug, Clone, Copy)]
pub struct CellShape {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes of the outer (cytoplasm) ellipse.
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Rotation in radians.
    pub angle: f64,
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Nucleus size as a fraction of the cell.
    pub nucleus_ratio: f64,
}

impl CellShape {
    /// Half-extents of the tight axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let hx = ((self.semi_major * c).powi(2) + (self.semi_minor * s).powi(2)).sqrt();
        let hy = ((self.semi_major * s).powi(2) + (self.semi_minor * c).powi(2)).sqrt();
        (hx, hy)
    }
}

/// Alpha-composite `cell` onto `img` with a ~1px soft edge.
pub fn paint_cell(img: &mut Array3<f64>, cell: &CellShape) {
    let size = img.dim().1;
    let (hx, hy) = cell.half_extents();
    let y_lo = (cell.cy - hy - 1.0).floor().max(0.0) as usize;
    let y_hi = ((cell.cy + hy + 1.0).ceil() as usize).min(size);
    let x_lo = (cell.cx - hx - 1.0).floor().max(0.0) as usize;
    let x_hi = ((cell.cx + hx + 1.0).ceil() as usize).min(size);
    let (sin_a, cos_a) = cell.angle.sin_cos();
    let cyto = hsv_to_rgb(cell.hue, cell.saturation, cell.value);
    let nucleus = hsv_to_rgb(cell.hue + 0.03, (cell.saturation * 1.9).min(1.0), cell.value * 0.55);
    // soft edge width in normalized radial units
    let edge = 1.2 / cell.semi_minor.max(1.0);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cell.cx;
            let dy = y as f64 + 0.5 - cell.cy;
            let u = (dx * cos_a + dy * sin_a) / cell.semi_major;
            let v = (-dx * sin_a + dy * cos_a) / cell.semi_minor;
            let d = (u * u + v * v).sqrt();
            if d >= 1.0 {
                continue;
            }
            let alpha = ((1.0 - d) / edge).clamp(0.0, 1.0) * 0.9;
            let color = if d < cell.nucleus_ratio {
                let blend = ((cell.nucleus_ratio - d) / edge).clamp(0.0, 1.0);
                [
                    cyto[0] * (1.0 - blend) + nucleus[0] * blend,
                    cyto[1] * (1.0 - blend) + nucleus[1] * blend,
                    cyto[2] * (1.0 - blend) + nucleus[2] * blend,
                ]
            } else {
                cyto
            };
            for c in 0..3 {
                let bg = img[[c, y, x]];
                img[[c, y, x]] = bg * (1.0 - alpha) + color[c] * alpha;
            }
        }
    }
}
