//! im2col/col2im lowering for convolution, and bilinear interpolation
//! helpers shared by RoI pooling.

use ndarray::{Array2, ArrayView4, ArrayViewMut4};

/// Unfold `(N, C, H, W)` into a `(N*OH*OW, C*KH*KW)` matrix. Zero padding.
pub fn im2col(
    x: &ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut cols = Array2::<f64>::zeros((n * oh * ow, c * kh * kw));
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let base_y = (oy * stride) as isize - pad as isize;
                let base_x = (ox * stride) as isize - pad as isize;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            col += kw;
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[[row, col]] = x[[ni, ci, iy as usize, ix as usize]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add the gradient of an im2col matrix back onto the input layout.
pub fn col2im_accumulate(
    dcols: &Array2<f64>,
    dx: &mut ArrayViewMut4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (n, c, h, w) = dx.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (ni * oh + oy) * ow + ox;
                let base_y = (oy * stride) as isize - pad as isize;
                let base_x = (ox * stride) as isize - pad as isize;
                let mut col = 0;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            col += kw;
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[[ni, ci, iy as usize, ix as usize]] += dcols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample position: four corner indices and weights for a continuous
/// point `(py, px)` in cell units, cell centers at `i + 0.5`, edges clamped.
pub fn bilinear_coeffs(py: f64, px: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let u = (px - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (py - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}
