//! Axis-aligned boxes, IoU, and randomized ground-truth box augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, corners `(x0, y0)`–`(x1, y1)`.
///
/// Invariant: `x0 < x1`, `y0 < y1`, all coordinates finite. Enforced by every
/// constructor, so holding a `BBox` means holding a valid box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if ![x0, y0, x1, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinates ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox(format!(
                "empty extent ({x0}, {y0}, {x1}, {y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Build from `(x0, y0, w, h)`; errors on non-positive width or height.
    pub fn from_xywh(x0: f64, y0: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "non-positive size w={w}, h={h}"
            )));
        }
        Self::new(x0, y0, x0 + w, y0 + h)
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    /// Clamp to `[0, width] × [0, height]`; errors when nothing remains.
    pub fn clip_to_image(&self, width: f64, height: f64) -> Result<Self> {
        debug_assert!(width > 0.0 && height > 0.0);
        let x0 = self.x0.clamp(0.0, width);
        let y0 = self.y0.clamp(0.0, height);
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox(format!(
                "box ({}, {}, {}, {}) collapses when clipped to {width}x{height}",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Intersection-over-union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        if inter == 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }
}

/// Box plus a foreground class id in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub bbox: BBox,
    pub class_id: usize,
}

impl LabeledBox {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        Self { bbox, class_id }
    }
}

/// Convert an `(x0, y0, w, h)` quadruple to corner form.
pub fn xywh_to_xyxy(b: [f64; 4]) -> Result<BBox> {
    BBox::from_xywh(b[0], b[1], b[2], b[3])
}

const AUGMENT_MAX_RETRIES: usize = 16;

/// Jitter each corner of `b` by its side length over `k0`, each of the four
/// signs drawn independently and uniformly.
///
/// For `k0 > 2` every sign vector yields a valid box; for `k0 <= 2` crossing
/// corners are possible, in which case signs are redrawn up to a bounded retry
/// count before failing. When `bounds = Some((width, height))` the result is
/// clipped to the image (clipping may also fail for a fully-outside draw,
/// which counts as a retry).
pub fn augment_box<R: Rng>(
    b: &BBox,
    k0: f64,
    bounds: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<BBox> {
    if !(k0 > 0.0) {
        return Err(Error::Config(format!("k0 must be positive, got {k0}")));
    }
    let dx = b.width() / k0;
    let dy = b.height() / k0;
    for _ in 0..AUGMENT_MAX_RETRIES {
        let sign = |r: &mut R| if r.random::<bool>() { 1.0 } else { -1.0 };
        let (s0, s1, s2, s3) = (sign(rng), sign(rng), sign(rng), sign(rng));
        let cand = BBox::new(
            b.x0 + s0 * dx,
            b.y0 + s1 * dy,
            b.x1 + s2 * dx,
            b.y1 + s3 * dy,
        );
        let Ok(cand) = cand else { continue };
        match bounds {
            None => return Ok(cand),
            Some((w, h)) => {
                if let Ok(clipped) = cand.clip_to_image(w, h) {
                    return Ok(clipped);
                }
            }
        }
    }
    Err(Error::DegenerateAugmentation {
        retries: AUGMENT_MAX_RETRIES,
    })
}

/// All 16 sign-vector outcomes of [`augment_box`] before clipping, including
/// any degenerate ones. Exposed for enumeration-style checks of the augment
/// distribution.
pub fn augment_candidates(b: &BBox, k0: f64) -> Vec<[f64; 4]> {
    let dx = b.width() / k0;
    let dy = b.height() / k0;
    let mut out = Vec::with_capacity(16);
    for bits in 0u32..16 {
        let s = |i: u32| if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
        out.push([
            b.x0 + s(0) * dx,
            b.y0 + s(1) * dy,
            b.x1 + s(2) * dx,
            b.y1 + s(3) * dy,
        ]);
    }
    out
}
