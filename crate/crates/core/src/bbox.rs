use serde::{Deserialize, Serialize};

/// Slack allowed when checking a box against image bounds, in pixels.
pub const BOUNDS_EPS: f64 = 1e-6;

/// Axis-aligned box: top-left corner plus width and height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYWH {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXYWH {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxXYWH { x, y, w, h }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.is_valid() && self.right() <= width + BOUNDS_EPS && self.bottom() <= height + BOUNDS_EPS
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        BoxXYWH::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    /// Clips the box into `[0, width] x [0, height]`, keeping each side at
    /// least `min_side` long (capped by the image side).
    pub fn clamped(&self, width: f64, height: f64, min_side: f64) -> Self {
        let (x, w) = clamp_span(self.x, self.w, width, min_side);
        let (y, h) = clamp_span(self.y, self.h, height, min_side);
        BoxXYWH::new(x, y, w, h)
    }
}

fn clamp_span(start: f64, len: f64, limit: f64, min_len: f64) -> (f64, f64) {
    let min_len = min_len.min(limit);
    let lo = start.clamp(0.0, limit);
    let hi = (start + len).clamp(0.0, limit);
    if hi - lo >= min_len {
        return (lo, hi - lo);
    }
    // Grow around the clipped span, then slide back inside the image.
    let mid = 0.5 * (lo + hi);
    let lo = (mid - 0.5 * min_len).clamp(0.0, limit - min_len);
    (lo, min_len)
}
