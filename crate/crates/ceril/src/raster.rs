//! Software rasterizer for the environment scenes.
//!
//! Frames are grayscale luminance in [0, 1], row-major. Edge coverage is
//! computed from the signed distance of a pixel center to the shape
//! boundary with a one-pixel linear ramp, so coverage varies continuously
//! with geometry and any sub-pixel motion changes pixel values (sampled
//! supersampling quantizes coverage and misses small motions; the test
//! suite checks this approximation against an 8x supersampling oracle).
//! Shapes are drawn dark-on-light: each draw composites the shape against
//! the frame's background luminance and keeps the darker of the existing
//! and the composited value, which makes identical draws idempotent.

use crate::envs::{EnvKind, PhysicsState, CARTPOLE_X_LIMIT};
use std::io::Write;
use std::path::Path;

/// Grayscale frame: luminance values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Time of the frame in seconds.
    pub timestamp: f64,
    /// Luminance shapes are composited against.
    pub background: f64,
}

impl IntensityFrame {
    pub fn new(width: usize, height: usize, background: f64, timestamp: f64) -> Self {
        IntensityFrame {
            width,
            height,
            values: vec![background; width * height],
            timestamp,
            background,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Binary PGM (P5) dump for debugging.
    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(32 + self.values.len());
        write!(buf, "P5\n{} {}\n255\n", self.width, self.height)?;
        for v in &self.values {
            buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, buf)
    }
}

/// Geometry primitives in frame coordinates (pixel (x, y) covers
/// [x, x+1) x [y, y+1), y grows downward).
#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Line segment with round caps and the given half-width.
    Line {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        half_width: f64,
    },
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    fn bbox(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Line {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => (
                x0.min(x1) - half_width,
                y0.min(y1) - half_width,
                x0.max(x1) + half_width,
                y0.max(y1) + half_width,
            ),
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
        }
    }

    /// Signed distance from a point to the shape boundary; negative inside.
    fn signed_distance(&self, px: f64, py: f64) -> f64 {
        match *self {
            Shape::Line {
                x0,
                y0,
                x1,
                y1,
                half_width,
            } => {
                let dx = x1 - x0;
                let dy = y1 - y0;
                let len2 = dx * dx + dy * dy;
                let t = (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0);
                let ex = px - (x0 + t * dx);
                let ey = py - (y0 + t * dy);
                (ex * ex + ey * ey).sqrt() - half_width
            }
            Shape::Disc { cx, cy, r } => {
                let ex = px - cx;
                let ey = py - cy;
                (ex * ex + ey * ey).sqrt() - r
            }
            Shape::Rect { x0, y0, x1, y1 } => {
                let hx = (x1 - x0) / 2.0;
                let hy = (y1 - y0) / 2.0;
                let qx = (px - (x0 + hx)).abs() - hx;
                let qy = (py - (y0 + hy)).abs() - hy;
                let ox = qx.max(0.0);
                let oy = qy.max(0.0);
                (ox * ox + oy * oy).sqrt() + qx.max(qy).min(0.0)
            }
        }
    }
}

fn draw_shape(frame: &mut IntensityFrame, shape: &Shape, luminance: f64) {
    let (bx0, by0, bx1, by1) = shape.bbox();
    // One extra pixel for the coverage ramp.
    let ix0 = (bx0 - 1.0).floor().max(0.0) as usize;
    let iy0 = (by0 - 1.0).floor().max(0.0) as usize;
    if bx1 < -1.0 || by1 < -1.0 || ix0 >= frame.width || iy0 >= frame.height {
        return;
    }
    let ix1 = ((bx1 + 1.0).ceil() as usize).min(frame.width);
    let iy1 = ((by1 + 1.0).ceil() as usize).min(frame.height);
    for iy in iy0..iy1 {
        let py = iy as f64 + 0.5;
        for ix in ix0..ix1 {
            let px = ix as f64 + 0.5;
            let d = shape.signed_distance(px, py);
            let coverage = (0.5 - d).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let candidate = (1.0 - coverage) * frame.background + coverage * luminance;
                let cell = &mut frame.values[iy * frame.width + ix];
                if candidate < *cell {
                    *cell = candidate;
                }
            }
        }
    }
}

/// Draw an anti-aliased line segment with round caps. Zero-length segments
/// draw nothing.
pub fn draw_line(
    frame: &mut IntensityFrame,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    half_width: f64,
    luminance: f64,
) {
    let len2 = (x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0);
    if len2 <= 1e-24 {
        return;
    }
    draw_shape(
        frame,
        &Shape::Line {
            x0,
            y0,
            x1,
            y1,
            half_width,
        },
        luminance,
    );
}

pub fn draw_disc(frame: &mut IntensityFrame, cx: f64, cy: f64, r: f64, luminance: f64) {
    if r <= 0.0 {
        return;
    }
    draw_shape(frame, &Shape::Disc { cx, cy, r }, luminance);
}

pub fn draw_rect(
    frame: &mut IntensityFrame,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    luminance: f64,
) {
    if x1 <= x0 || y1 <= y0 {
        return;
    }
    draw_shape(frame, &Shape::Rect { x0, y0, x1, y1 }, luminance);
}

fn mountaincar_hill(x: f64) -> f64 {
    (3.0 * x).sin() * 0.45 + 0.55
}

/// Render the environment state to a grayscale frame using the standard
/// visual layout of each task. Pure function of (state, width, height);
/// the caller assigns the timestamp.
pub fn render(state: &PhysicsState, width: usize, height: usize) -> IntensityFrame {
    assert!(width >= 16 && height >= 16, "frame too small");
    let mut frame = IntensityFrame::new(width, height, 1.0, 0.0);
    let w = width as f64;
    let h = height as f64;
    match *state {
        PhysicsState::CartPole { x, theta, .. } => {
            let scale = w / (2.0 * CARTPOLE_X_LIMIT * 1.2);
            let cx = w / 2.0 + x * scale;
            let cart_y = 0.72 * h;
            let cart_w = 0.125 * w;
            let cart_h = 0.0625 * h;
            // Track.
            draw_line(
                &mut frame,
                0.0,
                cart_y + cart_h / 2.0 + 1.0,
                w,
                cart_y + cart_h / 2.0 + 1.0,
                0.6,
                0.55,
            );
            // Cart body.
            draw_rect(
                &mut frame,
                cx - cart_w / 2.0,
                cart_y - cart_h / 2.0,
                cx + cart_w / 2.0,
                cart_y + cart_h / 2.0,
                0.15,
            );
            // Pole, anchored on the cart top, world length 1.0.
            let pole_len = scale * 1.0;
            let axle_y = cart_y - cart_h / 2.0;
            let tip_x = cx + pole_len * theta.sin();
            let tip_y = axle_y - pole_len * theta.cos();
            draw_line(&mut frame, cx, axle_y, tip_x, tip_y, w / 64.0, 0.45);
            draw_disc(&mut frame, cx, axle_y, 0.02 * w, 0.05);
        }
        PhysicsState::Pendulum { theta, .. } => {
            let cx = w / 2.0;
            let cy = h / 2.0;
            let rod = 0.36 * h;
            let tip_x = cx + rod * theta.sin();
            let tip_y = cy - rod * theta.cos();
            draw_line(&mut frame, cx, cy, tip_x, tip_y, 0.024 * h, 0.25);
            draw_disc(&mut frame, cx, cy, 0.045 * h, 0.08);
        }
        PhysicsState::MountainCar { x, .. } => {
            let x_min = -1.2;
            let x_max = 0.6;
            let xs = |wx: f64| (wx - x_min) / (x_max - x_min) * w;
            let ys = |wx: f64| h * (0.92 - 0.72 * mountaincar_hill(wx));
            // Hill curve as a polyline.
            let segments = width / 2;
            let mut prev = (xs(x_min), ys(x_min));
            for k in 1..=segments {
                let wx = x_min + (x_max - x_min) * k as f64 / segments as f64;
                let next = (xs(wx), ys(wx));
                draw_line(&mut frame, prev.0, prev.1, next.0, next.1, 0.65, 0.5);
                prev = next;
            }
            // Goal flag.
            let gx = xs(0.5);
            let gy = ys(0.5);
            draw_line(&mut frame, gx, gy, gx, gy - 0.16 * h, 0.6, 0.3);
            draw_rect(
                &mut frame,
                gx,
                gy - 0.16 * h,
                gx + 0.07 * w,
                gy - 0.11 * h,
                0.25,
            );
            // Car.
            let r = 0.055 * w;
            draw_disc(&mut frame, xs(x), ys(x) - r - 0.5, r, 0.1);
        }
    }
    frame
}

/// Render with a timestamp attached.
pub fn render_at(state: &PhysicsState, width: usize, height: usize, timestamp: f64) -> IntensityFrame {
    let mut f = render(state, width, height);
    f.timestamp = timestamp;
    f
}

/// Default rendering resolution used by the training pipeline.
pub fn default_resolution_for(_kind: EnvKind) -> usize {
    64
}
