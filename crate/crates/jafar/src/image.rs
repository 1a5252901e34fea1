//! RGB images, procedural scenes and image resizing.
//!
//! Scenes are sampled as resolution-independent parameters (normalized
//! coordinates) and rasterized at whatever size a caller needs, so one scene
//! can provide consistent views at several resolutions. All raster math runs
//! in `f64` and casts on store; a scene renders to the same pixels whichever
//! scalar type receives them.

use std::fmt;

use crate::rng::Rng;
use crate::scalar::Scalar;

/// Channel-major `3×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T: Scalar> {
    pub h: usize,
    pub w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![T::zero(); 3 * h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(3 * h * w, data.len(), "image {h}x{w} needs {} values", 3 * h * w);
        Image { h, w, data }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image { h: self.h, w: self.w, data: self.data.iter().map(|&v| U::lit(v.wide())).collect() }
    }
}

/// Interpolation rule for [`image_resize`] and feature-map resizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

impl fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResizeMode::Bilinear => write!(f, "bilinear"),
            ResizeMode::Nearest => write!(f, "nearest"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseResizeModeError {
    pub got: String,
}

impl fmt::Display for ParseResizeModeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown resize mode {:?}; expected bilinear or nearest", self.got)
    }
}

impl std::error::Error for ParseResizeModeError {}

impl std::str::FromStr for ResizeMode {
    type Err = ParseResizeModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilinear" => Ok(ResizeMode::Bilinear),
            "nearest" => Ok(ResizeMode::Nearest),
            _ => Err(ParseResizeModeError { got: s.to_string() }),
        }
    }
}

/// Resizes one plane with half-pixel-center source mapping
/// `src = (dst + 0.5) · in/out − 0.5` and edge clamping.
pub(crate) fn resize_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    let mut dst = vec![T::zero(); out_h * out_w];
    match mode {
        ResizeMode::Bilinear => {
            for oy in 0..out_h {
                let sy = (oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
                let y0f = sy.floor();
                let fy = sy - y0f;
                let y0 = (y0f.max(0.0) as usize).min(h - 1);
                let y1 = ((y0f + 1.0).max(0.0) as usize).min(h - 1);
                for ox in 0..out_w {
                    let sx = (ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
                    let x0f = sx.floor();
                    let fx = sx - x0f;
                    let x0 = (x0f.max(0.0) as usize).min(w - 1);
                    let x1 = ((x0f + 1.0).max(0.0) as usize).min(w - 1);
                    let w00 = T::lit((1.0 - fy) * (1.0 - fx));
                    let w01 = T::lit((1.0 - fy) * fx);
                    let w10 = T::lit(fy * (1.0 - fx));
                    let w11 = T::lit(fy * fx);
                    dst[oy * out_w + ox] = w00 * src[y0 * w + x0]
                        + w01 * src[y0 * w + x1]
                        + w10 * src[y1 * w + x0]
                        + w11 * src[y1 * w + x1];
                }
            }
        }
        ResizeMode::Nearest => {
            for oy in 0..out_h {
                let sy = (((oy as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1);
                for ox in 0..out_w {
                    let sx = (((ox as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1);
                    dst[oy * out_w + ox] = src[sy * w + sx];
                }
            }
        }
    }
    dst
}

/// Resizes an image channel by channel.
pub fn image_resize<T: Scalar>(
    img: &Image<T>,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Image<T> {
    assert!(out_h > 0 && out_w > 0, "target size must be positive");
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        data.extend(resize_plane(img.plane(c), img.h, img.w, out_h, out_w, mode));
    }
    Image { h: out_h, w: out_w, data }
}

// ───────────────────────── procedural scenes ─────────────────────────

#[derive(Clone, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3] },
    Circle { cx: f64, cy: f64, r: f64, color: [f64; 3] },
}

/// Resolution-independent scene description: a two-color linear gradient
/// with 3–8 solid shapes painted over it.
#[derive(Clone, Debug)]
pub struct Scene {
    color_a: [f64; 3],
    color_b: [f64; 3],
    dir: (f64, f64),
    shapes: Vec<Shape>,
}

fn sample_color(rng: &mut Rng) -> [f64; 3] {
    [rng.uniform(), rng.uniform(), rng.uniform()]
}

/// Draws a scene's parameters from the stream (fixed draw order).
pub fn sample_scene(rng: &mut Rng) -> Scene {
    let color_a = sample_color(rng);
    let color_b = sample_color(rng);
    let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
    let dir = (angle.cos(), angle.sin());
    let n_shapes = 3 + rng.below(6);
    let shapes = (0..n_shapes)
        .map(|_| {
            if rng.below(2) == 0 {
                let cx = rng.uniform();
                let cy = rng.uniform();
                let hw = rng.uniform_in(0.05, 0.25);
                let hh = rng.uniform_in(0.05, 0.25);
                let color = sample_color(rng);
                Shape::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh, color }
            } else {
                let cx = rng.uniform();
                let cy = rng.uniform();
                let r = rng.uniform_in(0.06, 0.25);
                let color = sample_color(rng);
                Shape::Circle { cx, cy, r, color }
            }
        })
        .collect();
    Scene { color_a, color_b, dir, shapes }
}

/// Rasterizes a scene onto a `size×size` grid.
///
/// Shape edges are antialiased with a one-pixel coverage ramp, so the image
/// content is close to band-limited at every rendering resolution and a
/// rendered-then-downsampled image closely matches a directly rendered
/// smaller one.
pub fn render<T: Scalar>(scene: &Scene, size: usize) -> Image<T> {
    assert!(size > 0);
    let (dx, dy) = scene.dir;
    let lo = dx.min(0.0) + dy.min(0.0);
    let hi = dx.max(0.0) + dy.max(0.0);
    let span = hi - lo;
    let px_width = 1.0 / size as f64;
    let mut img = Image::zeros(size, size);
    for y in 0..size {
        let py = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let px = (x as f64 + 0.5) / size as f64;
            let t = ((px * dx + py * dy - lo) / span).clamp(0.0, 1.0);
            let mut color = [
                scene.color_a[0] + t * (scene.color_b[0] - scene.color_a[0]),
                scene.color_a[1] + t * (scene.color_b[1] - scene.color_a[1]),
                scene.color_a[2] + t * (scene.color_b[2] - scene.color_a[2]),
            ];
            for shape in &scene.shapes {
                // Signed distance to the shape boundary; negative inside.
                let (sdf, c) = match *shape {
                    Shape::Rect { x0, y0, x1, y1, color: c } => {
                        let qx = (x0 - px).max(px - x1);
                        let qy = (y0 - py).max(py - y1);
                        let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                        (outside + qx.max(qy).min(0.0), c)
                    }
                    Shape::Circle { cx, cy, r, color: c } => {
                        let (ddx, ddy) = (px - cx, py - cy);
                        ((ddx * ddx + ddy * ddy).sqrt() - r, c)
                    }
                };
                let coverage = (0.5 - sdf / px_width).clamp(0.0, 1.0);
                for (ch, v) in color.iter_mut().enumerate() {
                    *v += coverage * (c[ch] - *v);
                }
            }
            for (c, &v) in color.iter().enumerate() {
                img.set(c, y, x, T::lit(v.clamp(0.0, 1.0)));
            }
        }
    }
    img
}

/// Draws and rasterizes a fresh random scene.
pub fn synth_image<T: Scalar>(rng: &mut Rng, size: usize) -> Image<T> {
    render(&sample_scene(rng), size)
}
