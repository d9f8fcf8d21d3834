//! Slice rendering of a displacement field: a deformed grid and arrows
//! drawn over a grayscale background.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::field::DispField;
use crate::sampler::trilinear;
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Axis normal to the rendered slice (0 = x, 1 = y, 2 = z).
    pub axis: usize,
    pub slice: usize,
    /// Output pixels per voxel.
    pub scale: usize,
    /// Voxel spacing of the grid lines.
    pub grid_step: usize,
    /// Voxel spacing of the arrow glyphs.
    pub arrow_step: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            axis: 2,
            slice: 0,
            scale: 4,
            grid_step: 4,
            arrow_step: 8,
        }
    }
}

const GRID_COLOR: Rgb<u8> = Rgb([230, 60, 40]);
const ARROW_COLOR: Rgb<u8> = Rgb([250, 220, 30]);

fn in_plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a[0] + t * (b[0] - a[0])).round();
        let y = (a[1] + t * (b[1] - a[1])).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn draw_arrow(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    draw_line(img, a, b, color);
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len < 1.0 {
        img.put_pixel_checked(a, color);
        return;
    }
    let head = (0.35 * len).min(4.0);
    let (ux, uy) = (d[0] / len, d[1] / len);
    for sign in [-1.0, 1.0] {
        let (c, s) = (0.5f64.cos(), sign * 0.5f64.sin());
        let back = [-(ux * c - uy * s), -(ux * s + uy * c)];
        draw_line(img, b, [b[0] + head * back[0], b[1] + head * back[1]], color);
    }
}

trait PutChecked {
    fn put_pixel_checked(&mut self, p: [f64; 2], color: Rgb<u8>);
}

impl PutChecked for RgbImage {
    fn put_pixel_checked(&mut self, p: [f64; 2], color: Rgb<u8>) {
        let (x, y) = (p[0].round(), p[1].round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < self.width() && (y as u32) < self.height() {
            self.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Renders one slice. Image columns follow the first in-plane axis and rows
/// the second. Only in-plane displacement is drawn.
pub fn render_slice(u: &DispField, background: Option<&Volume3>, opt: &RenderOptions) -> Result<RgbImage> {
    if opt.axis > 2 {
        return Err(Error::InvalidParameter(format!("axis must be 0, 1 or 2, got {}", opt.axis)));
    }
    let dims = u.dims();
    if opt.slice >= dims[opt.axis] {
        return Err(Error::InvalidParameter(format!(
            "slice {} out of range for axis {} with {} voxels",
            opt.slice, opt.axis, dims[opt.axis]
        )));
    }
    if opt.scale == 0 || opt.grid_step == 0 || opt.arrow_step == 0 {
        return Err(Error::InvalidParameter("scale and step sizes must be >= 1".into()));
    }
    if let Some(bg) = background {
        bg.grid().check_same(u.grid(), "background vs field")?;
    }
    let (a0, a1) = in_plane_axes(opt.axis);
    let (w, h) = (dims[a0], dims[a1]);
    let sc = opt.scale as f64;
    let mut img = RgbImage::new((w * opt.scale) as u32, (h * opt.scale) as u32);

    let voxel = |i: f64, j: f64| {
        let mut p = [0.0; 3];
        p[opt.axis] = opt.slice as f64;
        p[a0] = i;
        p[a1] = j;
        p
    };

    if let Some(bg) = background {
        let (lo, hi) = bg.range();
        let span = if hi > lo { (hi - lo) as f64 } else { 1.0 };
        for py in 0..img.height() {
            for px in 0..img.width() {
                let i = (px as usize / opt.scale).min(w - 1);
                let j = (py as usize / opt.scale).min(h - 1);
                let mut c = [0; 3];
                c[opt.axis] = opt.slice;
                c[a0] = i;
                c[a1] = j;
                let v = (bg.at(c[0], c[1], c[2]) - lo) as f64 / span;
                let g = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(px, py, Rgb([g, g, g]));
            }
        }
    }

    // Centre of voxel (i, j) maps to pixel ((i + 0.5) * scale, ...).
    let displaced = |i: f64, j: f64| {
        let p = voxel(i, j);
        let d0 = trilinear(u.component(a0), dims, p);
        let d1 = trilinear(u.component(a1), dims, p);
        [(i + d0 + 0.5) * sc, (j + d1 + 0.5) * sc]
    };
    let sub = 4 * opt.scale;
    for i in (0..w).step_by(opt.grid_step) {
        let mut prev = displaced(i as f64, 0.0);
        for s in 1..=(h - 1) * sub {
            let next = displaced(i as f64, s as f64 / sub as f64);
            draw_line(&mut img, prev, next, GRID_COLOR);
            prev = next;
        }
    }
    for j in (0..h).step_by(opt.grid_step) {
        let mut prev = displaced(0.0, j as f64);
        for s in 1..=(w - 1) * sub {
            let next = displaced(s as f64 / sub as f64, j as f64);
            draw_line(&mut img, prev, next, GRID_COLOR);
            prev = next;
        }
    }
    let half = opt.arrow_step / 2;
    for j in (half..h).step_by(opt.arrow_step) {
        for i in (half..w).step_by(opt.arrow_step) {
            let start = [(i as f64 + 0.5) * sc, (j as f64 + 0.5) * sc];
            draw_arrow(&mut img, start, displaced(i as f64, j as f64), ARROW_COLOR);
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}
