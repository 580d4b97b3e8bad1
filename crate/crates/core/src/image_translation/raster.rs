//! Landmark polylines drawn into an RGB canvas.

use image::{Rgb, RgbImage};

use crate::geometry::{LandmarkFrame, PartTopology};

/// One colour per facial part, in topology order.
pub const PART_PALETTE: [[u8; 3]; 8] = [
    [255, 255, 255],
    [255, 128, 0],
    [255, 200, 0],
    [0, 200, 255],
    [0, 255, 0],
    [0, 160, 0],
    [255, 0, 0],
    [255, 0, 255],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub width: u32,
    pub height: u32,
    /// Stroke thickness in pixels.
    pub line_width: u32,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self { width: 256, height: 256, line_width: 1 }
    }
}

/// Clips segment `a`-`b` to `[0, w] x [0, h]` (Liang-Barsky). `None` when
/// nothing remains.
pub fn clip_segment(a: [f64; 2], b: [f64; 2], w: f64, h: f64) -> Option<([f64; 2], [f64; 2])> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-dx, a[0]), (dx, w - a[0]), (-dy, a[1]), (dy, h - a[1])] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
            if t0 > t1 {
                return None;
            }
        }
    }
    Some(([a[0] + t0 * dx, a[1] + t0 * dy], [a[0] + t1 * dx, a[1] + t1 * dy]))
}

fn stamp(img: &mut RgbImage, x: i64, y: i64, line_width: u32, c: [u8; 3]) {
    let lo = -((line_width as i64 - 1) / 2);
    let hi = line_width as i64 / 2;
    for oy in lo..=hi {
        for ox in lo..=hi {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(c));
            }
        }
    }
}

/// Bresenham line between rounded endpoints.
pub fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], line_width: u32, c: [u8; 3]) {
    let w = (img.width() - 1) as f64;
    let h = (img.height() - 1) as f64;
    let Some((a, b)) = clip_segment(a, b, w, h) else { return };
    let (mut x0, mut y0) = (a[0].round() as i64, a[1].round() as i64);
    let (x1, y1) = (b[0].round() as i64, b[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        stamp(img, x0, y0, line_width, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// Draws every part's polyline of `frame` (x, y already in canvas pixels)
/// on a black canvas.
pub fn rasterize_landmarks(frame: &LandmarkFrame, topo: &PartTopology, cfg: &RasterConfig) -> RgbImage {
    let mut img = RgbImage::new(cfg.width, cfg.height);
    for (part, a, b) in topo.segments() {
        let (pa, pb) = (frame.point(a), frame.point(b));
        let c = PART_PALETTE[part % PART_PALETTE.len()];
        draw_line(&mut img, [pa.x, pa.y], [pb.x, pb.y], cfg.line_width.max(1), c);
    }
    img
}
