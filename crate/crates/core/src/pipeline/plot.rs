//! Minimal raster line plots, enough for sweep and PR curves.

use std::path::Path;

use super::io::save_rgb_u8;
use crate::error::Result;

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: [u8; 3],
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![255; w * h * 3] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = (y as usize * self.w + x as usize) * 3;
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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

    fn marker(&mut self, (x, y): (i64, i64), c: [u8; 3]) {
        for dy in -2..=2 {
            for dx in -2..=2 {
                self.set(x + dx, y + dy, c);
            }
        }
    }
}

/// Draws every series into a `width x height` PNG. The x range is fitted to
/// the data; y spans `[0, 1]`. Light grid lines mark y = 0.25, 0.5, 0.75.
pub fn line_plot(path: &Path, series: &[Series], width: usize, height: usize) -> Result<()> {
    let margin = 24i64;
    let mut c = Canvas::new(width, height);
    let (x_lo, x_hi) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let (pw, ph) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let to_px = |(x, y): (f64, f64)| -> (i64, i64) {
        let fx = if x_hi > x_lo { (x - x_lo) / span } else { 0.5 };
        (
            margin + (fx * pw as f64).round() as i64,
            margin + ((1.0 - y.clamp(0.0, 1.0)) * ph as f64).round() as i64,
        )
    };
    for q in [0.25, 0.5, 0.75] {
        let y = to_px((x_lo, q)).1;
        c.line((margin, y), (margin + pw, y), [225, 225, 225]);
    }
    let black = [0, 0, 0];
    c.line((margin, margin), (margin, margin + ph), black);
    c.line((margin, margin + ph), (margin + pw, margin + ph), black);
    for s in series {
        let pts: Vec<(i64, i64)> = s.points.iter().map(|&p| to_px(p)).collect();
        for pair in pts.windows(2) {
            c.line(pair[0], pair[1], s.color);
        }
        for &p in &pts {
            c.marker(p, s.color);
        }
    }
    save_rgb_u8(path, width, height, c.px)
}
