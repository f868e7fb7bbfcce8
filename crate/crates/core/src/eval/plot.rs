//! Minimal line-plot rasterizer for benchmark curves.

use std::path::Path;

use crate::dataio::ImageTensor;
use crate::error::Result;

const W: usize = 360;
const H: usize = 240;
const LEFT: usize = 44;
const RIGHT: usize = 12;
const TOP: usize = 12;
const BOTTOM: usize = 28;

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.15, 0.10],
    [0.10, 0.35, 0.85],
    [0.10, 0.60, 0.20],
    [0.80, 0.50, 0.00],
    [0.55, 0.15, 0.70],
    [0.00, 0.60, 0.65],
];

/// 3×5 bitmaps, rows top to bottom, three bits per row.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

struct Canvas {
    img: ImageTensor,
}

impl Canvas {
    fn new() -> Self {
        Self {
            img: ImageTensor::filled(H, W, 3, 1.0),
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [f32; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < W && (y as usize) < H {
            for (c, v) in color.iter().enumerate() {
                self.img.set(y as usize, x as usize, c, *v);
            }
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [f32; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    fn square(&mut self, cx: i64, cy: i64, r: i64, color: [f32; 3]) {
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                self.put(x, y, color);
            }
        }
    }

    /// Draws `text` at 2× scale with its top-left corner at `(x, y)`.
    fn text(&mut self, x: i64, y: i64, text: &str) {
        let mut cx = x;
        for ch in text.chars() {
            if let Some(rows) = glyph(ch) {
                for (ry, bits) in rows.iter().enumerate() {
                    for bx in 0..3 {
                        if bits & (4 >> bx) != 0 {
                            for (ox, oy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                                self.put(cx + 2 * bx as i64 + ox, y + 2 * ry as i64 + oy, [0.0; 3]);
                            }
                        }
                    }
                }
            }
            cx += 8;
        }
    }
}

fn text_width(s: &str) -> i64 {
    8 * s.chars().count() as i64
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// One curve per series: `(levels, psnr)` points in level order.
///
/// Axes carry numeric labels only; series colors follow the order of
/// `series`, which matches row order in the CSV.
pub fn line_plot(series: &[Vec<(f64, f64)>]) -> ImageTensor {
    let mut cv = Canvas::new();
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flatten()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let axis = [0.0; 3];
    let (x_lo, x_hi) = (LEFT as i64, (W - RIGHT) as i64);
    let (y_lo, y_hi) = (TOP as i64, (H - BOTTOM) as i64);
    cv.line((x_lo, y_hi), (x_hi, y_hi), axis);
    cv.line((x_lo, y_lo), (x_lo, y_hi), axis);
    if pts.is_empty() {
        return cv.img;
    }
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in vals {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo < 1e-9 {
            (lo - 1.0, hi + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (xmin, xmax) = span(&mut pts.iter().map(|p| p.0));
    let (ymin, ymax) = span(&mut pts.iter().map(|p| p.1));
    let (ymin, ymax) = (ymin.floor(), ymax.ceil());
    let px = |x: f64| x_lo + 6 + ((x - xmin) / (xmax - xmin) * (x_hi - x_lo - 12) as f64).round() as i64;
    let py = |y: f64| y_hi - 4 - ((y - ymin) / (ymax - ymin) * (y_hi - y_lo - 8) as f64).round() as i64;

    for y in [ymin, ymax] {
        let s = fmt_tick(y);
        cv.line((x_lo - 3, py(y)), (x_lo, py(y)), axis);
        cv.text(x_lo - 6 - text_width(&s), py(y) - 5, &s);
    }
    let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let s = fmt_tick(x);
        cv.line((px(x), y_hi), (px(x), y_hi + 3), axis);
        cv.text(px(x) - text_width(&s) / 2, y_hi + 8, &s);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in s.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let p = (px(x), py(y));
            if let Some(q) = prev {
                cv.line(q, p, color);
            }
            cv.square(p.0, p.1, 2, color);
            prev = Some(p);
        }
    }
    cv.img
}

pub fn save_line_plot(series: &[Vec<(f64, f64)>], path: &Path) -> Result<()> {
    line_plot(series).save_png(path)
}
