//! Minimal PNG line charts for rate–quality curves and sweep results.
//!
//! Charts are deliberately spartan: axes, gridlines, numeric tick labels
//! rendered with a built-in digit font, and one polyline per series. Series
//! identity is carried by color order and the output filename rather than an
//! in-image legend.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CodecError, Result};
use crate::eval::Curve;

/// Fixed series palette, applied in order.
pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

const BG: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];
const TEXT: [u8; 3] = [70, 70, 70];

const MARGIN_LEFT: u32 = 48;
const MARGIN_RIGHT: u32 = 10;
const MARGIN_TOP: u32 = 10;
const MARGIN_BOTTOM: u32 = 22;

#[derive(Debug, Clone)]
pub struct Series {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Extract one metric column of a curve as an (bpp, value) series.
pub fn series_from_curve(curve: &Curve, metric: &str, color: [u8; 3]) -> Result<Series> {
    let vals = curve
        .series(metric)
        .ok_or_else(|| CodecError::config(format!("curve has no metric '{metric}'")))?;
    let points = curve.rates().into_iter().zip(vals).collect();
    Ok(Series { points, color })
}

/// Render a line chart of the given series.
pub fn line_chart(series: &[Series], width: u32, height: u32) -> Result<RgbImage> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(CodecError::config("chart needs at least one data point"));
    }
    if width < MARGIN_LEFT + MARGIN_RIGHT + 32 || height < MARGIN_TOP + MARGIN_BOTTOM + 32 {
        return Err(CodecError::config("chart dimensions too small"));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if !x.is_finite() || !y.is_finite() {
                return Err(CodecError::domain("chart data must be finite"));
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    // Avoid a degenerate scale when a dimension is constant.
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad_x = 0.04 * (x1 - x0);
    let pad_y = 0.06 * (y1 - y0);
    let (x0, x1) = (x0 - pad_x, x1 + pad_x);
    let (y0, y1) = (y0 - pad_y, y1 + pad_y);

    let mut img = RgbImage::from_pixel(width, height, Rgb(BG));
    let plot_w = (width - MARGIN_LEFT - MARGIN_RIGHT) as f64;
    let plot_h = (height - MARGIN_TOP - MARGIN_BOTTOM) as f64;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = MARGIN_LEFT as f64 + (x - x0) / (x1 - x0) * plot_w;
        let py = MARGIN_TOP as f64 + (1.0 - (y - y0) / (y1 - y0)) * plot_h;
        (px.round() as i64, py.round() as i64)
    };

    for t in ticks(x0, x1, 5) {
        let (px, _) = to_px(t, y0);
        vline(&mut img, px, MARGIN_TOP as i64, (height - MARGIN_BOTTOM) as i64, GRID);
        draw_label(
            &mut img,
            px - label_width(&fmt_tick(t)) as i64 / 2,
            (height - MARGIN_BOTTOM + 4) as i64,
            &fmt_tick(t),
        );
    }
    for t in ticks(y0, y1, 5) {
        let (_, py) = to_px(x0, t);
        hline(&mut img, MARGIN_LEFT as i64, (width - MARGIN_RIGHT) as i64, py, GRID);
        let lbl = fmt_tick(t);
        draw_label(
            &mut img,
            MARGIN_LEFT as i64 - 4 - label_width(&lbl) as i64,
            py - 5,
            &lbl,
        );
    }
    // Axis frame drawn after the grid so it stays crisp.
    vline(&mut img, MARGIN_LEFT as i64, MARGIN_TOP as i64, (height - MARGIN_BOTTOM) as i64, AXIS);
    hline(
        &mut img,
        MARGIN_LEFT as i64,
        (width - MARGIN_RIGHT) as i64,
        (height - MARGIN_BOTTOM) as i64,
        AXIS,
    );

    for s in series {
        let px: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| to_px(x, y)).collect();
        for w in px.windows(2) {
            draw_line(&mut img, w[0], w[1], s.color);
        }
        for &(cx, cy) in &px {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, cx + dx, cy + dy, s.color);
                }
            }
        }
    }
    Ok(img)
}

/// Render and write a chart as PNG.
pub fn save_chart(path: &Path, series: &[Series], width: u32, height: u32) -> Result<()> {
    let img = line_chart(series, width, height)?;
    img.save(path)
        .map_err(|e| CodecError::config(format!("writing chart {}: {e}", path.display())))
}

/// Tick positions at a round step covering [lo, hi].
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        mag
    } else if norm < 3.5 {
        2.0 * mag
    } else if norm < 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

// 3x5 glyphs for the characters tick labels can contain. Rows are 3-bit
// patterns, most significant bit leftmost.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b001, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b111, 0b100, 0b111, 0b100, 0b111],
        _ => [0b000, 0b000, 0b000, 0b000, 0b000],
    }
}

fn label_width(s: &str) -> u32 {
    (s.chars().count() as u32) * 4
}

fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, cx + col as i64, y + row as i64, TEXT);
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, c: [u8; 3]) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, c);
    }
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, c: [u8; 3]) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == b.0 && y == b.1 {
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

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_series() -> Vec<Series> {
        vec![
            Series {
                points: vec![(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.0)],
                color: PALETTE[0],
            },
            Series {
                points: vec![(0.1, 28.0), (0.2, 31.5), (0.4, 34.0), (0.8, 36.0)],
                color: PALETTE[1],
            },
        ]
    }

    #[test]
    fn chart_renders_axes_grid_and_series() {
        let img = line_chart(&demo_series(), 320, 240).unwrap();
        assert_eq!((img.width(), img.height()), (320, 240));
        assert_eq!(img.get_pixel(0, 0).0, BG);
        let mut counts = (0usize, 0usize, 0usize);
        for p in img.pixels() {
            if p.0 == AXIS {
                counts.0 += 1;
            } else if p.0 == GRID {
                counts.1 += 1;
            } else if p.0 == PALETTE[0] || p.0 == PALETTE[1] {
                counts.2 += 1;
            }
        }
        assert!(counts.0 > 100, "axis pixels missing");
        assert!(counts.1 > 100, "grid pixels missing");
        assert!(counts.2 > 100, "series pixels missing");
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = line_chart(&demo_series(), 320, 240).unwrap();
        let b = line_chart(&demo_series(), 320, 240).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn empty_or_tiny_charts_are_rejected() {
        assert!(line_chart(&[], 320, 240).is_err());
        assert!(line_chart(&demo_series(), 20, 20).is_err());
        let nan = vec![Series { points: vec![(0.0, f64::NAN)], color: PALETTE[0] }];
        assert!(line_chart(&nan, 320, 240).is_err());
    }

    #[test]
    fn saved_chart_is_a_readable_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.png");
        save_chart(&path, &demo_series(), 320, 240).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!((back.width(), back.height()), (320, 240));
    }

    #[test]
    fn tick_labels_stay_within_the_font() {
        for v in [0.0, 0.125, -3.5, 1234.0, 0.0004, -2.0e-7, 9999.0] {
            for c in fmt_tick(v).chars() {
                assert!(
                    glyph(c) != [0; 5] || c == ' ',
                    "tick text '{}' uses unprintable '{c}'",
                    fmt_tick(v)
                );
            }
        }
    }

    #[test]
    fn ticks_cover_the_range_at_round_steps() {
        let t = ticks(0.07, 0.93, 5);
        assert!(t.len() >= 3 && t.len() <= 9);
        assert!(*t.first().unwrap() >= 0.07 && *t.last().unwrap() <= 0.93 + 1e-9);
        for w in t.windows(2) {
            assert!((w[1] - w[0]) > 0.0);
        }
    }
}
