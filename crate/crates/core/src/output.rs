//! PNG writers: image grids for reconstructions and simple line plots.

use crate::data::{grid_to_luma8, ImageGrid};
use crate::error::{Error, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use std::path::Path;

const GAP: u32 = 2;

/// Tiles single-channel images row by row with a 2-pixel white gap.
pub fn write_image_grid(path: &Path, rows: &[Vec<&ImageGrid>]) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidInput("image grid is empty".into()))?;
    let (h, w) = (first.height as u32, first.width as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut canvas = GrayImage::from_pixel(
        cols * (w + GAP) + GAP,
        rows.len() as u32 * (h + GAP) + GAP,
        Luma([255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, grid) in row.iter().enumerate() {
            if grid.height as u32 != h || grid.width as u32 != w {
                return Err(Error::Shape("images in a grid must share one size".into()));
            }
            let tile = grid_to_luma8(grid);
            let (x0, y0) = (GAP + c as u32 * (w + GAP), GAP + r as u32 * (h + GAP));
            for (x, y, p) in tile.enumerate_pixels() {
                canvas.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    Ok(canvas.save(path)?)
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Draws each series as a polyline with point markers. `log_x` puts the x
/// axis on a log10 scale. No text is rendered; legends belong in the
/// accompanying data file.
pub fn write_line_plot(path: &Path, series: &[Series], log_x: bool) -> Result<()> {
    write_dual_axis_plot(path, series, &[], log_x)
}

/// Like [`write_line_plot`] with a second, independently scaled y axis for
/// `right` (drawn dashed, with a tick line on the right edge).
pub fn write_dual_axis_plot(path: &Path, left: &[Series], right: &[Series], log_x: bool) -> Result<()> {
    let (width, height, margin) = (640u32, 400u32, 30u32);
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let finite = |s: &[Series]| -> Vec<(f64, f64)> {
        s.iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect()
    };
    let (lp, rp) = (finite(left), finite(right));
    if lp.is_empty() && rp.is_empty() {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let bounds = |pts: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let all: Vec<(f64, f64)> = lp.iter().chain(&rp).copied().collect();
    let (x_lo, x_hi) = bounds(&all, |p| p.0);
    let inner_w = (width - 2 * margin) as f64;
    let inner_h = (height - 2 * margin) as f64;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (m, bottom, right_edge) = (margin as f64, (height - margin) as f64, (width - margin) as f64);
    draw_line(&mut img, (m, m), (m, bottom), black);
    draw_line(&mut img, (m, bottom), (right_edge, bottom), black);
    if !rp.is_empty() {
        draw_line(&mut img, (right_edge, m), (right_edge, bottom), black);
    }
    let mut color_index = 0;
    for (group, pts, dashed) in [(left, &lp, false), (right, &rp, true)] {
        if pts.is_empty() {
            continue;
        }
        let (y_lo, y_hi) = bounds(pts, |p| p.1);
        let to_px = |x: f64, y: f64| {
            (
                m + (tx(x) - x_lo) / (x_hi - x_lo) * inner_w,
                bottom - (y - y_lo) / (y_hi - y_lo) * inner_h,
            )
        };
        for s in group {
            let color = Rgb(PALETTE[color_index % PALETTE.len()]);
            color_index += 1;
            let px: Vec<(f64, f64)> = s
                .points
                .iter()
                .filter(|(x, y)| tx(*x).is_finite() && y.is_finite())
                .map(|&(x, y)| to_px(x, y))
                .collect();
            for w in px.windows(2) {
                if dashed {
                    draw_dashed(&mut img, w[0], w[1], color);
                } else {
                    draw_line(&mut img, w[0], w[1], color);
                }
            }
            for &(x, y) in &px {
                for dx in -2i32..=2 {
                    for dy in -2i32..=2 {
                        put(&mut img, x as i32 + dx, y as i32 + dy, color);
                    }
                }
            }
        }
    }
    Ok(img.save(path)?)
}

fn draw_dashed(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in (0..=steps).filter(|i| (i / 4) % 2 == 0) {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i32, (a.1 + t * (b.1 - a.1)).round() as i32, c);
    }
}

fn put(img: &mut RgbImage, x: i32, y: i32, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, (a.0 + t * (b.0 - a.0)).round() as i32, (a.1 + t * (b.1 - a.1)).round() as i32, c);
    }
}
