//! Minimal raster line plots for sweep summaries.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN: i64 = 24;

/// Plots every series against the shared x positions `0..n` with y fixed to `[0, 1]`.
/// Series are drawn in palette order over a light grid at 0.25 steps.
pub fn line_plot(series: &[(String, Vec<f64>)], width: u32, height: u32) -> Result<RgbImage> {
    let n = series.first().map_or(0, |s| s.1.len());
    if n == 0 || series.iter().any(|s| s.1.len() != n) {
        return Err(Error::Plot("series must be non-empty and of equal length".into()));
    }
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (w, h) = (width as i64, height as i64);
    let x_of = |i: usize| {
        if n == 1 {
            w / 2
        } else {
            MARGIN + (i as i64) * (w - 2 * MARGIN) / (n as i64 - 1)
        }
    };
    let y_of = |v: f64| {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        h - MARGIN - (v * (h - 2 * MARGIN) as f64).round() as i64
    };
    for q in 0..=4 {
        let y = y_of(q as f64 / 4.0);
        line(&mut img, (MARGIN, y), (w - MARGIN, y), Rgb([225, 225, 225]));
    }
    line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), Rgb([0, 0, 0]));
    line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), Rgb([0, 0, 0]));
    for (si, (_, ys)) in series.iter().enumerate() {
        let c = Rgb(PALETTE[si % PALETTE.len()]);
        for i in 0..n {
            let p = (x_of(i), y_of(ys[i]));
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(&mut img, p.0 + dx, p.1 + dy, c);
                }
            }
            if i + 1 < n {
                line(&mut img, p, (x_of(i + 1), y_of(ys[i + 1])), c);
            }
        }
    }
    Ok(img)
}

pub fn save_line_plot(series: &[(String, Vec<f64>)], path: &Path) -> Result<()> {
    line_plot(series, 480, 320)?
        .save(path)
        .map_err(|e| Error::Plot(format!("{}: {e}", path.display())))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && x < img.width() as i64 && y < img.height() as i64 {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment.
fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_in_palette_colors() {
        let s = vec![("a".to_string(), vec![0.0, 1.0]), ("b".to_string(), vec![0.5, 0.5])];
        let img = line_plot(&s, 100, 80).unwrap();
        assert_eq!(img.get_pixel(MARGIN as u32, 80 - MARGIN as u32), &Rgb(PALETTE[0]));
        assert_eq!(img.get_pixel(100 - MARGIN as u32, MARGIN as u32), &Rgb(PALETTE[0]));
        assert_eq!(img.get_pixel(50, 40), &Rgb(PALETTE[1]));
    }

    #[test]
    fn ragged_series_rejected() {
        let s = vec![("a".to_string(), vec![0.0, 1.0]), ("b".to_string(), vec![0.5])];
        assert!(line_plot(&s, 100, 80).is_err());
        assert!(line_plot(&[], 100, 80).is_err());
    }
}
