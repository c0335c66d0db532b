//! Strain-matrix images with TOS curves drawn on top.

use image::{Rgb, RgbImage};

use densecine::strain::{StrainMatrix, TosCurve};

use crate::Method;

/// Strain mapped to the full colour range.
const STRAIN_RANGE: f64 = 0.25;
const MARGIN: u32 = 8;

pub fn method_color(m: Method) -> Rgb<u8> {
    match m {
        Method::Gt => Rgb([0, 0, 0]),
        Method::Oracle => Rgb([0, 150, 60]),
        Method::Joint => Rgb([230, 0, 200]),
        Method::Ft => Rgb([255, 150, 0]),
    }
}

/// Contraction (negative strain) in blue, stretch in red, zero in white.
fn strain_color(v: f64) -> Rgb<u8> {
    let f = (v / STRAIN_RANGE).clamp(-1.0, 1.0);
    let fade = |f: f64| (255.0 * (1.0 - f.abs())).round() as u8;
    if f < 0.0 {
        Rgb([fade(f), fade(f), 255])
    } else {
        Rgb([255, fade(f), fade(f)])
    }
}

fn put_thick(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (px, py) = (x + dx, y + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put_thick(img, (a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, c);
    }
}

/// Sectors run top to bottom, frames left to right. A TOS of `k·dt` is drawn
/// at the centre of frame column `k`.
pub fn strain_plot(strain: &StrainMatrix, curves: &[(TosCurve, Rgb<u8>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (pw, ph) = (width.saturating_sub(2 * MARGIN).max(1), height.saturating_sub(2 * MARGIN).max(1));
    let (n, t) = (strain.n_sectors, strain.n_frames);
    for py in 0..ph {
        let row = (py as usize * n / ph as usize).min(n - 1);
        for px in 0..pw {
            let col = (px as usize * t / pw as usize).min(t - 1);
            img.put_pixel(MARGIN + px, MARGIN + py, strain_color(strain.get(row, col)));
        }
    }
    let to_xy = |sector: usize, tos: f64| {
        let frame = (tos / strain.dt_ms).clamp(1.0, t as f64);
        let x = MARGIN as f64 + (frame - 0.5) / t as f64 * pw as f64;
        let y = MARGIN as f64 + (sector as f64 + 0.5) / n as f64 * ph as f64;
        (x, y)
    };
    for (curve, color) in curves {
        for s in 1..curve.values.len().min(n) {
            line(&mut img, to_xy(s - 1, curve.values[s - 1]), to_xy(s, curve.values[s]), *color);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_has_requested_size_and_draws_curves() {
        let s = StrainMatrix::zeros(16, 8, 17.0);
        let img = strain_plot(&s, &[(TosCurve::new(vec![34.0; 16]), Rgb([0, 0, 0]))], 200, 120);
        assert_eq!(img.dimensions(), (200, 120));
        assert!(img.pixels().any(|p| *p == Rgb([0, 0, 0])));
    }

    #[test]
    fn colors_are_signed() {
        assert_eq!(strain_color(0.0), Rgb([255, 255, 255]));
        assert_eq!(strain_color(-1.0), Rgb([0, 0, 255]));
        assert_eq!(strain_color(1.0), Rgb([255, 0, 0]));
    }
}
