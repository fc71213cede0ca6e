//! Correspondence overlay rendering: two images side by side with lines
//! from sampled co-salient pixels in the main image to their estimated
//! correspondences in a related image.

use image::{Rgb, RgbImage};

const GAP: usize = 4;

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
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

fn line_color(i: usize) -> Rgb<u8> {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 60, 60],
        [60, 200, 60],
        [70, 110, 240],
        [240, 200, 40],
        [200, 60, 220],
        [40, 220, 220],
        [250, 140, 30],
        [160, 255, 120],
    ];
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Render `[H,W,3]` float data in `[0,1]` into an image buffer region.
fn blit(img: &mut RgbImage, data: &[f64], h: usize, w: usize, x_off: usize) {
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * 3;
            img.put_pixel(
                (x + x_off) as u32,
                y as u32,
                Rgb([
                    (data[p] * 255.0) as u8,
                    (data[p + 1] * 255.0) as u8,
                    (data[p + 2] * 255.0) as u8,
                ]),
            );
        }
    }
}

/// A (row, col) pair in the main image matched to one in the related image.
pub type MatchedPoint = ((f64, f64), (f64, f64));

/// Build the side-by-side overlay.
///
/// `points` pairs a source pixel (row, col, full resolution, main image)
/// with its correspondence (row, col, full resolution) in the related image.
pub fn correspondence_overlay(
    main: &[f64],
    related: &[f64],
    h: usize,
    w: usize,
    points: &[MatchedPoint],
) -> RgbImage {
    let mut img = RgbImage::from_pixel((2 * w + GAP) as u32, h as u32, Rgb([24, 24, 24]));
    blit(&mut img, main, h, w, 0);
    blit(&mut img, related, h, w, w + GAP);
    for (i, ((sy, sx), (ty, tx))) in points.iter().enumerate() {
        let color = line_color(i);
        let (x0, y0) = (sx.round() as i64, sy.round() as i64);
        let (x1, y1) = ((tx.round() as i64) + (w + GAP) as i64, ty.round() as i64);
        draw_line(&mut img, x0, y0, x1, y1, color);
        // Endpoint markers.
        for (mx, my) in [(x0, y0), (x1, y1)] {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    put(&mut img, mx + dx, my + dy, color);
                }
            }
        }
    }
    img
}
