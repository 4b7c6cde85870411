//! Procedural test imagery: smooth blobs and thin ridges on a mid-gray
//! background.

use rand::Rng;

use crate::error::Result;
use crate::imaging::GrayImage;

/// A seeded texture with enough corner-like structure for keypoint
/// detection. Blob and ridge counts scale with the image area.
pub fn textured_image<R: Rng + ?Sized>(w: usize, h: usize, rng: &mut R) -> Result<GrayImage> {
    let area = (w * h) as f64;
    let n_blobs = ((area / 150.0).round() as usize).max(4);
    let n_ridges = ((area / 600.0).round() as usize).max(2);
    let mut data = vec![0.5; w * h];
    for _ in 0..n_blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sx: f64 = rng.random_range(1.5..4.5);
        let sy = rng.random_range(1.5..4.5);
        let amp = rng.random_range(0.2..0.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let reach = 3.0 * sx.max(sy);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(w - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / sx;
                let dy = (y as f64 - cy) / sy;
                data[y * w + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    for _ in 0..n_ridges {
        let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let len = rng.random_range(0.3..0.8) * w.max(h) as f64;
        let width = rng.random_range(0.7..1.5);
        let amp = rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let (ux, uy) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let t = px * ux + py * uy;
                if t.abs() > 0.5 * len {
                    continue;
                }
                let d = (px * uy - py * ux) / width;
                data[y * w + x] += amp * (-0.5 * d * d).exp();
            }
        }
    }
    GrayImage::from_pixels(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
