//! Keypoint extraction from score maps and rotation-dependent root-SIFT
//! description.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::imaging::GrayImage;

/// Per-pixel keypoint probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::dim(format!("{} scores for a {width}x{height} map", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("scores must lie in [0, 1]"));
        }
        Ok(ScoreMap { width, height, data })
    }

    pub(crate) fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        ScoreMap { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

impl Keypoint {
    pub fn point(&self) -> Point {
        Point::new(self.x as f64, self.y as f64)
    }
}

pub const DESCRIPTOR_LEN: usize = 128;

/// 128-d root-SIFT vector: unit L2 norm, or all zeros for a flat patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f64; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn zero() -> Self {
        Descriptor([0.0; DESCRIPTOR_LEN])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// Suppression radius (Chebyshev distance).
    pub window: usize,
    pub threshold: f64,
    pub max_keypoints: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            window: 10,
            threshold: 0.0,
            max_keypoints: 1000,
        }
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates at or above `threshold` are visited by descending score (ties
/// by row-major index); each accepted keypoint suppresses every candidate
/// within Chebyshev distance `window`.
pub fn nms(map: &ScoreMap, window: usize, threshold: f64, max_kp: usize) -> Vec<Keypoint> {
    let (w, h) = (map.width, map.height);
    let mut order: Vec<usize> = (0..w * h).filter(|&i| map.data[i] >= threshold).collect();
    order.sort_by(|&a, &b| map.data[b].total_cmp(&map.data[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; w * h];
    let mut out = Vec::new();
    for idx in order {
        if out.len() >= max_kp {
            break;
        }
        if suppressed[idx] {
            continue;
        }
        let (x, y) = (idx % w, idx / w);
        out.push(Keypoint {
            x,
            y,
            score: map.data[idx],
        });
        for yy in y.saturating_sub(window)..=(y + window).min(h - 1) {
            suppressed[yy * w + x.saturating_sub(window)..=yy * w + (x + window).min(w - 1)].fill(true);
        }
    }
    out
}

pub fn nms_with(map: &ScoreMap, cfg: &NmsConfig) -> Vec<Keypoint> {
    nms(map, cfg.window, cfg.threshold, cfg.max_keypoints)
}

const PATCH: isize = 16;
const CELLS: usize = 4;
const ORI_BINS: usize = 8;
const GAUSS_SIGMA: f64 = 8.0;
const CLAMP: f64 = 0.2;

/// Unnormalized 4×4×8 gradient-orientation histogram over the 16×16 patch
/// around `kp`, axes fixed to the image axes. Entry index is
/// `(row_cell · 4 + col_cell) · 8 + orientation_bin`.
pub fn gradient_histogram(img: &GrayImage, kp: &Keypoint) -> [f64; DESCRIPTOR_LEN] {
    let mut hist = [0.0; DESCRIPTOR_LEN];
    let (cx, cy) = (kp.x as isize, kp.y as isize);
    let cell = (PATCH as f64) / CELLS as f64;
    let bin_width = std::f64::consts::TAU / ORI_BINS as f64;
    for dy in -PATCH / 2..PATCH / 2 {
        for dx in -PATCH / 2..PATCH / 2 {
            let (px, py) = (cx + dx, cy + dy);
            let gx = 0.5 * (img.get_clamped(px + 1, py) - img.get_clamped(px - 1, py));
            let gy = 0.5 * (img.get_clamped(px, py + 1) - img.get_clamped(px, py - 1));
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            // offsets from the patch center
            let u = dx as f64 + 0.5;
            let v = dy as f64 + 0.5;
            let weight = mag * (-(u * u + v * v) / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();

            let col = (u + PATCH as f64 / 2.0) / cell - 0.5;
            let row = (v + PATCH as f64 / 2.0) / cell - 0.5;
            let mut angle = gy.atan2(gx);
            if angle < 0.0 {
                angle += std::f64::consts::TAU;
            }
            let ori = (angle / bin_width).min(ORI_BINS as f64 - 1e-12);

            let (r0, c0, o0) = (row.floor(), col.floor(), ori.floor());
            let (fr, fc, fo) = (row - r0, col - c0, ori - o0);
            for (ri, wr) in [(r0 as isize, 1.0 - fr), (r0 as isize + 1, fr)] {
                if ri < 0 || ri >= CELLS as isize || wr == 0.0 {
                    continue;
                }
                for (ci, wc) in [(c0 as isize, 1.0 - fc), (c0 as isize + 1, fc)] {
                    if ci < 0 || ci >= CELLS as isize || wc == 0.0 {
                        continue;
                    }
                    let base = (ri as usize * CELLS + ci as usize) * ORI_BINS;
                    let ob = o0 as usize % ORI_BINS;
                    hist[base + ob] += weight * wr * wc * (1.0 - fo);
                    hist[base + (ob + 1) % ORI_BINS] += weight * wr * wc * fo;
                }
            }
        }
    }
    hist
}

/// SIFT normalization (unit L2, clamp at 0.2, unit L2) followed by the
/// root transform (unit L1, element-wise square root).
pub fn root_sift(hist: &[f64; DESCRIPTOR_LEN]) -> Descriptor {
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm = l2(hist);
    if norm == 0.0 || !norm.is_finite() {
        return Descriptor::zero();
    }
    let mut d = *hist;
    for v in &mut d {
        *v = (*v / norm).min(CLAMP);
    }
    let norm = l2(&d);
    for v in &mut d {
        *v /= norm;
    }
    let l1: f64 = d.iter().sum();
    for v in &mut d {
        *v = (*v / l1).sqrt();
    }
    Descriptor(d)
}

pub fn describe(img: &GrayImage, kp: &Keypoint) -> Descriptor {
    root_sift(&gradient_histogram(img, kp))
}

pub fn describe_all(img: &GrayImage, kps: &[Keypoint]) -> Vec<Descriptor> {
    use rayon::prelude::*;
    kps.par_iter().map(|kp| describe(img, kp)).collect()
}

/// One keypoint per line: `x y score` followed by the 128 descriptor values.
pub fn format_keypoints(kps: &[Keypoint], descs: &[Descriptor]) -> Result<String> {
    if kps.len() != descs.len() {
        return Err(Error::dim("one descriptor per keypoint required"));
    }
    let mut s = String::new();
    for (kp, d) in kps.iter().zip(descs) {
        let _ = write!(s, "{} {} {:.17e}", kp.x, kp.y, kp.score);
        for v in &d.0 {
            let _ = write!(s, " {v:.17e}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_keypoints(text: &str) -> Result<(Vec<Keypoint>, Vec<Descriptor>)> {
    let mut kps = Vec::new();
    let mut descs = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let err = |m: String| Error::Parse {
            offset: line_start,
            message: m,
        };
        if fields.len() != 3 + DESCRIPTOR_LEN {
            return Err(err(format!("expected {} fields, got {}", 3 + DESCRIPTOR_LEN, fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let (x, y) = (num(fields[0])?, num(fields[1])?);
        if x < 0.0 || y < 0.0 {
            return Err(err("negative keypoint coordinate".into()));
        }
        kps.push(Keypoint {
            x: x.round() as usize,
            y: y.round() as usize,
            score: num(fields[2])?,
        });
        let mut d = [0.0; DESCRIPTOR_LEN];
        for (dst, f) in d.iter_mut().zip(&fields[3..]) {
            *dst = num(f)?;
        }
        descs.push(Descriptor(d));
    }
    Ok((kps, descs))
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint], descs: &[Descriptor]) -> Result<()> {
    crate::io_util::write_atomic(path, format_keypoints(kps, descs)?.as_bytes())
}

pub fn read_keypoints(path: &Path) -> Result<(Vec<Keypoint>, Vec<Descriptor>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text)
}
