//! Sequential frame-to-frame registration and feather-blended mosaics.
//!
//! Frame `k` is registered against frame `k − 1`; the increments are
//! chained into transforms from every frame to frame 0 without any global
//! refinement. The first increment that fails stops the chain.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{register_detections, Detection, Detector};
use crate::error::{Error, Result};
use crate::geometry::{Homography, Point};
use crate::imaging::{load_gray, GrayImage};
use crate::registration::{violates_failure_rules, RansacConfig};
use crate::rng::indexed_stream;

/// Largest canvas side accepted before rendering is refused.
pub const MAX_CANVAS_SIDE: usize = 16384;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MosaicConfig {
    pub ransac: RansacConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MosaicState {
    /// `transforms[k]` maps frame `k` into frame 0 (`H_0k`).
    pub transforms: Vec<Homography>,
    pub frames_registered: usize,
    /// Zero-based index of the first frame that failed to register.
    pub failure_index: Option<usize>,
    pub canvas_w: usize,
    pub canvas_h: usize,
    /// Frame-0 coordinates of canvas pixel (0, 0).
    pub origin: (i64, i64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosaicSummary {
    pub frames_registered: usize,
    pub failure_index: Option<usize>,
    pub canvas_w: usize,
    pub canvas_h: usize,
}

impl MosaicState {
    pub fn summary(&self) -> MosaicSummary {
        MosaicSummary {
            frames_registered: self.frames_registered,
            failure_index: self.failure_index,
            canvas_w: self.canvas_w,
            canvas_h: self.canvas_h,
        }
    }
}

fn corners(img: &GrayImage) -> [Point; 4] {
    let (w, h) = (img.width() as f64 - 1.0, img.height() as f64 - 1.0);
    [Point::new(0.0, 0.0), Point::new(w, 0.0), Point::new(0.0, h), Point::new(w, h)]
}

/// Registers consecutive frames and sizes the canvas to the union of the
/// registered frames' warped corners.
pub fn register_sequence(frames: &[GrayImage], detector: &Detector, cfg: &MosaicConfig) -> Result<MosaicState> {
    if frames.is_empty() {
        return Err(Error::invalid("mosaic needs at least one frame"));
    }
    let mut transforms = vec![Homography::identity()];
    let mut failure_index = None;
    let mut prev: Detection = detector.detect(&frames[0]).map_err(|e| frame_err(0, e))?;
    for (k, frame) in frames.iter().enumerate().skip(1) {
        let cur = detector.detect(frame).map_err(|e| frame_err(k, e))?;
        let mut rng = indexed_stream(cfg.seed, "ransac", k as u64);
        let reg = register_detections(cur, prev, &cfg.ransac, &mut rng);
        let next = reg.estimate.as_ref().and_then(|(inc, _)| {
            if violates_failure_rules(inc) {
                return None;
            }
            let h = transforms[k - 1].compose(inc).ok()?;
            // Every registered frame must stay finite on the canvas.
            corners(frame).iter().all(|c| h.apply(*c).is_ok()).then_some(h)
        });
        match next {
            Some(h) => transforms.push(h),
            None => {
                log::info!("frame {k} failed to register");
                failure_index = Some(k);
                break;
            }
        }
        prev = reg.a;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (h, frame) in transforms.iter().zip(frames) {
        for c in corners(frame) {
            let p = h.apply(c)?;
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
    }
    let (ox, oy) = ((x0 + 1e-9).floor(), (y0 + 1e-9).floor());
    let canvas_w = ((x1 - 1e-9).ceil() - ox) as usize + 1;
    let canvas_h = ((y1 - 1e-9).ceil() - oy) as usize + 1;
    if canvas_w > MAX_CANVAS_SIDE || canvas_h > MAX_CANVAS_SIDE {
        return Err(Error::invalid(format!("canvas {canvas_w}x{canvas_h} exceeds {MAX_CANVAS_SIDE} per side")));
    }
    Ok(MosaicState {
        frames_registered: transforms.len(),
        transforms,
        failure_index,
        canvas_w,
        canvas_h,
        origin: (ox as i64, oy as i64),
    })
}

fn frame_err(index: usize, e: Error) -> Error {
    Error::Frame {
        index,
        source: Box::new(e),
    }
}

/// Feather weight of a frame-local position: one plus the distance to the
/// nearest frame edge, 0 outside the frame.
fn feather(p: Point, w: usize, h: usize) -> f64 {
    let (wm, hm) = (w as f64 - 1.0, h as f64 - 1.0);
    if p.x < 0.0 || p.y < 0.0 || p.x > wm || p.y > hm {
        return 0.0;
    }
    1.0 + p.x.min(p.y).min(wm - p.x).min(hm - p.y)
}

/// Warps every registered frame onto the canvas and blends overlaps with
/// normalized feather weights. Uncovered pixels are 0.
pub fn render(state: &MosaicState, frames: &[GrayImage]) -> Result<GrayImage> {
    let inverses: Vec<Homography> = state.transforms.iter().map(Homography::inverse).collect::<Result<_>>()?;
    let (ox, oy) = (state.origin.0 as f64, state.origin.1 as f64);
    let mut out = GrayImage::new(state.canvas_w, state.canvas_h)?;
    for y in 0..state.canvas_h {
        for x in 0..state.canvas_w {
            let p = Point::new(x as f64 + ox, y as f64 + oy);
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (inv, frame) in inverses.iter().zip(frames) {
                let Ok(q) = inv.apply(p) else { continue };
                let wgt = feather(q, frame.width(), frame.height());
                if wgt > 0.0 {
                    if let Some(v) = frame.sample_bilinear(q.x, q.y) {
                        acc += wgt * v;
                        wsum += wgt;
                    }
                }
            }
            if wsum > 0.0 {
                out.set(x, y, (acc / wsum).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}

const FRAME_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

/// Image files in `dir`, ordered lexicographically by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| FRAME_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads frames in order; failures carry the frame index.
pub fn load_frames(paths: &[PathBuf]) -> Result<Vec<GrayImage>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| load_gray(p).map_err(|e| frame_err(i, e)))
        .collect()
}
