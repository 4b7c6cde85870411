//! Homography estimation from matches and registration-quality metrics.

use nalgebra::{DMatrix, Matrix3};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Descriptor, Keypoint};
use crate::geometry::{failure_decompose, Homography, Point};
use crate::matching::{nndr_match, verify, Match};

pub const MIN_SCALE: f64 = 0.1;
pub const MAX_SCALE: f64 = 4.0;
pub const ACCEPTABLE_MEE: f64 = 10.0;
pub const ACCEPTABLE_MAE: f64 = 30.0;
pub const COVERAGE_RADIUS: f64 = 25.0;

/// Relative positions of the reference points used for MEE and MAE.
pub const REFERENCE_POINTS: [(f64, f64); 6] =
    [(0.25, 0.25), (0.5, 0.25), (0.75, 0.25), (0.25, 0.75), (0.5, 0.75), (0.75, 0.75)];

/// Similarity that moves the centroid to the origin and the RMS distance to √2.
fn normalizer(pts: &[Point]) -> Option<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let rms = (pts.iter().map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2)).sum::<f64>() / n).sqrt();
    if !(rms > 1e-12) || !rms.is_finite() {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    Point::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Normalized direct linear transform mapping `src[i]` to `dst[i]`.
pub fn dlt_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    if src.len() != dst.len() {
        return Err(Error::dim(format!("{} source vs {} destination points", src.len(), dst.len())));
    }
    if src.len() < 4 {
        return Err(Error::invalid(format!("need at least 4 correspondences, got {}", src.len())));
    }
    let ts = normalizer(src).ok_or(Error::DegenerateSample)?;
    let td = normalizer(dst).ok_or(Error::DegenerateSample)?;
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = transform(&ts, *s);
        let d = transform(&td, *d);
        let r = 2 * i;
        a[(r, 3)] = -s.x;
        a[(r, 4)] = -s.y;
        a[(r, 5)] = -1.0;
        a[(r, 6)] = d.y * s.x;
        a[(r, 7)] = d.y * s.y;
        a[(r, 8)] = d.y;
        a[(r + 1, 0)] = s.x;
        a[(r + 1, 1)] = s.y;
        a[(r + 1, 2)] = 1.0;
        a[(r + 1, 6)] = -d.x * s.x;
        a[(r + 1, 7)] = -d.x * s.y;
        a[(r + 1, 8)] = -d.x;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::DegenerateSample)?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let sv = &svd.singular_values;
    let largest = sv[order[order.len() - 1]];
    // Rank 8 is required: the second-smallest singular value must be clearly nonzero.
    if !(largest > 0.0) || sv[order[1]] <= 1e-9 * largest {
        return Err(Error::DegenerateSample);
    }
    let h = v_t.row(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(Error::DegenerateSample)?;
    Homography::from_matrix(td_inv * hn * ts).map_err(|_| Error::DegenerateSample)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iters: usize,
    pub inlier_thresh: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iters: 1000,
            inlier_thresh: 3.0,
        }
    }
}

fn collinear(a: Point, b: Point, c: Point) -> bool {
    let cross = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let scale = (b.x - a.x).hypot(b.y - a.y).max((c.x - a.x).hypot(c.y - a.y)).max(1.0);
    cross.abs() <= 1e-9 * scale * scale
}

fn any_three_collinear(p: &[Point; 4]) -> bool {
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .any(|&(i, j, k)| collinear(p[i], p[j], p[k]))
}

fn inliers_of(h: &Homography, src: &[Point], dst: &[Point], thresh: f64) -> Vec<usize> {
    (0..src.len())
        .filter(|&i| h.apply(src[i]).map(|p| p.distance(&dst[i]) <= thresh).unwrap_or(false))
        .collect()
}

/// RANSAC over 4-point samples with a final refit on the best inlier set.
/// The model maps keypoints of A onto keypoints of B. Returns `None` when
/// there are fewer than 4 matches or no model reaches 4 inliers. Inlier
/// indices refer to `matches`.
pub fn ransac_homography<R: Rng + ?Sized>(
    matches: &[Match],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Option<(Homography, Vec<usize>)> {
    let src: Vec<Point> = matches.iter().map(|m| kps_a[m.idx_a].point()).collect();
    let dst: Vec<Point> = matches.iter().map(|m| kps_b[m.idx_b].point()).collect();
    ransac_points(&src, &dst, cfg, rng)
}

/// [`ransac_homography`] on raw correspondences `src[i] → dst[i]`.
pub fn ransac_points<R: Rng + ?Sized>(
    src: &[Point],
    dst: &[Point],
    cfg: &RansacConfig,
    rng: &mut R,
) -> Option<(Homography, Vec<usize>)> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let mut best: Option<(Homography, Vec<usize>)> = None;
    for _ in 0..cfg.iters {
        let idx = index::sample(rng, src.len(), 4);
        let s = [src[idx.index(0)], src[idx.index(1)], src[idx.index(2)], src[idx.index(3)]];
        let d = [dst[idx.index(0)], dst[idx.index(1)], dst[idx.index(2)], dst[idx.index(3)]];
        if any_three_collinear(&s) || any_three_collinear(&d) {
            continue;
        }
        let Ok(h) = dlt_homography(&s, &d) else {
            continue;
        };
        let inl = inliers_of(&h, src, dst, cfg.inlier_thresh);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((h, inl));
        }
    }
    let (h, inl) = best?;
    if inl.len() < 4 {
        return None;
    }
    let s: Vec<Point> = inl.iter().map(|&i| src[i]).collect();
    let d: Vec<Point> = inl.iter().map(|&i| dst[i]).collect();
    if let Ok(refit) = dlt_homography(&s, &d) {
        let refit_inl = inliers_of(&refit, src, dst, cfg.inlier_thresh);
        if refit_inl.len() >= inl.len() {
            return Some((refit, refit_inl));
        }
    }
    Some((h, inl))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationClass {
    Failed,
    Inaccurate,
    Acceptable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub h_est: Option<Homography>,
    pub inliers: Vec<usize>,
    pub class: RegistrationClass,
    pub mee: Option<f64>,
    pub mae: Option<f64>,
}

/// True when `h` breaks the failure rules: a flip, or an area scale
/// outside `[MIN_SCALE, MAX_SCALE]`.
pub fn violates_failure_rules(h: &Homography) -> bool {
    let d = failure_decompose(h);
    d.flip || !(MIN_SCALE..=MAX_SCALE).contains(&d.scale)
}

/// Reference-point errors of `h_est` against `h_gt` on a `w × h` image.
pub fn reference_errors(h_est: &Homography, h_gt: &Homography, w: usize, h: usize) -> Option<[f64; 6]> {
    let mut out = [0.0; 6];
    for (dst, (rx, ry)) in out.iter_mut().zip(REFERENCE_POINTS) {
        let c = Point::new(rx * w as f64, ry * h as f64);
        let a = h_est.apply(c).ok()?;
        let b = h_gt.apply(c).ok()?;
        *dst = a.distance(&b);
    }
    Some(out)
}

/// Classifies an estimate as failed, inaccurate or acceptable.
pub fn classify_registration(h_est: Option<&Homography>, h_gt: &Homography, w: usize, h: usize) -> RegistrationResult {
    let failed = |h_est: Option<&Homography>| RegistrationResult {
        h_est: h_est.copied(),
        inliers: Vec::new(),
        class: RegistrationClass::Failed,
        mee: None,
        mae: None,
    };
    let Some(est) = h_est else {
        return failed(None);
    };
    if violates_failure_rules(est) {
        return failed(Some(est));
    }
    let Some(mut d) = reference_errors(est, h_gt, w, h) else {
        return failed(Some(est));
    };
    d.sort_by(f64::total_cmp);
    let mee = 0.5 * (d[2] + d[3]);
    let mae = d[5];
    let class = if mee < ACCEPTABLE_MEE && mae < ACCEPTABLE_MAE {
        RegistrationClass::Acceptable
    } else {
        RegistrationClass::Inaccurate
    };
    RegistrationResult {
        h_est: Some(*est),
        inliers: Vec::new(),
        class,
        mee: Some(mee),
        mae: Some(mae),
    }
}

fn inside(p: Point, w: usize, h: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (w as f64 - 1.0) && p.y <= (h as f64 - 1.0)
}

/// Points of `pts` whose image under `h` lies inside a `w × h` frame,
/// returned with their mapped positions.
fn shared(pts: &[Keypoint], h: &Homography, w: usize, hgt: usize) -> Vec<(Point, Point)> {
    pts.iter()
        .filter_map(|k| {
            let q = h.apply(k.point()).ok()?;
            inside(q, w, hgt).then_some((k.point(), q))
        })
        .collect()
}

/// Sizes of the shared-region keypoint sets `P` (from A) and `P′` (from B).
pub fn shared_counts(kps_a: &[Keypoint], kps_b: &[Keypoint], h_gt: &Homography, w: usize, h: usize) -> Result<(usize, usize)> {
    let inv = h_gt.inverse()?;
    Ok((shared(kps_a, h_gt, w, h).len(), shared(kps_b, &inv, w, h).len()))
}

/// Bidirectional repeatability within `eps` over the shared region.
pub fn repeatability(kps_a: &[Keypoint], kps_b: &[Keypoint], h_gt: &Homography, w: usize, h: usize, eps: f64) -> Result<f64> {
    let inv = h_gt.inverse()?;
    let p = shared(kps_a, h_gt, w, h);
    let q = shared(kps_b, &inv, w, h);
    if p.is_empty() && q.is_empty() {
        return Ok(0.0);
    }
    let hit = |x: Point, set: &[(Point, Point)]| set.iter().any(|(orig, _)| x.distance(orig) < eps);
    let count = p.iter().filter(|(_, mapped)| hit(*mapped, &q)).count()
        + q.iter().filter(|(_, mapped)| hit(*mapped, &p)).count();
    Ok(count as f64 / (p.len() + q.len()) as f64)
}

/// Correct matches over the shared-region keypoint count, capped at 1.
pub fn m_score(n_tp: usize, kps_a: &[Keypoint], kps_b: &[Keypoint], h_gt: &Homography, w: usize, h: usize) -> Result<f64> {
    let (p, q) = shared_counts(kps_a, kps_b, h_gt, w, h)?;
    if p + q == 0 {
        return Ok(0.0);
    }
    Ok((n_tp as f64 / (p + q) as f64).min(1.0))
}

/// Fraction of pixels whose centers lie within `radius` of some point.
pub fn coverage_fraction(points: &[Point], w: usize, h: usize, radius: f64) -> f64 {
    if w == 0 || h == 0 {
        return 0.0;
    }
    let mut covered = vec![false; w * h];
    let r2 = radius * radius;
    for p in points {
        let y0 = (p.y - radius).floor().max(0.0) as usize;
        let y1 = ((p.y + radius).ceil().max(0.0) as usize).min(h - 1);
        let x0 = (p.x - radius).floor().max(0.0) as usize;
        let x1 = ((p.x + radius).ceil().max(0.0) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                if dx * dx + dy * dy <= r2 {
                    covered[y * w + x] = true;
                }
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / (w * h) as f64
}

/// Default NNDR sweep: 0.05, 0.10, …, 1.00.
pub fn default_t_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.05).collect()
}

/// Area under the curve traced by sweeping the NNDR threshold.
/// `x = FP/(TP+FP)` and `y = TP/C` with `C` the largest match count over
/// the sweep; the curve is closed with `(0, 0)` and `(1, y_max)`.
pub fn auc_nndr(
    desc_a: &[Descriptor],
    desc_b: &[Descriptor],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_gt: &Homography,
    eps: f64,
    t_grid: &[f64],
) -> Result<f64> {
    if t_grid.is_empty() || t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("threshold grid must be non-empty and strictly increasing"));
    }
    let mut counts = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let m = nndr_match(desc_a, desc_b, t)?;
        let tp = verify(&m, kps_a, kps_b, h_gt, eps).iter().filter(|v| v.is_tp()).count();
        counts.push((tp, m.len() - tp));
    }
    Ok(auc_from_counts(&counts))
}

/// The curve construction of [`auc_nndr`] from per-threshold `(TP, FP)` counts.
pub fn auc_from_counts(counts: &[(usize, usize)]) -> f64 {
    let c = counts.iter().map(|&(tp, fp)| tp + fp).max().unwrap_or(0);
    if c == 0 {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = counts
        .iter()
        .map(|&(tp, fp)| {
            let x = if tp + fp == 0 { 0.0 } else { fp as f64 / (tp + fp) as f64 };
            (x, tp as f64 / c as f64)
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let y_max = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut curve = Vec::with_capacity(pts.len() + 2);
    curve.push((0.0, 0.0));
    curve.extend(pts);
    curve.push((1.0, y_max));
    let area: f64 = curve.windows(2).map(|s| (s[1].0 - s[0].0) * 0.5 * (s[0].1 + s[1].1)).sum();
    area.clamp(0.0, 1.0)
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair_id: String,
    pub class: RegistrationClass,
    pub mee: Option<f64>,
    pub mae: Option<f64>,
    pub repeatability: f64,
    pub m_score: f64,
    pub coverage: f64,
    pub auc: f64,
    pub n_kp: usize,
    pub n_matches: usize,
    pub n_tp: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub repeatability: f64,
    pub m_score: f64,
    pub coverage: f64,
    pub auc: f64,
    /// Over pairs that were not failed; `None` when all failed.
    pub mee: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_pairs: usize,
    pub failed_pct: f64,
    pub inaccurate_pct: f64,
    pub acceptable_pct: f64,
    pub means: MetricMeans,
    pub pairs: Vec<PairMetrics>,
}

impl EvaluationReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>) -> Self {
        let n = pairs.len();
        let pct = |c: RegistrationClass| {
            if n == 0 {
                0.0
            } else {
                100.0 * pairs.iter().filter(|p| p.class == c).count() as f64 / n as f64
            }
        };
        let mean = |f: &dyn Fn(&PairMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                pairs.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let opt_mean = |f: &dyn Fn(&PairMetrics) -> Option<f64>| {
            let v: Vec<f64> = pairs.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let means = MetricMeans {
            repeatability: mean(&|p| p.repeatability),
            m_score: mean(&|p| p.m_score),
            coverage: mean(&|p| p.coverage),
            auc: mean(&|p| p.auc),
            mee: opt_mean(&|p| p.mee),
            mae: opt_mean(&|p| p.mae),
        };
        EvaluationReport {
            n_pairs: n,
            failed_pct: pct(RegistrationClass::Failed),
            inaccurate_pct: pct(RegistrationClass::Inaccurate),
            acceptable_pct: pct(RegistrationClass::Acceptable),
            means,
            pairs,
        }
    }
}
