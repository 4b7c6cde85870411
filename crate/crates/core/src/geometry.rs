//! Projective transforms between image pairs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

const NORMALIZE_EPS: f64 = 1e-12;
const INFINITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// An invertible 3×3 projective transform, normalized so that the
/// bottom-right entry is 1 whenever it is not (numerically) zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Builds a homography from row-major entries. Singular matrices are rejected.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        );
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonInvertible);
        }
        let m = normalize(m);
        let scale = m.abs().max();
        let det = m.determinant();
        if scale == 0.0 || det.abs() <= 1e-14 * scale.powi(3) {
            return Err(Error::NonInvertible);
        }
        Ok(Homography { m })
    }

    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    pub fn scaling(sx: f64, sy: f64) -> Result<Self> {
        Self::from_rows([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.m;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.m.try_inverse().ok_or(Error::NonInvertible)?;
        Self::from_matrix(inv)
    }

    /// Matrix product `self · other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(self.m * other.m)
    }

    /// Maps a point, failing when it lands at infinity.
    pub fn apply(&self, p: Point) -> Result<Point> {
        let m = &self.m;
        let w = m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)];
        if w.abs() <= INFINITY_EPS {
            return Err(Error::PointAtInfinity);
        }
        Ok(Point {
            x: (m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)]) / w,
            y: (m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)]) / w,
        })
    }

    /// Conjugates by a translation: the same transform expressed in frames
    /// whose origins sit at `src_offset` (input side) and `dst_offset`
    /// (output side) of the original frames.
    pub fn reframe(&self, src_offset: Point, dst_offset: Point) -> Result<Self> {
        let pre = Homography::translation(src_offset.x, src_offset.y);
        let post = Homography::translation(-dst_offset.x, -dst_offset.y);
        post.compose(self)?.compose(&pre)
    }
}

fn normalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let c = m[(2, 2)];
    if c.abs() > NORMALIZE_EPS {
        m / c
    } else {
        m
    }
}

/// The relative transform `g′ · g⁻¹` between two views synthesized from one base image.
pub fn compose_pair(g_prime: &Homography, g: &Homography) -> Result<Homography> {
    let g_inv = g.inverse()?;
    g_prime.compose(&g_inv)
}

/// Sampling ranges for random homographies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomographySampleRanges {
    pub scale_min: f64,
    pub scale_max: f64,
    pub persp_min: f64,
    pub persp_max: f64,
    pub trans_max_x: f64,
    pub trans_max_y: f64,
    pub shear_min: f64,
    pub shear_max: f64,
    pub rot_max_deg: f64,
}

impl Default for HomographySampleRanges {
    fn default() -> Self {
        HomographySampleRanges {
            scale_min: 0.7,
            scale_max: 1.3,
            persp_min: 1e-6,
            persp_max: 8e-4,
            trans_max_x: 100.0,
            trans_max_y: 100.0,
            shear_min: -0.2,
            shear_max: 0.2,
            rot_max_deg: 25.0,
        }
    }
}

impl HomographySampleRanges {
    /// Ranges that always sample the identity.
    pub fn identity() -> Self {
        HomographySampleRanges {
            scale_min: 1.0,
            scale_max: 1.0,
            persp_min: 0.0,
            persp_max: 0.0,
            trans_max_x: 0.0,
            trans_max_y: 0.0,
            shear_min: 0.0,
            shear_max: 0.0,
            rot_max_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.scale_min,
            self.scale_max,
            self.persp_min,
            self.persp_max,
            self.trans_max_x,
            self.trans_max_y,
            self.shear_min,
            self.shear_max,
            self.rot_max_deg,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography ranges must be finite"));
        }
        if self.scale_min <= 0.0 || self.scale_min > self.scale_max {
            return Err(Error::invalid("scale range must satisfy 0 < min <= max"));
        }
        if self.persp_min < 0.0 || self.persp_min > self.persp_max {
            return Err(Error::invalid("perspective range must satisfy 0 <= min <= max"));
        }
        if self.trans_max_x < 0.0 || self.trans_max_y < 0.0 {
            return Err(Error::invalid("translation bounds must be non-negative"));
        }
        if self.shear_min > self.shear_max {
            return Err(Error::invalid("shear range must satisfy min <= max"));
        }
        if !(0.0..90.0).contains(&self.rot_max_deg) {
            return Err(Error::invalid("rotation bound must lie in [0, 90)"));
        }
        Ok(())
    }
}

/// The individual factors drawn by [`sample_homography_with_factors`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledFactors {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    pub persp_x: f64,
    pub persp_y: f64,
    pub trans_x: f64,
    pub trans_y: f64,
}

impl SampledFactors {
    /// Recomposes `T · C · P · Sh · Sc · R · C⁻¹` where `C` moves the origin to `center`.
    pub fn compose(&self, center: Point) -> Result<Homography> {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let sc = Matrix3::new(self.scale, 0.0, 0.0, 0.0, self.scale, 0.0, 0.0, 0.0, 1.0);
        let sh = Matrix3::new(1.0, self.shear_x, 0.0, self.shear_y, 1.0, 0.0, 0.0, 0.0, 1.0);
        let p = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, self.persp_x, self.persp_y, 1.0);
        let to_center = Matrix3::new(1.0, 0.0, center.x, 0.0, 1.0, center.y, 0.0, 0.0, 1.0);
        let from_center = Matrix3::new(1.0, 0.0, -center.x, 0.0, 1.0, -center.y, 0.0, 0.0, 1.0);
        let t = Matrix3::new(1.0, 0.0, self.trans_x, 0.0, 1.0, self.trans_y, 0.0, 0.0, 1.0);
        Homography::from_matrix(t * to_center * p * sh * sc * rot * from_center)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn signed<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let mag = uniform(rng, lo, hi);
    if rng.random_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Draws a random homography and the factors it was built from.
pub fn sample_homography_with_factors<R: Rng + ?Sized>(
    ranges: &HomographySampleRanges,
    center: Point,
    rng: &mut R,
) -> Result<(Homography, SampledFactors)> {
    ranges.validate()?;
    let f = SampledFactors {
        rotation_deg: uniform(rng, -ranges.rot_max_deg, ranges.rot_max_deg),
        scale: uniform(rng, ranges.scale_min, ranges.scale_max),
        shear_x: uniform(rng, ranges.shear_min, ranges.shear_max),
        shear_y: uniform(rng, ranges.shear_min, ranges.shear_max),
        persp_x: signed(rng, ranges.persp_min, ranges.persp_max),
        persp_y: signed(rng, ranges.persp_min, ranges.persp_max),
        trans_x: uniform(rng, -ranges.trans_max_x, ranges.trans_max_x),
        trans_y: uniform(rng, -ranges.trans_max_y, ranges.trans_max_y),
    };
    Ok((f.compose(center)?, f))
}

pub fn sample_homography<R: Rng + ?Sized>(
    ranges: &HomographySampleRanges,
    center: Point,
    rng: &mut R,
) -> Result<Homography> {
    sample_homography_with_factors(ranges, center, rng).map(|(h, _)| h)
}

/// Inverse-maps every output pixel into `src` and samples bilinearly.
/// Pixels that map outside the source are 0.
pub fn warp_image(src: &GrayImage, h: &Homography, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::dim("warp output must be at least 1x1"));
    }
    let inv = h.inverse()?;
    let mut out = GrayImage::new(out_w, out_h)?;
    for y in 0..out_h {
        for x in 0..out_w {
            let v = match inv.apply(Point::new(x as f64, y as f64)) {
                Ok(p) => src.sample_bilinear(p.x, p.y).unwrap_or(0.0),
                Err(_) => 0.0,
            };
            out.set(x, y, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailureDecomposition {
    pub flip: bool,
    pub scale: f64,
}

/// Orientation and area scale of the affine block of `h`.
pub fn failure_decompose(h: &Homography) -> FailureDecomposition {
    let m = h.matrix();
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    FailureDecomposition {
        flip: det < 0.0,
        scale: det.abs().sqrt(),
    }
}

/// Parses nine whitespace-separated numbers, row-major.
pub fn parse_homography(text: &str) -> Result<Homography> {
    let mut vals = [0.0f64; 9];
    let mut count = 0;
    let mut offset = 0;
    for token in text.split_ascii_whitespace() {
        let start = text[offset..]
            .find(token)
            .map(|i| i + offset)
            .unwrap_or(offset);
        offset = start + token.len();
        if count == 9 {
            return Err(Error::Parse {
                offset: start,
                message: "more than 9 values".into(),
            });
        }
        vals[count] = token.parse::<f64>().map_err(|e| Error::Parse {
            offset: start,
            message: format!("invalid number {token:?}: {e}"),
        })?;
        count += 1;
    }
    if count != 9 {
        return Err(Error::Parse {
            offset: text.len(),
            message: format!("expected 9 values, found {count}"),
        });
    }
    Homography::from_rows([
        [vals[0], vals[1], vals[2]],
        [vals[3], vals[4], vals[5]],
        [vals[6], vals[7], vals[8]],
    ])
}

/// Formats with 17 significant digits, one row per line.
pub fn format_homography(h: &Homography) -> String {
    let mut s = String::new();
    for row in h.rows() {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", row[0], row[1], row[2]);
    }
    s
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_homography(&text)
}

pub fn write_homography(path: &Path, h: &Homography) -> Result<()> {
    crate::io_util::write_atomic(path, format_homography(h).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: &Homography, b: &Homography, tol: f64) {
        let d = (a.matrix() - b.matrix()).abs().max();
        assert!(d <= tol, "matrices differ by {d}\n{a:?}\n{b:?}");
    }

    fn inverse_by_adjugate(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let c = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let cof = [
            [c(1, 2, 1, 2), -c(1, 2, 0, 2), c(1, 2, 0, 1)],
            [-c(0, 2, 1, 2), c(0, 2, 0, 2), -c(0, 2, 0, 1)],
            [c(0, 1, 1, 2), -c(0, 1, 0, 2), c(0, 1, 0, 1)],
        ];
        let det = m[0][0] * cof[0][0] + m[0][1] * cof[0][1] + m[0][2] * cof[0][2];
        let mut inv = [[0.0; 3]; 3];
        for (i, row) in inv.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = cof[j][i] / det;
            }
        }
        inv
    }

    fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    #[test]
    fn compose_pair_of_equal_transforms_is_identity() {
        let mut rng = stream(1, "test");
        let ranges = HomographySampleRanges::default();
        for _ in 0..1000 {
            let g = sample_homography(&ranges, Point::new(128.0, 128.0), &mut rng).unwrap();
            assert_close(&compose_pair(&g, &g).unwrap(), &Homography::identity(), 1e-9);
        }
    }

    #[test]
    fn compose_pair_of_translations() {
        let h = compose_pair(&Homography::translation(8.0, 0.0), &Homography::translation(5.0, 0.0)).unwrap();
        assert_close(&h, &Homography::translation(3.0, 0.0), 1e-15);
    }

    #[test]
    fn compose_pair_matches_adjugate_oracle() {
        let mut rng = stream(2, "test");
        let ranges = HomographySampleRanges::default();
        for _ in 0..200 {
            let g = sample_homography(&ranges, Point::new(300.0, 200.0), &mut rng).unwrap();
            let gp = sample_homography(&ranges, Point::new(300.0, 200.0), &mut rng).unwrap();
            let mut expected = matmul(gp.rows(), inverse_by_adjugate(g.rows()));
            let c = expected[2][2];
            expected.iter_mut().flatten().for_each(|v| *v /= c);
            let got = compose_pair(&gp, &g).unwrap().rows();
            for i in 0..3 {
                for j in 0..3 {
                    let tol = 1e-9 * expected[i][j].abs().max(1.0);
                    assert!((got[i][j] - expected[i][j]).abs() <= tol, "{i},{j}: {got:?} vs {expected:?}");
                }
            }
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let err = Homography::from_rows([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]]).unwrap_err();
        assert_eq!(err.to_string(), "non-invertible transform");
    }

    #[test]
    fn apply_examples() {
        let p = Homography::identity().apply(Point::new(3.5, 7.25)).unwrap();
        assert_eq!(p, Point::new(3.5, 7.25));
        let p = Homography::translation(2.0, -1.0).apply(Point::new(0.0, 0.0)).unwrap();
        assert_eq!(p, Point::new(2.0, -1.0));

        let h = Homography::from_rows([[1.2, 0.1, 3.0], [-0.2, 0.9, 4.0], [0.001, 0.0, 1.0]]).unwrap();
        let p = h.apply(Point::new(100.0, 50.0)).unwrap();
        // w = 0.001*100 + 1 = 1.1
        assert!((p.x - (120.0 + 5.0 + 3.0) / 1.1).abs() < 1e-12);
        assert!((p.y - (-20.0 + 45.0 + 4.0) / 1.1).abs() < 1e-12);
    }

    #[test]
    fn apply_at_infinity_fails() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.01, 0.0, 1.0]]).unwrap();
        let err = h.apply(Point::new(-100.0, 3.0)).unwrap_err();
        assert_eq!(err.to_string(), "point at infinity");
    }

    #[test]
    fn apply_round_trip_through_inverse() {
        let mut rng = stream(3, "test");
        let ranges = HomographySampleRanges::default();
        for _ in 0..200 {
            let h = sample_homography(&ranges, Point::new(500.0, 500.0), &mut rng).unwrap();
            let inv = h.inverse().unwrap();
            for _ in 0..20 {
                let p = Point::new(rng.random_range(0.0..1e4), rng.random_range(0.0..1e4));
                if let Ok(q) = h.apply(p) {
                    let back = inv.apply(q).unwrap();
                    assert!(back.distance(&p) < 1e-6, "{p:?} -> {back:?}");
                }
            }
        }
    }

    #[test]
    fn pair_relation_is_associative() {
        let mut rng = stream(4, "test");
        let ranges = HomographySampleRanges::default();
        let center = Point::new(128.0, 128.0);
        for _ in 0..200 {
            let g = sample_homography(&ranges, center, &mut rng).unwrap();
            let gp = sample_homography(&ranges, center, &mut rng).unwrap();
            let h = compose_pair(&gp, &g).unwrap();
            let p = Point::new(rng.random_range(0.0..256.0), rng.random_range(0.0..256.0));
            let lhs = h.apply(g.apply(p).unwrap()).unwrap();
            let rhs = gp.apply(p).unwrap();
            assert!(lhs.distance(&rhs) < 1e-6);
        }
    }

    #[test]
    fn identity_ranges_sample_identity() {
        let mut rng = stream(5, "test");
        let h = sample_homography(&HomographySampleRanges::identity(), Point::new(10.0, 20.0), &mut rng).unwrap();
        assert_close(&h, &Homography::identity(), 1e-15);
    }

    #[test]
    fn rotation_only_fixes_center() {
        let ranges = HomographySampleRanges {
            rot_max_deg: 25.0,
            ..HomographySampleRanges::identity()
        };
        let center = Point::new(64.0, 48.0);
        let mut rng = stream(6, "test");
        for _ in 0..50 {
            let (h, f) = sample_homography_with_factors(&ranges, center, &mut rng).unwrap();
            let c = h.apply(center).unwrap();
            assert!(c.distance(&center) < 1e-9);
            let m = h.matrix();
            let (s, co) = f.rotation_deg.to_radians().sin_cos();
            assert!((m[(0, 0)] - co).abs() < 1e-12 && (m[(1, 0)] - s).abs() < 1e-12);
            let d = failure_decompose(&h);
            assert!(!d.flip && (d.scale - 1.0).abs() < 1e-12);
        }
        // the extreme angle itself
        let f = SampledFactors {
            rotation_deg: 25.0,
            scale: 1.0,
            shear_x: 0.0,
            shear_y: 0.0,
            persp_x: 0.0,
            persp_y: 0.0,
            trans_x: 0.0,
            trans_y: 0.0,
        };
        let h = f.compose(center).unwrap();
        assert!(h.apply(center).unwrap().distance(&center) < 1e-12);
        let m = h.matrix();
        assert!((m[(1, 0)].atan2(m[(0, 0)]).to_degrees() - 25.0).abs() < 1e-12);
    }

    #[test]
    fn default_ranges_respected_over_many_samples() {
        let ranges = HomographySampleRanges::default();
        let center = Point::new(256.0, 256.0);
        let mut rng = stream(7, "test");
        for _ in 0..10_000 {
            let (h, f) = sample_homography_with_factors(&ranges, center, &mut rng).unwrap();
            assert!(f.rotation_deg.abs() <= 25.0);
            assert!((0.7..=1.3).contains(&f.scale));
            assert!((-0.2..=0.2).contains(&f.shear_x) && (-0.2..=0.2).contains(&f.shear_y));
            assert!((1e-6..=8e-4).contains(&f.persp_x.abs()) && (1e-6..=8e-4).contains(&f.persp_y.abs()));
            assert!(f.trans_x.abs() <= 100.0 && f.trans_y.abs() <= 100.0);
            assert_eq!(f.compose(center).unwrap(), h);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let ranges = HomographySampleRanges::default();
        let a = sample_homography(&ranges, Point::new(1.0, 1.0), &mut stream(9, "x")).unwrap();
        let b = sample_homography(&ranges, Point::new(1.0, 1.0), &mut stream(9, "x")).unwrap();
        assert_eq!(a.rows().map(|r| r.map(f64::to_bits)), b.rows().map(|r| r.map(f64::to_bits)));
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = HomographySampleRanges {
            scale_min: 0.0,
            ..HomographySampleRanges::default()
        };
        assert!(bad.validate().is_err());
        let bad = HomographySampleRanges {
            rot_max_deg: 90.0,
            ..HomographySampleRanges::default()
        };
        assert!(bad.validate().is_err());
        let bad = HomographySampleRanges {
            shear_min: 0.3,
            ..HomographySampleRanges::default()
        };
        assert!(bad.validate().is_err());
    }

    fn ramp(w: usize, h: usize) -> GrayImage {
        let mut img = GrayImage::new(w, h).unwrap();
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, x as f64 / (w - 1) as f64);
            }
        }
        img
    }

    #[test]
    fn warp_identity_is_exact() {
        let mut img = ramp(17, 9);
        img.set(3, 4, 0.123);
        let out = warp_image(&img, &Homography::identity(), 17, 9).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn warp_integer_translation_shifts() {
        let mut img = GrayImage::new(10, 6).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                img.set(x, y, ((x * 7 + y * 3) % 11) as f64 / 10.0);
            }
        }
        let out = warp_image(&img, &Homography::translation(3.0, 0.0), 10, 6).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                let expected = if x < 3 { 0.0 } else { img.get(x - 3, y) };
                assert_eq!(out.get(x, y), expected);
            }
        }
    }

    #[test]
    fn warp_half_scale_of_ramp_matches_closed_form() {
        let w = 40;
        let img = ramp(w, 5);
        let h = Homography::scaling(0.5, 0.5).unwrap();
        let out = warp_image(&img, &h, 30, 3).unwrap();
        for y in 0..3 {
            for x in 0..30 {
                let sx = 2.0 * x as f64;
                let expected = if sx <= (w - 1) as f64 { sx / (w - 1) as f64 } else { 0.0 };
                assert!((out.get(x, y) - expected).abs() < 1e-12, "{x},{y}");
            }
        }
    }

    #[test]
    fn warp_there_and_back_preserves_interior() {
        let mut img = GrayImage::new(64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = 0.5 + 0.25 * (x as f64 * 0.3).sin() + 0.2 * (y as f64 * 0.2).cos();
                img.set(x, y, v);
            }
        }
        let ranges = HomographySampleRanges {
            scale_min: 0.95,
            scale_max: 1.05,
            persp_min: 0.0,
            persp_max: 1e-4,
            trans_max_x: 2.0,
            trans_max_y: 2.0,
            shear_min: -0.02,
            shear_max: 0.02,
            rot_max_deg: 5.0,
        };
        let mut rng = stream(8, "test");
        for _ in 0..10 {
            let h = sample_homography(&ranges, Point::new(32.0, 32.0), &mut rng).unwrap();
            let fwd = warp_image(&img, &h, 64, 64).unwrap();
            let back = warp_image(&fwd, &h.inverse().unwrap(), 64, 64).unwrap();
            // interior pixels whose round trip stays well inside both frames
            let mut sum = 0.0;
            let mut n = 0;
            for y in 5..59 {
                for x in 5..59 {
                    let q = h.apply(Point::new(x as f64, y as f64)).unwrap();
                    if q.x < 5.0 || q.y < 5.0 || q.x > 58.0 || q.y > 58.0 {
                        continue;
                    }
                    sum += (back.get(x, y) - img.get(x, y)).abs();
                    n += 1;
                }
            }
            assert!(n > 1000);
            assert!(sum / n as f64 <= 0.02, "mae {}", sum / n as f64);
        }
    }

    #[test]
    fn failure_decompose_examples() {
        assert_eq!(
            failure_decompose(&Homography::identity()),
            FailureDecomposition { flip: false, scale: 1.0 }
        );
        let d = failure_decompose(&Homography::scaling(5.0, 5.0).unwrap());
        assert!(!d.flip && (d.scale - 5.0).abs() < 1e-12);
        let d = failure_decompose(&Homography::scaling(-1.0, 1.0).unwrap());
        assert!(d.flip && (d.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_format_round_trips() {
        let h = Homography::from_rows([[1.1, 1e-3, -3.5], [0.2, 0.95, 12.0], [1e-5, -2e-6, 1.0]]).unwrap();
        let parsed = parse_homography(&format_homography(&h)).unwrap();
        assert_eq!(parsed, h);
        let parsed = parse_homography("1 0 2.5e0\n0 1 -1E1 0 0 1").unwrap();
        assert_eq!(parsed, Homography::translation(2.5, -10.0));
        assert!(matches!(parse_homography("1 2 3"), Err(Error::Parse { .. })));
        match parse_homography("1 0 0 0 1 0 0 x 1") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("{other:?}"),
        }
    }
}
