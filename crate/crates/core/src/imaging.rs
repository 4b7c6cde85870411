//! Image containers, PNM I/O, appearance augmentation and test-time
//! pre-processing.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image with pixels in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("image must be at least 1x1, got {width}x{height}")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        let mut img = Self::new(width, height)?;
        img.pixels.fill(value.clamp(0.0, 1.0));
        Ok(img)
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{} pixels do not fit a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(x, y).clamp(0.0, 1.0);
            }
        }
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Pixel at integer coordinates with replicated borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "pixel {v} outside [0, 1]");
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integers).
    /// `None` outside `[0, w-1] × [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        const TOL: f64 = 1e-9;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= -TOL && y >= -TOL && x <= max_x + TOL && y <= max_y + TOL) {
            return None;
        }
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v = self.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + self.get(x1, y0) * fx * (1.0 - fy)
            + self.get(x0, y1) * (1.0 - fx) * fy
            + self.get(x1, y1) * fx * fy;
        Some(v.clamp(0.0, 1.0))
    }

    /// Bilinear sample with replicated borders; always defined.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        self.sample_bilinear(x, y).unwrap_or(0.0)
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<GrayImage> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::dim(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            pixels.extend_from_slice(&self.pixels[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            pixels,
        })
    }

    fn map_clamped(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.pixels {
            *v = f(*v).clamp(0.0, 1.0);
        }
    }
}

/// Three interleaved channels, each in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn from_interleaved(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::dim(format!(
                "{} samples do not fit a {width}x{height} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("RGB sample outside [0, 1]"));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
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

    pub fn channel(&self, c: usize) -> GrayImage {
        assert!(c < 3);
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn green(&self) -> GrayImage {
        self.channel(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Image {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl Image {
    /// Grayscale view; RGB inputs contribute their green channel.
    pub fn into_gray(self) -> GrayImage {
        match self {
            Image::Gray(g) => g,
            Image::Rgb(c) => c.green(),
        }
    }
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

fn skip_ws_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => pos += 1,
            _ => break,
        }
    }
    pos
}

fn read_uint(bytes: &[u8], pos: usize) -> Result<(usize, usize)> {
    let start = skip_ws_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, "expected unsigned integer"));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let v = text
        .parse::<usize>()
        .map_err(|e| parse_err(start, format!("bad integer: {e}")))?;
    Ok((v, end))
}

fn parse_header(bytes: &[u8]) -> Result<PnmHeader> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'5' | b'6') {
        return Err(parse_err(0, "expected magic P2, P5 or P6"));
    }
    let (width, pos) = read_uint(bytes, 2)?;
    let (height, pos) = read_uint(bytes, pos)?;
    let (maxval, pos) = read_uint(bytes, pos)?;
    if width == 0 || height == 0 {
        return Err(parse_err(2, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let data_start = if bytes[1] == b'2' {
        pos
    } else {
        // exactly one whitespace byte separates the header from binary data
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos + 1,
            _ => return Err(parse_err(pos, "expected whitespace after maxval")),
        }
    };
    Ok(PnmHeader {
        magic: [bytes[0], bytes[1]],
        width,
        height,
        data_start,
    })
}

/// Decodes a PGM (P2/P5) or PPM (P6) byte buffer with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let hdr = parse_header(bytes)?;
    let n = hdr.width * hdr.height;
    match hdr.magic[1] {
        b'5' | b'6' => {
            let channels = if hdr.magic[1] == b'5' { 1 } else { 3 };
            let end = hdr.data_start + n * channels;
            if bytes.len() < end {
                return Err(parse_err(
                    bytes.len(),
                    format!("truncated pixel data: need {} bytes", n * channels),
                ));
            }
            let data: Vec<f64> = bytes[hdr.data_start..end].iter().map(|&b| b as f64 / 255.0).collect();
            if channels == 1 {
                Ok(Image::Gray(GrayImage {
                    width: hdr.width,
                    height: hdr.height,
                    pixels: data,
                }))
            } else {
                Ok(Image::Rgb(RgbImage {
                    width: hdr.width,
                    height: hdr.height,
                    data,
                }))
            }
        }
        _ => {
            let mut pixels = Vec::with_capacity(n);
            let mut pos = hdr.data_start;
            for _ in 0..n {
                let (v, next) = read_uint(bytes, pos)?;
                if v > 255 {
                    return Err(parse_err(pos, format!("sample {v} exceeds maxval")));
                }
                pixels.push(v as f64 / 255.0);
                pos = next;
            }
            Ok(Image::Gray(GrayImage {
                width: hdr.width,
                height: hdr.height,
                pixels,
            }))
        }
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes as binary PGM (P5).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| quantize(v)));
    out
}

/// Encodes as ASCII PGM (P2).
pub fn encode_pgm_ascii(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
    for row in img.pixels.chunks(img.width) {
        let line: Vec<String> = row.iter().map(|&v| quantize(v).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

/// Encodes as binary PPM (P6).
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

fn has_png_ext(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if has_png_ext(path) {
        return decode_png(&bytes);
    }
    decode_pnm(&bytes)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    load_image(path).map(Image::into_gray)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let bytes = match img {
        Image::Gray(g) if has_png_ext(path) => encode_png_gray(g)?,
        Image::Gray(g) => encode_pgm(g),
        Image::Rgb(c) => encode_ppm(c),
    };
    crate::io_util::write_atomic(path, &bytes)
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let bytes = if has_png_ext(path) {
        encode_png_gray(img)?
    } else {
        encode_pgm(img)
    };
    crate::io_util::write_atomic(path, &bytes)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    match dynimg {
        image::DynamicImage::ImageLuma8(g) => Ok(Image::Gray(GrayImage {
            width: g.width() as usize,
            height: g.height() as usize,
            pixels: g.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        })),
        other => {
            let rgb = other.to_rgb8();
            Ok(Image::Rgb(RgbImage {
                width: rgb.width() as usize,
                height: rgb.height() as usize,
                data: rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
            }))
        }
    }
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8]) -> Result<Image> {
    Err(Error::Format("PNG support not enabled in this build".into()))
}

#[cfg(feature = "png")]
fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let raw: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, raw)
        .ok_or_else(|| Error::dim("png buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(out.into_inner())
}

#[cfg(not(feature = "png"))]
fn encode_png_gray(_img: &GrayImage) -> Result<Vec<u8>> {
    Err(Error::Format("PNG support not enabled in this build".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

/// Appearance augmentation settings. Each enabled transform is applied
/// with probability `select_prob`; inversion has its own probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub select_prob: f64,
    pub noise: bool,
    pub noise_sigma: Range,
    pub contrast: bool,
    pub contrast_gain: Range,
    pub illumination: bool,
    pub illumination_offset: Range,
    pub gamma: bool,
    pub gamma_exponent: Range,
    pub motion_blur: bool,
    /// Odd kernel lengths in pixels, drawn uniformly.
    pub blur_lengths: Vec<usize>,
    /// Blur direction in degrees, drawn uniformly.
    pub blur_angle_deg: Range,
    pub invert_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            select_prob: 0.5,
            noise: true,
            noise_sigma: Range::new(0.0, 0.06),
            contrast: true,
            contrast_gain: Range::new(0.5, 1.5),
            illumination: true,
            illumination_offset: Range::new(-0.25, 0.25),
            gamma: true,
            gamma_exponent: Range::new(0.5, 1.8),
            motion_blur: true,
            blur_lengths: vec![3, 5, 7, 9],
            blur_angle_deg: Range::new(0.0, 180.0),
            invert_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        AugmentationConfig {
            noise: false,
            contrast: false,
            illumination: false,
            gamma: false,
            motion_blur: false,
            invert_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.select_prob) || !prob(self.invert_prob) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        for (name, r) in [
            ("noise_sigma", self.noise_sigma),
            ("contrast_gain", self.contrast_gain),
            ("illumination_offset", self.illumination_offset),
            ("gamma_exponent", self.gamma_exponent),
            ("blur_angle_deg", self.blur_angle_deg),
        ] {
            if !(r.min.is_finite() && r.max.is_finite() && r.min <= r.max) {
                return Err(Error::invalid(format!("{name}: need finite min <= max")));
            }
        }
        if self.noise_sigma.min < 0.0 {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if self.gamma_exponent.min <= 0.0 {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if self.motion_blur && self.blur_lengths.is_empty() {
            return Err(Error::invalid("motion blur needs at least one kernel length"));
        }
        if self.blur_lengths.iter().any(|&l| l == 0 || l % 2 == 0) {
            return Err(Error::invalid("blur kernel lengths must be odd and >= 1"));
        }
        Ok(())
    }
}

fn motion_blur(img: &GrayImage, length: usize, angle_deg: f64) -> GrayImage {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let half = (length / 2) as isize;
    let norm = 1.0 / length as f64;
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let mut acc = 0.0;
            for k in -half..=half {
                let k = k as f64;
                acc += img.sample_clamped(x as f64 + k * c, y as f64 + k * s);
            }
            out.pixels[y * img.width + x] = (acc * norm).clamp(0.0, 1.0);
        }
    }
    out
}

/// Applies a random subset of the configured appearance transforms, in the
/// order noise, contrast, illumination, gamma, blur, invert.
pub fn augment<R: Rng + ?Sized>(img: &GrayImage, cfg: &AugmentationConfig, rng: &mut R) -> Result<GrayImage> {
    cfg.validate()?;
    let mut out = img.clone();
    let pick = |enabled: bool, rng: &mut R| enabled && rng.random_bool(cfg.select_prob);

    if pick(cfg.noise, rng) {
        let sigma = cfg.noise_sigma.draw(rng);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            for v in &mut out.pixels {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    if pick(cfg.contrast, rng) {
        let gain = cfg.contrast_gain.draw(rng);
        out.map_clamped(|v| (v - 0.5) * gain + 0.5);
    }
    if pick(cfg.illumination, rng) {
        let offset = cfg.illumination_offset.draw(rng);
        out.map_clamped(|v| v + offset);
    }
    if pick(cfg.gamma, rng) {
        let g = cfg.gamma_exponent.draw(rng);
        out.map_clamped(|v| v.powf(g));
    }
    if pick(cfg.motion_blur, rng) {
        let length = cfg.blur_lengths[rng.random_range(0..cfg.blur_lengths.len())];
        let angle = cfg.blur_angle_deg.draw(rng);
        out = motion_blur(&out, length, angle);
    }
    if cfg.invert_prob > 0.0 && rng.random_bool(cfg.invert_prob) {
        out.map_clamped(|v| 1.0 - v);
    }
    Ok(out)
}

/// Contrast-limited adaptive histogram equalization on 8-bit levels.
///
/// Each tile's histogram is clipped at `clip_limit · tile_pixels / 256`
/// counts (at least 1); the excess is spread evenly over all 256 levels.
/// The tile mapping sends the lowest level to 0 and the highest to 1.
/// Per-pixel results are bilinearly blended between the four nearest tile
/// centers.
pub fn clahe(img: &GrayImage, grid_x: usize, grid_y: usize, clip_limit: f64) -> GrayImage {
    let gx = grid_x.clamp(1, img.width);
    let gy = grid_y.clamp(1, img.height);
    let bounds = |i: usize, n: usize, len: usize| (i * len / n, (i + 1) * len / n);
    let levels: Vec<usize> = img.pixels.iter().map(|&v| quantize(v) as usize).collect();

    let mut luts = vec![[0.0f64; 256]; gx * gy];
    for ty in 0..gy {
        let (y0, y1) = bounds(ty, gy, img.height);
        for tx in 0..gx {
            let (x0, x1) = bounds(tx, gx, img.width);
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[levels[y * img.width + x]] += 1.0;
                }
            }
            let npix = ((x1 - x0) * (y1 - y0)) as f64;
            let clip = (clip_limit * npix / 256.0).max(1.0);
            let mut excess = 0.0;
            for h in &mut hist {
                if *h > clip {
                    excess += *h - clip;
                    *h = clip;
                }
            }
            let spread = excess / 256.0;
            let lut = &mut luts[ty * gx + tx];
            let mut cdf = 0.0;
            let mut cdf0 = 0.0;
            for (level, h) in hist.iter().enumerate() {
                cdf += h + spread;
                if level == 0 {
                    cdf0 = cdf;
                }
                let denom = npix - cdf0;
                lut[level] = if denom > 1e-12 {
                    ((cdf - cdf0) / denom).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
    }

    let centers = |n: usize, len: usize| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let (a, b) = bounds(i, n, len);
                (a + b - 1) as f64 / 2.0
            })
            .collect()
    };
    let cx = centers(gx, img.width);
    let cy = centers(gy, img.height);
    let bracket = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        if p >= c[c.len() - 1] {
            let last = c.len() - 1;
            return (last, last, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };

    let mut out = img.clone();
    for y in 0..img.height {
        let (ty0, ty1, fy) = bracket(&cy, y as f64);
        for x in 0..img.width {
            let (tx0, tx1, fx) = bracket(&cx, x as f64);
            let l = levels[y * img.width + x];
            let v = luts[ty0 * gx + tx0][l] * (1.0 - fx) * (1.0 - fy)
                + luts[ty0 * gx + tx1][l] * fx * (1.0 - fy)
                + luts[ty1 * gx + tx0][l] * (1.0 - fx) * fy
                + luts[ty1 * gx + tx1][l] * fx * fy;
            out.pixels[y * img.width + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Edge-preserving smoothing over a square window of the given radius.
pub fn bilateral(img: &GrayImage, sigma_space: f64, sigma_range: f64, radius: usize) -> GrayImage {
    let r = radius as isize;
    let spatial: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .map(|(dx, dy)| (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_space * sigma_space)).exp())
        .collect();
    let inv_range = 1.0 / (2.0 * sigma_range * sigma_range);
    let side = (2 * r + 1) as usize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let center = img.pixels[(y * w + x) as usize];
            let mut num = 0.0;
            let mut den = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w {
                        continue;
                    }
                    let v = img.pixels[(yy * w + xx) as usize];
                    let d = v - center;
                    let wgt = spatial[((dy + r) as usize) * side + (dx + r) as usize] * (-d * d * inv_range).exp();
                    num += wgt * v;
                    den += wgt;
                }
            }
            out.pixels[(y * w + x) as usize] = (num / den).clamp(0.0, 1.0);
        }
    }
    out
}

pub const CLAHE_GRID: usize = 8;
pub const CLAHE_CLIP_LIMIT: f64 = 2.0;
pub const BILATERAL_SIGMA_SPACE: f64 = 5.0;
pub const BILATERAL_SIGMA_RANGE: f64 = 0.1;
pub const BILATERAL_RADIUS: usize = 7;

/// Green channel, then CLAHE, then bilateral filtering.
pub fn preprocess(img: &RgbImage) -> GrayImage {
    enhance(&img.green())
}

/// CLAHE followed by the bilateral filter, with the default settings.
pub fn enhance(img: &GrayImage) -> GrayImage {
    let eq = clahe(img, CLAHE_GRID, CLAHE_GRID, CLAHE_CLIP_LIMIT);
    bilateral(&eq, BILATERAL_SIGMA_SPACE, BILATERAL_SIGMA_RANGE, BILATERAL_RADIUS)
}

/// Square crop at a uniformly random valid offset; returns the offset `(x, y)`.
pub fn random_crop<R: Rng + ?Sized>(img: &GrayImage, size: usize, rng: &mut R) -> Result<(GrayImage, (usize, usize))> {
    if size == 0 || size > img.width.min(img.height) {
        return Err(Error::invalid(format!(
            "crop size {size} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    let ox = rng.random_range(0..=img.width - size);
    let oy = rng.random_range(0..=img.height - size);
    Ok((img.crop(ox, oy, size, size)?, (ox, oy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use proptest::prelude::*;

    #[test]
    fn p5_decodes_to_unit_range() {
        let bytes = b"P5\n2 1\n255\n\x00\xff";
        let img = decode_pnm(bytes).unwrap().into_gray();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
    }

    #[test]
    fn p5_round_trip_is_byte_identical() {
        let mut bytes = b"P5\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 17, 128, 200, 254, 255]);
        let img = decode_pnm(&bytes).unwrap().into_gray();
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn p2_with_comments_equals_p5() {
        let img = GrayImage::from_fn(5, 3, |x, y| ((x * 40 + y * 70) % 256) as f64 / 255.0).unwrap();
        let p5 = decode_pnm(&encode_pgm(&img)).unwrap();
        let ascii = String::from_utf8(encode_pgm_ascii(&img)).unwrap();
        let commented = ascii
            .replacen("P2\n", "P2\n# made by hand\n", 1)
            .replacen("\n255\n", "\n# maxval follows\n255 # trailing\n", 1);
        let p2 = decode_pnm(commented.as_bytes()).unwrap();
        assert_eq!(p2, p5);
    }

    #[test]
    fn header_errors() {
        match decode_pnm(b"P5\n2 x\n255\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_pnm(b"P5\n2 1\n65535\n\x00\x00\x00\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pnm(b"P5\n2 2\n255\n\x00"), Err(Error::Parse { .. })));
        assert!(matches!(decode_pnm(b"GIF89a"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn p6_decodes_channels() {
        let bytes = b"P6\n1 2\n255\n\xff\x00\x00\x00\xff\x00";
        match decode_pnm(bytes).unwrap() {
            Image::Rgb(c) => {
                assert_eq!(c.channel(0).pixels(), &[1.0, 0.0]);
                assert_eq!(c.green().pixels(), &[0.0, 1.0]);
                assert_eq!(encode_ppm(&c), bytes.to_vec());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn augment_disabled_is_identity() {
        let img = GrayImage::from_fn(8, 8, |x, y| (x + y) as f64 / 14.0).unwrap();
        let out = augment(&img, &AugmentationConfig::none(), &mut stream(0, "t")).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn augment_invert_constant() {
        let img = GrayImage::filled(4, 4, 0.25).unwrap();
        let cfg = AugmentationConfig {
            invert_prob: 1.0,
            ..AugmentationConfig::none()
        };
        let out = augment(&img, &cfg, &mut stream(0, "t")).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn augment_gamma_squares() {
        let img = GrayImage::from_pixels(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let cfg = AugmentationConfig {
            select_prob: 1.0,
            gamma: true,
            gamma_exponent: Range::new(2.0, 2.0),
            ..AugmentationConfig::none()
        };
        let out = augment(&img, &cfg, &mut stream(0, "t")).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn augment_contrast_and_illumination_formulas() {
        let img = GrayImage::from_pixels(3, 1, vec![0.25, 0.5, 0.75]).unwrap();
        let cfg = AugmentationConfig {
            select_prob: 1.0,
            contrast: true,
            contrast_gain: Range::new(2.0, 2.0),
            ..AugmentationConfig::none()
        };
        let out = augment(&img, &cfg, &mut stream(0, "t")).unwrap();
        assert_eq!(out.pixels(), &[0.0, 0.5, 1.0]);
        let cfg = AugmentationConfig {
            select_prob: 1.0,
            illumination: true,
            illumination_offset: Range::new(0.125, 0.125),
            ..AugmentationConfig::none()
        };
        let out = augment(&img, &cfg, &mut stream(0, "t")).unwrap();
        assert_eq!(out.pixels(), &[0.375, 0.625, 0.875]);
    }

    #[test]
    fn motion_blur_preserves_constant_and_averages_along_direction() {
        let img = GrayImage::filled(9, 9, 0.4).unwrap();
        let out = motion_blur(&img, 5, 33.0);
        assert!(out.pixels().iter().all(|v| (v - 0.4).abs() < 1e-12));
        // horizontal blur of a single bright column spreads over 3 columns
        let img = GrayImage::from_fn(9, 3, |x, _| if x == 4 { 0.9 } else { 0.0 }).unwrap();
        let out = motion_blur(&img, 3, 0.0);
        for x in 0..9 {
            let expected = if (3..=5).contains(&x) { 0.3 } else { 0.0 };
            assert!((out.get(x, 1) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let img = GrayImage::from_fn(16, 16, |x, y| ((x * 13 + y * 7) % 17) as f64 / 16.0).unwrap();
        let cfg = AugmentationConfig::default();
        for seed in 0..10 {
            let a = augment(&img, &cfg, &mut stream(seed, "aug")).unwrap();
            let b = augment(&img, &cfg, &mut stream(seed, "aug")).unwrap();
            assert_eq!(encode_pgm(&a), encode_pgm(&b));
        }
    }

    #[test]
    fn augment_config_validation() {
        let cfg = AugmentationConfig {
            blur_lengths: vec![4],
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            gamma_exponent: Range::new(0.0, 1.0),
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn augment_stays_in_unit_range(
            seed in any::<u64>(),
            sigma in 0.0f64..2.0,
            gain in 0.0f64..10.0,
            offset in -2.0f64..2.0,
            gamma in 0.05f64..8.0,
        ) {
            let img = GrayImage::from_fn(12, 10, |x, y| ((x * 31 + y * 17) % 23) as f64 / 22.0).unwrap();
            let cfg = AugmentationConfig {
                select_prob: 1.0,
                noise_sigma: Range::new(sigma, sigma),
                contrast_gain: Range::new(gain, gain),
                illumination_offset: Range::new(offset, offset),
                gamma_exponent: Range::new(gamma, gamma),
                invert_prob: 0.5,
                ..AugmentationConfig::default()
            };
            let out = augment(&img, &cfg, &mut stream(seed, "p")).unwrap();
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn preprocess_stays_in_unit_range(seed in any::<u64>()) {
            let mut rng = stream(seed, "pp");
            let data: Vec<f64> = (0..3 * 20 * 18).map(|_| if rng.random_bool(0.3) { rng.random_range(0..2) as f64 } else { rng.random() }).collect();
            let img = RgbImage::from_interleaved(20, 18, data).unwrap();
            let out = preprocess(&img);
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn preprocess_constant_green_is_constant() {
        let data: Vec<f64> = (0..24 * 16).flat_map(|_| [0.9, 0.6, 0.1]).collect();
        let out = preprocess(&RgbImage::from_interleaved(24, 16, data).unwrap());
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn preprocess_pure_red_is_black() {
        let data: Vec<f64> = (0..24 * 16).flat_map(|_| [1.0, 0.0, 0.0]).collect();
        let out = preprocess(&RgbImage::from_interleaved(24, 16, data).unwrap());
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    /// Independent small-instance reference: per-tile equalization built by
    /// counting levels below each value, blended between tile centers.
    fn clahe_oracle(img: &GrayImage, gx: usize, gy: usize, clip_limit: f64) -> Vec<f64> {
        let (w, h) = (img.width(), img.height());
        let level = |x: usize, y: usize| (img.get(x, y) * 255.0).round() as usize;
        let tile_w = w / gx;
        let tile_h = h / gy;
        let mut maps = Vec::new();
        for ty in 0..gy {
            for tx in 0..gx {
                let mut counts = vec![0.0; 256];
                for y in ty * tile_h..(ty + 1) * tile_h {
                    for x in tx * tile_w..(tx + 1) * tile_w {
                        counts[level(x, y)] += 1.0;
                    }
                }
                let n = (tile_w * tile_h) as f64;
                let limit = f64::max(1.0, clip_limit * n / 256.0);
                let clipped: f64 = counts.iter().map(|&c: &f64| (c - limit).max(0.0)).sum();
                let adj: Vec<f64> = counts.iter().map(|&c: &f64| c.min(limit) + clipped / 256.0).collect();
                let map: Vec<f64> = (0..256)
                    .map(|v| {
                        let below: f64 = adj[1..=v].iter().sum();
                        let above_zero: f64 = adj[1..].iter().sum();
                        if above_zero > 1e-12 { below / above_zero } else { 0.0 }
                    })
                    .collect();
                maps.push(map);
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                // tile centers at (i + 0.5)·tile - 0.5
                let fx = ((x as f64 + 0.5) / tile_w as f64 - 0.5).clamp(0.0, (gx - 1) as f64);
                let fy = ((y as f64 + 0.5) / tile_h as f64 - 0.5).clamp(0.0, (gy - 1) as f64);
                let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
                let (i1, j1) = ((i0 + 1).min(gx - 1), (j0 + 1).min(gy - 1));
                let (ax, ay) = (fx - i0 as f64, fy - j0 as f64);
                let l = level(x, y);
                let m = |i: usize, j: usize| maps[j * gx + i][l];
                out[y * w + x] = m(i0, j0) * (1.0 - ax) * (1.0 - ay)
                    + m(i1, j0) * ax * (1.0 - ay)
                    + m(i0, j1) * (1.0 - ax) * ay
                    + m(i1, j1) * ax * ay;
            }
        }
        out
    }

    #[test]
    fn clahe_two_tiles_matches_oracle() {
        // left tile: dark gradient; right tile: two bright levels
        let img = GrayImage::from_fn(16, 8, |x, y| {
            if x < 8 {
                ((x + 8 * y) * 2) as f64 / 255.0
            } else if (x + y) % 2 == 0 {
                200.0 / 255.0
            } else {
                230.0 / 255.0
            }
        })
        .unwrap();
        for clip in [1.0, 2.0, 40.0] {
            let got = clahe(&img, 2, 1, clip);
            let expected = clahe_oracle(&img, 2, 1, clip);
            for (g, e) in got.pixels().iter().zip(&expected) {
                assert!((g - e).abs() < 1e-12, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn bilateral_on_constant_is_identity() {
        let img = GrayImage::filled(10, 10, 0.37).unwrap();
        let out = bilateral(&img, 5.0, 0.1, 7);
        assert!(out.pixels().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn crop_full_and_single_pixel() {
        let img = GrayImage::from_fn(6, 5, |x, y| (x + 6 * y) as f64 / 29.0).unwrap();
        let (c, off) = random_crop(&img, 5, &mut stream(3, "c")).unwrap();
        assert_eq!(c.width(), 5);
        assert!(off.1 == 0);
        let sq = GrayImage::from_fn(5, 5, |x, y| (x + 5 * y) as f64 / 24.0).unwrap();
        let (c, off) = random_crop(&sq, 5, &mut stream(3, "c")).unwrap();
        assert_eq!((c, off), (sq.clone(), (0, 0)));

        let mut rng = stream(11, "c");
        let (c, (ox, oy)) = random_crop(&sq, 1, &mut rng).unwrap();
        assert_eq!(c.pixels(), &[(ox + 5 * oy) as f64 / 24.0]);
        assert!(random_crop(&sq, 6, &mut rng).is_err());
    }

    #[test]
    fn crop_offsets_are_uniform() {
        let img = GrayImage::new(4, 4).unwrap();
        let mut rng = stream(12, "c");
        let mut counts = [[0usize; 3]; 3];
        let n = 10_000;
        for _ in 0..n {
            let (_, (x, y)) = random_crop(&img, 2, &mut rng).unwrap();
            counts[y][x] += 1;
        }
        let p = 1.0 / 9.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for row in counts {
            for c in row {
                assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
            }
        }
    }
}
