//! Image augmentations over small RGB rasters: random affine, perspective
//! warps, histogram equalization, and color jitter with a deliberately small
//! hue range. All sampling is driven by an explicit RNG stream so a (seed,
//! index) pair fully determines the output. Augmentation applies to training
//! batches only; evaluation reads raw pixels.

use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid ppm: {0}")]
    BadPpm(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
}

/// 8-bit RGB raster, row-major, `pixels.len() == width * height * 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, AugmentError> {
        if pixels.len() != width * height * 3 {
            return Err(AugmentError::Decode(format!(
                "pixel buffer {} does not match {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        RasterImage {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixels as reals in [0,1], H×W×3 row-major (the encoder boundary).
    pub fn to_unit_reals(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

// ── PPM (P6) and general decode ─────────────────────────────────────────

pub fn read_ppm(bytes: &[u8]) -> Result<RasterImage, AugmentError> {
    let mut fields = Vec::new();
    let mut pos = 0;
    // header: magic, width, height, maxval — whitespace separated, # comments
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(AugmentError::BadPpm("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            AugmentError::BadPpm("non-utf8 header".into())
        })?);
    }
    if fields[0] != "P6" {
        return Err(AugmentError::BadPpm(format!("magic {} (want P6)", fields[0])));
    }
    let width: usize = fields[1]
        .parse()
        .map_err(|_| AugmentError::BadPpm("bad width".into()))?;
    let height: usize = fields[2]
        .parse()
        .map_err(|_| AugmentError::BadPpm("bad height".into()))?;
    let maxval: usize = fields[3]
        .parse()
        .map_err(|_| AugmentError::BadPpm("bad maxval".into()))?;
    if maxval != 255 {
        return Err(AugmentError::BadPpm(format!("maxval {maxval} (want 255)")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(AugmentError::BadPpm("truncated pixel data".into()));
    }
    RasterImage::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn write_ppm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Decode PPM (required) or PNG/JPEG (optional formats) from raw bytes.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage, AugmentError> {
    if bytes.starts_with(b"P6") {
        return read_ppm(bytes);
    }
    let decoded = image::load_from_memory(bytes)
        .map_err(|e| AugmentError::Decode(e.to_string()))?
        .to_rgb8();
    RasterImage::new(
        decoded.width() as usize,
        decoded.height() as usize,
        decoded.into_raw(),
    )
}

pub fn load_image(path: &Path) -> Result<RasterImage, AugmentError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_image(&bytes)
}

pub fn save_ppm(path: &Path, img: &RasterImage) -> Result<(), AugmentError> {
    std::fs::write(path, write_ppm(img))?;
    Ok(())
}

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation sampled in ±degrees.
    pub rotation_deg: f64,
    /// Translation sampled in ±(fraction of width/height).
    pub translate_frac: f64,
    /// Isotropic scale sampled in [lo, hi].
    pub scale_range: (f64, f64),
    /// X-shear sampled in ±degrees.
    pub shear_deg: f64,
    /// Perspective corner displacement bound, as a fraction of min(H, W).
    pub perspective_distortion: f64,
    pub perspective_prob: f64,
    pub equalize_prob: f64,
    /// Brightness/contrast/saturation factors sampled in 1 ± range.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue offset sampled in ±(fraction of the hue circle). Kept small so
    /// color words stay learnable.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 10.0,
            translate_frac: 0.1,
            scale_range: (0.9, 1.1),
            shear_deg: 5.0,
            perspective_distortion: 0.1,
            perspective_prob: 0.3,
            equalize_prob: 0.1,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Config under which the pipeline is a bitwise identity.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_range: (1.0, 1.0),
            shear_deg: 0.0,
            perspective_distortion: 0.0,
            perspective_prob: 0.0,
            equalize_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, p) in [
            ("perspective_prob", self.perspective_prob),
            ("equalize_prob", self.equalize_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::InvalidConfig(format!(
                    "{name} = {p} outside [0, 1]"
                )));
            }
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("translate_frac", self.translate_frac),
            ("shear_deg", self.shear_deg),
            ("perspective_distortion", self.perspective_distortion),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(AugmentError::InvalidConfig(format!("{name} = {v} negative")));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(AugmentError::InvalidConfig(format!(
                "scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

// ── Affine ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub translate: (f64, f64),
    pub scale: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotate_deg: 0.0,
        translate: (0.0, 0.0),
        scale: 1.0,
        shear_deg: 0.0,
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

pub fn sample_affine<R: Rng>(cfg: &AugmentConfig, w: usize, h: usize, rng: &mut R) -> AffineParams {
    AffineParams {
        rotate_deg: sample_symmetric(rng, cfg.rotation_deg),
        translate: (
            sample_symmetric(rng, cfg.translate_frac * w as f64),
            sample_symmetric(rng, cfg.translate_frac * h as f64),
        ),
        scale: sample_range(rng, cfg.scale_range.0, cfg.scale_range.1),
        shear_deg: sample_symmetric(rng, cfg.shear_deg),
    }
}

fn sample_symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    sample_range(rng, -bound, bound)
}

fn sample_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        // still consume one draw so streams stay aligned across configs
        let _ = rng.gen::<f64>();
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Rotation, shear, and scale about the image center followed by a
/// translation, resampled bilinearly with black fill outside.
pub fn affine_transform(img: &RasterImage, p: &AffineParams) -> RasterImage {
    if p.is_identity() {
        return img.clone();
    }
    let theta = p.rotate_deg.to_radians();
    let shear = p.shear_deg.to_radians().tan();
    let (cos, sin) = (theta.cos(), theta.sin());
    // forward 2×2: R(θ) · Shear_x · (s·I)
    let m00 = p.scale * cos;
    let m01 = p.scale * (cos * shear - sin);
    let m10 = p.scale * sin;
    let m11 = p.scale * (sin * shear + cos);
    let det = m00 * m11 - m01 * m10;
    if det.abs() < 1e-12 {
        return img.clone();
    }
    let (i00, i01, i10, i11) = (m11 / det, -m01 / det, -m10 / det, m00 / det);
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = RasterImage::filled(img.width, img.height, [0, 0, 0]);
    for y in 0..img.height {
        for x in 0..img.width {
            let vx = x as f64 - cx - p.translate.0;
            let vy = y as f64 - cy - p.translate.1;
            let sx = i00 * vx + i01 * vy + cx;
            let sy = i10 * vx + i11 * vy + cy;
            out.set(x, y, sample_rgb(img, sx, sy));
        }
    }
    out
}

pub fn random_affine<R: Rng>(img: &RasterImage, cfg: &AugmentConfig, rng: &mut R) -> RasterImage {
    let p = sample_affine(cfg, img.width, img.height, rng);
    affine_transform(img, &p)
}

fn sample_rgb(img: &RasterImage, x: f64, y: f64) -> [u8; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut rgb = [0u8; 3];
    for c in 0..3 {
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let px = x0 as i64 + dx;
                let py = y0 as i64 + dy;
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                if px >= 0 && py >= 0 && (px as usize) < img.width && (py as usize) < img.height {
                    acc += w * img.get(px as usize, py as usize, c) as f64;
                }
                // outside: black fill contributes nothing
            }
        }
        rgb[c] = acc.round().clamp(0.0, 255.0) as u8;
    }
    rgb
}

// ── Perspective ─────────────────────────────────────────────────────────

/// Displaced positions of the corners (0,0), (W−1,0), (W−1,H−1), (0,H−1).
pub type CornerQuad = [(f64, f64); 4];

pub fn image_corners(w: usize, h: usize) -> CornerQuad {
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)]
}

pub fn sample_perspective_corners<R: Rng>(
    w: usize,
    h: usize,
    distortion: f64,
    rng: &mut R,
) -> CornerQuad {
    let bound = distortion * w.min(h) as f64;
    let base = image_corners(w, h);
    let mut out = base;
    for (o, b) in out.iter_mut().zip(base.iter()) {
        o.0 = b.0 + sample_symmetric(rng, bound);
        o.1 = b.1 + sample_symmetric(rng, bound);
    }
    out
}

/// Solve the 3×3 homography H (h33 = 1) with `H · src_i ≃ dst_i`.
/// Returns `None` when the correspondences are degenerate.
pub fn homography_from_correspondences(src: &CornerQuad, dst: &CornerQuad) -> Option<[f64; 9]> {
    // 8 unknowns h11..h32; one row pair per correspondence
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the 8×8 system (col 9 = rhs)
    for col in 0..8 {
        let (pivot_row, pivot) = (col..8)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pivot < 1e-9 {
            return None;
        }
        a.swap(col, pivot_row);
        for r in 0..8 {
            if r == col {
                continue;
            }
            let factor = a[r][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for c in col..9 {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut h = [0.0f64; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    Some(h)
}

fn apply_homography(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

/// Warp so that the image corners land on `corners`, bilinear, black fill.
pub fn perspective_transform(img: &RasterImage, corners: &CornerQuad) -> Option<RasterImage> {
    let base = image_corners(img.width, img.height);
    if corners
        .iter()
        .zip(base.iter())
        .all(|(a, b)| a.0 == b.0 && a.1 == b.1)
    {
        return Some(img.clone());
    }
    // inverse map: output pixel → source pixel
    let h_inv = homography_from_correspondences(corners, &base)?;
    let mut out = RasterImage::filled(img.width, img.height, [0, 0, 0]);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = apply_homography(&h_inv, x as f64, y as f64);
            out.set(x, y, sample_rgb(img, sx, sy));
        }
    }
    Some(out)
}

/// Sampled perspective warp; degenerate corner draws are resampled a bounded
/// number of times, then the identity is used.
pub fn random_perspective<R: Rng>(
    img: &RasterImage,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> RasterImage {
    for _ in 0..10 {
        let corners =
            sample_perspective_corners(img.width, img.height, cfg.perspective_distortion, rng);
        if let Some(warped) = perspective_transform(img, &corners) {
            return warped;
        }
    }
    img.clone()
}

// ── Equalization ────────────────────────────────────────────────────────

/// Per-channel histogram equalization by cumulative-distribution remapping.
/// Channels with a single occupied level are left unchanged.
pub fn equalize(img: &RasterImage) -> RasterImage {
    let n = (img.width * img.height) as u64;
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for i in (c..img.pixels.len()).step_by(3) {
            hist[img.pixels[i] as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut running = 0;
        for (v, count) in hist.iter().enumerate() {
            running += count;
            cdf[v] = running;
        }
        let cdf_min = hist
            .iter()
            .enumerate()
            .find(|(_, &count)| count > 0)
            .map(|(v, _)| cdf[v])
            .unwrap_or(0);
        if cdf_min == n {
            continue; // single level: degenerate histogram, identity
        }
        let denom = (n - cdf_min) as f64;
        let mut lut = [0u8; 256];
        for v in 0..256 {
            let scaled = (cdf[v].saturating_sub(cdf_min)) as f64 * 255.0 / denom;
            lut[v] = scaled.round().clamp(0.0, 255.0) as u8;
        }
        for i in (c..out.pixels.len()).step_by(3) {
            out.pixels[i] = lut[img.pixels[i] as usize];
        }
    }
    out
}

// ── Color jitter ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of the hue circle.
    pub hue_offset: f64,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_offset: 0.0,
    };
}

pub fn sample_jitter<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> JitterParams {
    JitterParams {
        brightness: 1.0 + sample_symmetric(rng, cfg.brightness),
        contrast: 1.0 + sample_symmetric(rng, cfg.contrast),
        saturation: 1.0 + sample_symmetric(rng, cfg.saturation),
        hue_offset: sample_symmetric(rng, cfg.hue),
    }
}

/// Brightness multiply, contrast blend with the channel mean, saturation
/// blend with per-pixel luma, then a hue rotation in HSV. Each stage clamps
/// to [0, 255]; identity factors skip their stage bitwise.
pub fn color_jitter_with(img: &RasterImage, p: &JitterParams) -> RasterImage {
    let mut out = img.clone();
    if p.brightness != 1.0 {
        for v in &mut out.pixels {
            *v = (*v as f64 * p.brightness).round().clamp(0.0, 255.0) as u8;
        }
    }
    if p.contrast != 1.0 {
        let count = (out.width * out.height) as f64;
        let mut means = [0.0f64; 3];
        for (i, v) in out.pixels.iter().enumerate() {
            means[i % 3] += *v as f64;
        }
        for m in &mut means {
            *m /= count;
        }
        for (i, v) in out.pixels.iter_mut().enumerate() {
            let m = means[i % 3];
            *v = (m + p.contrast * (*v as f64 - m)).round().clamp(0.0, 255.0) as u8;
        }
    }
    if p.saturation != 1.0 {
        for px in out.pixels.chunks_exact_mut(3) {
            let luma = 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64;
            for v in px.iter_mut() {
                *v = (luma + p.saturation * (*v as f64 - luma))
                    .round()
                    .clamp(0.0, 255.0) as u8;
            }
        }
    }
    if p.hue_offset != 0.0 {
        for px in out.pixels.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(
                px[0] as f64 / 255.0,
                px[1] as f64 / 255.0,
                px[2] as f64 / 255.0,
            );
            let h2 = (h + p.hue_offset * 360.0).rem_euclid(360.0);
            let (r, g, b) = hsv_to_rgb(h2, s, v);
            px[0] = (r * 255.0).round().clamp(0.0, 255.0) as u8;
            px[1] = (g * 255.0).round().clamp(0.0, 255.0) as u8;
            px[2] = (b * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

pub fn color_jitter<R: Rng>(img: &RasterImage, cfg: &AugmentConfig, rng: &mut R) -> RasterImage {
    let p = sample_jitter(cfg, rng);
    color_jitter_with(img, &p)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h {
        h if h < 60.0 => (c, x, 0.0),
        h if h < 120.0 => (x, c, 0.0),
        h if h < 180.0 => (0.0, c, x),
        h if h < 240.0 => (0.0, x, c),
        h if h < 300.0 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

// ── Pipeline ────────────────────────────────────────────────────────────

/// Derive the per-item RNG stream for (seed, index).
pub fn item_rng(seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(seed ^ splitmix(index.wrapping_add(0x9e3779b97f4a7c15))))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Composition affine → perspective → equalize → jitter, fully determined by
/// (seed, index). Geometric stages precede photometric ones so equalization
/// sees the final geometry.
pub fn augment_pipeline(img: &RasterImage, cfg: &AugmentConfig, seed: u64, index: u64) -> RasterImage {
    let mut rng = item_rng(seed, index);
    let mut out = random_affine(img, cfg, &mut rng);
    if rng.gen::<f64>() < cfg.perspective_prob {
        out = random_perspective(&out, cfg, &mut rng);
    }
    if rng.gen::<f64>() < cfg.equalize_prob {
        out = equalize(&out);
    }
    color_jitter(&out, cfg, &mut rng)
}
