//! Raster types, image I/O, convolution, crops and mask construction.
//!
//! Intensities are 32-bit floats in `[0, 1]` with veins dark (low values) on a
//! bright background. Every spatial operation uses replicate-edge borders.

use std::collections::VecDeque;
use std::fmt;
use std::io::{BufReader, Cursor};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical full-size capture width.
pub const FULL_WIDTH: usize = 320;
/// Canonical full-size capture height.
pub const FULL_HEIGHT: usize = 240;
/// Side length of partial-matching probes.
pub const PARTIAL_SIZE: usize = 128;

/// Unrestricted row-major float raster (gradients, filter responses, curvature planes).
#[derive(Clone, PartialEq)]
pub struct FloatMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl fmt::Debug for FloatMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FloatMap({}x{})", self.width, self.height)
    }
}

impl FloatMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "zero dimension {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} raster",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "zero-sized raster");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Replicate-edge lookup for signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn same_shape(&self, other: &FloatMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<FloatMap> {
        if cw == 0 || ch == 0 || x0 + cw > self.width || y0 + ch > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {cw}x{ch}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(cw * ch);
        for y in y0..y0 + ch {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + cw]);
        }
        FloatMap::new(cw, ch, data)
    }
}

/// Grayscale vein capture with intensities in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct VeinImage(FloatMap);

impl fmt::Debug for VeinImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VeinImage({}x{})", self.0.width, self.0.height)
    }
}

impl VeinImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::try_from_map(FloatMap::new(width, height, pixels)?)
    }

    pub fn try_from_map(map: FloatMap) -> Result<Self> {
        if let Some(bad) = map.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MalformedImage(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self(map))
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_map_clamped(mut map: FloatMap) -> Self {
        for v in &mut map.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self(map)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self(FloatMap::filled(width, height, value.clamp(0.0, 1.0)))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.0.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.0.get(x, y)
    }

    pub fn as_map(&self) -> &FloatMap {
        &self.0
    }

    pub fn into_map(self) -> FloatMap {
        self.0
    }

    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<VeinImage> {
        Ok(VeinImage(self.0.crop(x0, y0, cw, ch)?))
    }

    /// Quantizes to 8 bits (`round(v * 255)`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.0
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(width, height, pixels)
    }
}

/// Region-of-interest mask; `true` marks pixels inside the region.
#[derive(Clone, PartialEq, Eq)]
pub struct FingerMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for FingerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FingerMask({}x{}, {} set)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl FingerMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn matches(&self, map: &FloatMap) -> bool {
        self.width == map.width() && self.height == map.height()
    }

    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<FingerMask> {
        if cw == 0 || ch == 0 || x0 + cw > self.width || y0 + ch > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {cw}x{ch}+{x0}+{y0} outside mask {}x{}",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(cw * ch);
        for y in y0..y0 + ch {
            let row = y * self.width;
            bits.extend_from_slice(&self.bits[row + x0..row + x0 + cw]);
        }
        FingerMask::new(cw, ch, bits)
    }

    /// One step of 8-neighbourhood binary dilation.
    pub fn dilate(&self) -> FingerMask {
        let (w, h) = (self.width, self.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if !self.bits[y * w + x] {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        out[ny * w + nx] = true;
                    }
                }
            }
        }
        FingerMask {
            width: w,
            height: h,
            bits: out,
        }
    }

    /// Sets every unset pixel that is not 4-connected to the border.
    pub fn fill_holes(&self) -> FingerMask {
        let (w, h) = (self.width, self.height);
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        let seed = |x: usize, y: usize, outside: &mut Vec<bool>, q: &mut VecDeque<usize>| {
            let i = y * w + x;
            if !self.bits[i] && !outside[i] {
                outside[i] = true;
                q.push_back(i);
            }
        };
        for x in 0..w {
            seed(x, 0, &mut outside, &mut queue);
            seed(x, h - 1, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(0, y, &mut outside, &mut queue);
            seed(w - 1, y, &mut outside, &mut queue);
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !self.bits[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        FingerMask {
            width: w,
            height: h,
            bits: outside.into_iter().map(|o| !o).collect(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        encode_pgm(self.width, self.height, &bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Gaussian,
    Lowpass,
    Highpass,
    Laplacian,
    Dirac,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(KernelKind::Gaussian),
            "lowpass" => Ok(KernelKind::Lowpass),
            "highpass" => Ok(KernelKind::Highpass),
            "laplacian" => Ok(KernelKind::Laplacian),
            "dirac" | "none" => Ok(KernelKind::Dirac),
            other => Err(Error::param("kernel", format!("unknown kernel kind {other:?}"))),
        }
    }
}

/// Square odd-sized filter kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    size: usize,
    taps: Vec<f32>,
}

impl Kernel {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f32] {
        &self.taps
    }

    #[inline]
    pub fn tap(&self, i: usize, j: usize) -> f32 {
        self.taps[j * self.size + i]
    }

    pub fn sum(&self) -> f32 {
        self.taps.iter().sum()
    }
}

/// Builds a filter kernel. `sigma` is only consulted for Gaussian kernels.
pub fn make_kernel(kind: KernelKind, size: usize, sigma: f32) -> Result<Kernel> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::param("size", format!("kernel size must be odd, got {size}")));
    }
    let n = size * size;
    let r = (size / 2) as isize;
    let center = n / 2;
    let taps = match kind {
        KernelKind::Gaussian => {
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
            }
            let two_s2 = 2.0 * (sigma as f64) * (sigma as f64);
            let raw: Vec<f64> = (0..n)
                .map(|k| {
                    let dx = (k % size) as isize - r;
                    let dy = (k / size) as isize - r;
                    (-((dx * dx + dy * dy) as f64) / two_s2).exp()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| (v / total) as f32).collect()
        }
        KernelKind::Lowpass => vec![1.0 / n as f32; n],
        KernelKind::Highpass => {
            let mut t = vec![-1.0 / n as f32; n];
            t[center] += 1.0;
            t
        }
        KernelKind::Laplacian => {
            if size < 3 {
                return Err(Error::param("size", "laplacian needs size >= 3"));
            }
            let mut t = vec![0.0; n];
            let c = size / 2;
            t[c * size + c] = -4.0;
            t[(c - 1) * size + c] = 1.0;
            t[(c + 1) * size + c] = 1.0;
            t[c * size + c - 1] = 1.0;
            t[c * size + c + 1] = 1.0;
            t
        }
        KernelKind::Dirac => {
            let mut t = vec![0.0; n];
            t[center] = 1.0;
            t
        }
    };
    Ok(Kernel { kind, size, taps })
}

/// 2-D convolution (kernel flipped) with replicate-edge borders.
pub fn convolve2d(src: &FloatMap, kernel: &Kernel) -> Result<FloatMap> {
    let (w, h) = (src.width(), src.height());
    if kernel.size > w.min(h) {
        return Err(Error::DimensionMismatch(format!(
            "kernel {}x{} larger than image {w}x{h}",
            kernel.size, kernel.size
        )));
    }
    let r = (kernel.size / 2) as isize;
    let k = kernel.size;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for j in 0..k {
                let sy = y - (j as isize - r);
                for i in 0..k {
                    let sx = x - (i as isize - r);
                    acc += kernel.taps[j * k + i] * src.get_clamped(sx, sy);
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    FloatMap::new(w, h, out)
}

/// Normalized 1-D Gaussian taps of radius `ceil(3 sigma)`.
pub fn gaussian_taps_1d(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let raw: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / s2).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian smoothing with replicate-edge borders.
pub fn gaussian_blur(src: &FloatMap, sigma: f32) -> Result<FloatMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
    }
    let taps = gaussian_taps_1d(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (src.width(), src.height());
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = 0.0f32;
            for (t, &c) in taps.iter().enumerate() {
                acc += c * src.get_clamped(x + t as isize - r, y as isize);
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let tmp = FloatMap::new(w, h, tmp)?;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = 0.0f32;
            for (t, &c) in taps.iter().enumerate() {
                acc += c * tmp.get_clamped(x as isize, y + t as isize - r);
            }
            out[y as usize * w + x] = acc;
        }
    }
    FloatMap::new(w, h, out)
}

/// Source coordinate and weights for align-corners bilinear sampling.
#[inline]
fn bilinear_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f32) {
    if dst_len == 1 || src_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, (pos - i0 as f64) as f32)
}

/// Bilinear resampling with corner pixels aligned.
pub fn resize_bilinear(src: &FloatMap, width: usize, height: usize) -> FloatMap {
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        let (y0, y1, fy) = bilinear_coord(y, height, src.height());
        for x in 0..width {
            let (x0, x1, fx) = bilinear_coord(x, width, src.width());
            let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
            let bot = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
            out[y * width + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    FloatMap::new(width, height, out).expect("nonzero dims")
}

/// Transpose of [`resize_bilinear`]: scatters `grad` (resampled shape) back to
/// a `width` x `height` raster.
pub fn resize_bilinear_adjoint(grad: &FloatMap, width: usize, height: usize) -> FloatMap {
    let mut out = FloatMap::zeros(width, height);
    let (gw, gh) = (grad.width(), grad.height());
    for y in 0..gh {
        let (y0, y1, fy) = bilinear_coord(y, gh, height);
        for x in 0..gw {
            let (x0, x1, fx) = bilinear_coord(x, gw, width);
            let g = grad.get(x, y);
            let d = out.data_mut();
            d[y0 * width + x0] += g * (1.0 - fx) * (1.0 - fy);
            d[y0 * width + x1] += g * fx * (1.0 - fy);
            d[y1 * width + x0] += g * (1.0 - fx) * fy;
            d[y1 * width + x1] += g * fx * fy;
        }
    }
    out
}

/// Uniformly random top-left corner for a `cw` x `ch` window.
pub fn random_crop_origin<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    cw: usize,
    ch: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if cw == 0 || ch == 0 || cw > width || ch > height {
        return Err(Error::param(
            "crop",
            format!("{cw}x{ch} crop does not fit a {width}x{height} image"),
        ));
    }
    let x = rng.random_range(0..=width - cw);
    let y = rng.random_range(0..=height - ch);
    Ok((x, y))
}

pub fn random_crop<R: Rng + ?Sized>(
    image: &VeinImage,
    cw: usize,
    ch: usize,
    rng: &mut R,
) -> Result<VeinImage> {
    let (x, y) = random_crop_origin(image.width(), image.height(), cw, ch, rng)?;
    image.crop(x, y, cw, ch)
}

/// Dark-region mask: threshold, dilate `dilation` times, then fill holes.
pub fn estimate_finger_mask(image: &VeinImage, threshold: f32, dilation: usize) -> Result<FingerMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(
            "threshold",
            format!("must lie in (0, 1), got {threshold}"),
        ));
    }
    let bits = image.pixels().iter().map(|&v| v < threshold).collect();
    let mut mask = FingerMask::new(image.width(), image.height(), bits)?;
    for _ in 0..dilation {
        mask = mask.dilate();
    }
    let mask = mask.fill_holes();
    if mask.is_empty() {
        return Err(Error::EmptyMask(format!(
            "no pixel darker than {threshold}"
        )));
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

pub fn encode_pgm(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    out
}

pub fn encode_png(width: usize, height: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
    }
    Ok(out)
}

/// Parses a binary P5 PGM with maxval 255. Returns `(width, height, bytes)`.
pub fn decode_pgm(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(Error::UnsupportedFormat("not a binary PGM (P5)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match data.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::MalformedImage("truncated PGM header".into())),
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::MalformedImage(format!(
                "expected a number in PGM header at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage("PGM header number out of range".into()))?;
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage(format!("zero dimension {w}x{h}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PGM maxval {maxval}, only 8-bit (255) supported"
        )));
    }
    let need = w * h;
    if data.len() < pos + need {
        return Err(Error::MalformedImage(format!(
            "PGM raster truncated: need {need} bytes, have {}",
            data.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, data[pos..pos + need].to_vec()))
}

fn decode_png(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(Cursor::new(data)));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedImage(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "png must be 8-bit grayscale, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage(format!("zero dimension {w}x{h}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::MalformedImage(format!("png: {e}")))?;
    buf.truncate(frame.buffer_size());
    if buf.len() != w * h {
        return Err(Error::MalformedImage("png raster size mismatch".into()));
    }
    Ok((w, h, buf))
}

/// Decodes an 8-bit grayscale PGM (P5) or PNG from memory.
pub fn decode_image(data: &[u8]) -> Result<VeinImage> {
    let (w, h, bytes) = if data.starts_with(b"P5") {
        decode_pgm(data)?
    } else if data.starts_with(b"\x89PNG") {
        decode_png(data)?
    } else {
        return Err(Error::UnsupportedFormat(
            "expected binary PGM (P5) or PNG".into(),
        ));
    };
    VeinImage::from_u8(w, h, &bytes)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<VeinImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&data)
}

pub fn save_pgm(image: &VeinImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(image.width(), image.height(), &image.to_u8());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_mask(mask: &FingerMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, mask.to_pgm()).map_err(|e| Error::io(path, e))
}

/// Reads a `{0, 255}` PGM mask; values >= 128 are set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<FingerMask> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, bytes) = decode_pgm(&data)?;
    FingerMask::new(w, h, bytes.iter().map(|&b| b >= 128).collect())
}
