//! Handcrafted recognition pipeline: maximum-curvature centreline extraction
//! and the normalized-overlap displacement-search matcher.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, FingerMask, FloatMap, VeinImage};

/// Binary vein centreline map.
#[derive(Clone, PartialEq, Eq)]
pub struct VeinPattern {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for VeinPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "VeinPattern({}x{}, {} set)",
            self.width,
            self.height,
            self.count()
        )
    }
}

impl VeinPattern {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} pattern",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
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

    pub fn crop(&self, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<VeinPattern> {
        if cw == 0 || ch == 0 || x0 + cw > self.width || y0 + ch > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {cw}x{ch}+{x0}+{y0} outside pattern {}x{}",
                self.width, self.height
            )));
        }
        let mut bits = Vec::with_capacity(cw * ch);
        for y in y0..y0 + ch {
            bits.extend_from_slice(&self.bits[y * self.width + x0..y * self.width + x0 + cw]);
        }
        VeinPattern::new(cw, ch, bits)
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let bytes: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        crate::imaging::encode_pgm(self.width, self.height, &bytes)
    }

    pub fn from_pgm(data: &[u8]) -> Result<Self> {
        let (w, h, bytes) = crate::imaging::decode_pgm(data)?;
        VeinPattern::new(w, h, bytes.iter().map(|&b| b >= 128).collect())
    }
}

/// Matcher output in `[0, 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub value: f64,
    /// Set when the probe window carried no vein pixels.
    pub empty_probe: bool,
}

impl MatchScore {
    fn empty() -> Self {
        MatchScore {
            value: 0.0,
            empty_probe: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiuraParams {
    /// Pre-smoothing standard deviation for curvature estimation.
    pub sigma: f32,
    /// Displacement bounds for full matching.
    pub cw: usize,
    pub ch: usize,
    /// Probe margins trimmed before partial matching.
    pub partial_cw: usize,
    pub partial_ch: usize,
}

impl Default for MiuraParams {
    fn default() -> Self {
        MiuraParams {
            sigma: 3.0,
            cw: 30,
            ch: 30,
            partial_cw: 10,
            partial_ch: 10,
        }
    }
}

/// Profile directions: horizontal, vertical and the two diagonals.
pub const DIRECTIONS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// Visits every maximal line of pixels running along `dir`, in order.
fn for_each_profile(w: usize, h: usize, dir: (isize, isize), mut f: impl FnMut(&[usize])) {
    let (dx, dy) = dir;
    let (wi, hi) = (w as isize, h as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < wi && y < hi;
    let mut line = Vec::with_capacity(w.max(h));
    for y in 0..hi {
        for x in 0..wi {
            // a line starts where stepping backwards leaves the image
            if inside(x - dx, y - dy) {
                continue;
            }
            line.clear();
            let (mut cx, mut cy) = (x, y);
            while inside(cx, cy) {
                line.push(cy as usize * w + cx as usize);
                cx += dx;
                cy += dy;
            }
            f(&line);
        }
    }
}

/// Accumulated centreline evidence: every positive-curvature run along every
/// profile contributes `max curvature * run width` at its curvature peak.
pub fn curvature_scores(smoothed: &FloatMap) -> FloatMap {
    let (w, h) = (smoothed.width(), smoothed.height());
    let src = smoothed.data();
    let mut scores = vec![0.0f32; w * h];
    let mut kappa = Vec::with_capacity(w.max(h));
    for dir in DIRECTIONS {
        for_each_profile(w, h, dir, |line| {
            let n = line.len();
            kappa.clear();
            kappa.resize(n, 0.0f32);
            for i in 1..n.saturating_sub(1) {
                let (a, b, c) = (src[line[i - 1]], src[line[i]], src[line[i + 1]]);
                let d1 = 0.5 * (c - a);
                let d2 = c - 2.0 * b + a;
                kappa[i] = d2 / (1.0 + d1 * d1).powf(1.5);
            }
            let mut i = 0;
            while i < n {
                if kappa[i] <= 0.0 {
                    i += 1;
                    continue;
                }
                let start = i;
                let mut peak = i;
                while i < n && kappa[i] > 0.0 {
                    if kappa[i] > kappa[peak] {
                        peak = i;
                    }
                    i += 1;
                }
                let width = (i - start) as f32;
                scores[line[peak]] += kappa[peak] * width;
            }
        });
    }
    FloatMap::new(w, h, scores).expect("same shape")
}

/// Links centreline evidence: along each direction a pixel keeps
/// `min(max of the two forward neighbours, max of the two backward neighbours)`;
/// the result is the maximum over directions.
pub fn connect_centres(scores: &FloatMap) -> FloatMap {
    let (w, h) = (scores.width() as isize, scores.height() as isize);
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            scores.get(x as usize, y as usize)
        }
    };
    let mut out = FloatMap::zeros(w as usize, h as usize);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0.0f32;
            for (dx, dy) in DIRECTIONS {
                let fwd = at(x + dx, y + dy).max(at(x + 2 * dx, y + 2 * dy));
                let bwd = at(x - dx, y - dy).max(at(x - 2 * dx, y - 2 * dy));
                best = best.max(fwd.min(bwd));
            }
            out.set(x as usize, y as usize, best);
        }
    }
    out
}

/// Maximum-curvature vein extraction, binarized at the masked median.
pub fn max_curvature(image: &VeinImage, mask: &FingerMask, sigma: f32) -> Result<VeinPattern> {
    if !mask.matches(image.as_map()) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask("max_curvature needs a nonempty mask".into()));
    }
    let smoothed = gaussian_blur(image.as_map(), sigma)?;
    let connected = connect_centres(&curvature_scores(&smoothed));
    let mut masked: Vec<f32> = connected
        .data()
        .iter()
        .zip(mask.bits())
        .filter_map(|(v, m)| m.then_some(*v))
        .collect();
    let mid = masked.len() / 2;
    let (_, median, _) = masked.select_nth_unstable_by(mid, f32::total_cmp);
    let median = *median;
    let bits = connected
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(v, m)| *m && *v > median)
        .collect();
    VeinPattern::new(image.width(), image.height(), bits)
}

/// Row-packed bit raster.
struct Packed {
    words_per_row: usize,
    rows: Vec<u64>,
}

impl Packed {
    fn from_pattern(p: &VeinPattern) -> Self {
        let wpr = p.width.div_ceil(64);
        let mut rows = vec![0u64; wpr * p.height];
        for y in 0..p.height {
            for x in 0..p.width {
                if p.bits[y * p.width + x] {
                    rows[y * wpr + x / 64] |= 1u64 << (x % 64);
                }
            }
        }
        Packed {
            words_per_row: wpr,
            rows,
        }
    }

    /// Bits `[start, start + len)` of row `y`, repacked from bit 0.
    fn extract(&self, y: usize, start: usize, len: usize, out: &mut [u64]) {
        let row = &self.rows[y * self.words_per_row..(y + 1) * self.words_per_row];
        let (q, r) = (start / 64, start % 64);
        for (k, slot) in out.iter_mut().enumerate() {
            let lo = row.get(q + k).copied().unwrap_or(0);
            let hi = row.get(q + k + 1).copied().unwrap_or(0);
            *slot = if r == 0 { lo } else { (lo >> r) | (hi << (64 - r)) };
        }
        let tail = len % 64;
        if tail != 0 {
            if let Some(last) = out.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }
}

/// Slides `probe` (trimmed by `cw`/`ch` on every side) across every position
/// where it fits inside `template` and returns the best normalized overlap.
pub fn miura_match(
    probe: &VeinPattern,
    template: &VeinPattern,
    cw: usize,
    ch: usize,
) -> Result<MatchScore> {
    if probe.width > template.width || probe.height > template.height {
        return Err(Error::DimensionMismatch(format!(
            "probe {}x{} larger than template {}x{}",
            probe.width, probe.height, template.width, template.height
        )));
    }
    if 2 * cw >= probe.width || 2 * ch >= probe.height {
        return Err(Error::param(
            "cw/ch",
            format!(
                "margins {cw},{ch} leave nothing of a {}x{} probe",
                probe.width, probe.height
            ),
        ));
    }
    let crop = probe.crop(cw, ch, probe.width - 2 * cw, probe.height - 2 * ch)?;
    let probe_sum = crop.count();
    if probe_sum == 0 {
        warn!("miura_match: probe window is empty; scoring 0");
        return Ok(MatchScore::empty());
    }
    let (pw, ph) = (crop.width, crop.height);
    let pp = Packed::from_pattern(&crop);
    let tp = Packed::from_pattern(template);
    let wpr = pp.words_per_row;
    // vein patterns are sparse; only probe words with set bits can overlap
    let nonzero: Vec<(usize, u64)> = pp
        .rows
        .iter()
        .enumerate()
        .filter(|(_, w)| **w != 0)
        .map(|(i, w)| (i, *w))
        .collect();
    let nx = template.width - pw + 1;
    let ny = template.height - ph + 1;

    let mut shifted = vec![0u64; wpr * template.height];
    let mut prefix = vec![0u32; template.height + 1];
    let mut best = 0.0f64;
    for ox in 0..nx {
        for y in 0..template.height {
            tp.extract(y, ox, pw, &mut shifted[y * wpr..(y + 1) * wpr]);
            let c: u32 = shifted[y * wpr..(y + 1) * wpr]
                .iter()
                .map(|w| w.count_ones())
                .sum();
            prefix[y + 1] = prefix[y] + c;
        }
        for oy in 0..ny {
            let window = (prefix[oy + ph] - prefix[oy]) as usize;
            let denom = probe_sum + window;
            let base = oy * wpr;
            let overlap: u32 = nonzero
                .iter()
                .map(|&(i, a)| (a & shifted[base + i]).count_ones())
                .sum();
            let score = overlap as f64 / denom as f64;
            if score > best {
                best = score;
            }
        }
    }
    Ok(MatchScore {
        value: best,
        empty_probe: false,
    })
}

/// Extracts the probe pattern from a full-size capture and matches it with the
/// full-size displacement bounds.
pub fn miura_full_match(
    probe_img: &VeinImage,
    probe_mask: &FingerMask,
    template: &VeinPattern,
    params: &MiuraParams,
) -> Result<MatchScore> {
    if probe_img.width() != template.width || probe_img.height() != template.height {
        return Err(Error::DimensionMismatch(format!(
            "full matching needs equal sizes: probe {}x{}, template {}x{}",
            probe_img.width(),
            probe_img.height(),
            template.width,
            template.height
        )));
    }
    let probe = max_curvature(probe_img, probe_mask, params.sigma)?;
    miura_match(&probe, template, params.cw, params.ch)
}

/// Matches a cropped probe against a full template by exhaustive placement.
pub fn miura_partial_match(
    probe_img: &VeinImage,
    probe_mask: &FingerMask,
    template: &VeinPattern,
    params: &MiuraParams,
) -> Result<MatchScore> {
    if probe_img.width() >= template.width || probe_img.height() >= template.height {
        return Err(Error::DimensionMismatch(format!(
            "partial probe {}x{} must be strictly smaller than template {}x{}",
            probe_img.width(),
            probe_img.height(),
            template.width,
            template.height
        )));
    }
    let probe = max_curvature(probe_img, probe_mask, params.sigma)?;
    miura_match(&probe, template, params.partial_cw, params.partial_ch)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive placement search with plain boolean arithmetic.
    pub(crate) fn match_oracle(p: &VeinPattern, t: &VeinPattern, cw: usize, ch: usize) -> f64 {
        let pw = p.width() - 2 * cw;
        let ph = p.height() - 2 * ch;
        let mut psum = 0usize;
        for y in 0..ph {
            for x in 0..pw {
                psum += p.get(x + cw, y + ch) as usize;
            }
        }
        if psum == 0 {
            return 0.0;
        }
        let mut best = 0.0f64;
        for oy in 0..=t.height() - ph {
            for ox in 0..=t.width() - pw {
                let (mut overlap, mut tsum) = (0usize, 0usize);
                for y in 0..ph {
                    for x in 0..pw {
                        let a = p.get(x + cw, y + ch);
                        let b = t.get(x + ox, y + oy);
                        overlap += (a && b) as usize;
                        tsum += b as usize;
                    }
                }
                best = best.max(overlap as f64 / (psum + tsum) as f64);
            }
        }
        best
    }

    pub(crate) fn random_pattern(w: usize, h: usize, density: f64, rng: &mut impl Rng) -> VeinPattern {
        VeinPattern::new(w, h, (0..w * h).map(|_| rng.random_bool(density)).collect()).unwrap()
    }

    fn line_image(w: usize, h: usize, row: f32, width: f32) -> VeinImage {
        let px = (0..w * h)
            .map(|i| {
                let y = (i / w) as f32;
                let d = y - row;
                0.9 - 0.6 * (-(d * d) / (2.0 * width * width)).exp()
            })
            .collect();
        VeinImage::new(w, h, px).unwrap()
    }

    #[test]
    fn flat_image_has_no_veins() {
        let img = VeinImage::filled(64, 48, 0.7);
        let p = max_curvature(&img, &FingerMask::full(64, 48), 2.0).unwrap();
        assert_eq!(p.count(), 0);
    }

    #[test]
    fn horizontal_line_centre_is_found() {
        let (w, h) = (120, 80);
        let row = 37usize;
        let img = line_image(w, h, row as f32, 3.0);
        let mask = FingerMask::full(w, h);
        let p = max_curvature(&img, &mask, 2.0).unwrap();
        let hits = (0..w)
            .filter(|&x| (row - 1..=row + 1).any(|y| p.get(x, y)))
            .count();
        assert!(hits as f64 >= 0.9 * w as f64, "{hits}/{w}");
    }

    #[test]
    fn pattern_is_confined_to_mask() {
        let img = line_image(60, 40, 20.0, 2.5);
        let mut bits = vec![false; 2400];
        for y in 10..30 {
            for x in 0..30 {
                bits[y * 60 + x] = true;
            }
        }
        let mask = FingerMask::new(60, 40, bits).unwrap();
        let p = max_curvature(&img, &mask, 2.0).unwrap();
        assert!(p.count() > 0);
        for (i, b) in p.bits().iter().enumerate() {
            assert!(!*b || mask.bits()[i]);
        }
    }

    #[test]
    fn extraction_errors() {
        let img = VeinImage::filled(10, 10, 0.5);
        assert!(max_curvature(&img, &FingerMask::empty(10, 10), 1.0).is_err());
        assert!(max_curvature(&img, &FingerMask::full(10, 9), 1.0).is_err());
        assert!(max_curvature(&img, &FingerMask::full(10, 10), 0.0).is_err());
    }

    #[test]
    fn affine_rescaling_keeps_curvature_peaks() {
        let img = line_image(80, 60, 29.0, 3.0);
        let scaled = VeinImage::new(
            80,
            60,
            img.pixels().iter().map(|v| 0.5 * v + 0.25).collect(),
        )
        .unwrap();
        let s1 = curvature_scores(&gaussian_blur(img.as_map(), 2.0).unwrap());
        let s2 = curvature_scores(&gaussian_blur(scaled.as_map(), 2.0).unwrap());
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert_eq!(*a > 0.0, *b > 0.0);
        }
    }

    #[test]
    fn self_match_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pattern(40, 30, 0.2, &mut rng);
        let s = miura_match(&p, &p, 0, 0).unwrap();
        assert_eq!(s.value, 0.5);
        assert!(!s.empty_probe);
    }

    #[test]
    fn disjoint_patterns_score_zero() {
        let mut a = vec![false; 400];
        let mut b = vec![false; 400];
        for x in 0..20 {
            a[2 * 20 + x] = true; // a horizontal line
        }
        b[17 * 20 + 17] = true; // a single far corner pixel
        let a = VeinPattern::new(20, 20, a).unwrap();
        let b = VeinPattern::new(20, 20, b).unwrap();
        assert_eq!(miura_match(&a, &b, 0, 0).unwrap().value, 0.0);
    }

    #[test]
    fn empty_probe_is_flagged() {
        let p = VeinPattern::empty(30, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_pattern(30, 30, 0.3, &mut rng);
        let s = miura_match(&p, &t, 3, 3).unwrap();
        assert_eq!(s.value, 0.0);
        assert!(s.empty_probe);
    }

    #[test]
    fn match_dimension_errors() {
        let small = VeinPattern::empty(10, 10);
        let big = VeinPattern::empty(20, 20);
        assert!(miura_match(&big, &small, 0, 0).is_err());
        assert!(miura_match(&small, &big, 5, 0).is_err());
    }

    #[test]
    fn random_pair_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_pattern(32, 32, 0.15, &mut rng);
        let b = random_pattern(32, 32, 0.15, &mut rng);
        let got = miura_match(&a, &b, 4, 4).unwrap().value;
        assert_eq!(got, match_oracle(&a, &b, 4, 4));
    }

    #[test]
    fn wide_patterns_cross_word_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_pattern(150, 20, 0.1, &mut rng);
        let p = random_pattern(90, 14, 0.1, &mut rng);
        let got = miura_match(&p, &t, 3, 2).unwrap().value;
        assert_eq!(got, match_oracle(&p, &t, 3, 2));
    }

    #[test]
    fn subset_probe_never_scores_higher() {
        // A ⊆ B ⊆ T at displacement 0
        let mut t = vec![false; 100];
        for x in 0..10 {
            t[5 * 10 + x] = true;
            t[2 * 10 + x] = true;
        }
        let t = VeinPattern::new(10, 10, t).unwrap();
        let mut a = vec![false; 100];
        for x in 0..4 {
            a[5 * 10 + x] = true;
        }
        let mut b = a.clone();
        for x in 0..7 {
            b[2 * 10 + x] = true;
        }
        let a = VeinPattern::new(10, 10, a).unwrap();
        let b = VeinPattern::new(10, 10, b).unwrap();
        let sa = miura_match(&a, &t, 0, 0).unwrap().value;
        let sb = miura_match(&b, &t, 0, 0).unwrap().value;
        assert!(sa <= sb + 1e-9);

        // equal denominators: trade a missing bit for a hitting one
        let mut c = vec![false; 100];
        let mut d = vec![false; 100];
        for x in 0..4 {
            c[5 * 10 + x] = true;
            d[5 * 10 + x] = true;
        }
        c[8 * 10 + 1] = true;
        d[5 * 10 + 6] = true;
        let c = VeinPattern::new(10, 10, c).unwrap();
        let d = VeinPattern::new(10, 10, d).unwrap();
        let sc = miura_match(&c, &t, 0, 0).unwrap().value;
        let sd = miura_match(&d, &t, 0, 0).unwrap().value;
        assert!(sc <= sd + 1e-9);
    }

    #[test]
    fn pattern_pgm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_pattern(13, 7, 0.4, &mut rng);
        assert_eq!(VeinPattern::from_pgm(&p.to_pgm()).unwrap(), p);
    }

    fn shifted(p: &VeinPattern, dx: usize, dy: usize) -> VeinPattern {
        let mut bits = vec![false; p.width() * p.height()];
        for y in 0..p.height() - dy {
            for x in 0..p.width() - dx {
                bits[(y + dy) * p.width() + x + dx] = p.get(x, y);
            }
        }
        VeinPattern::new(p.width(), p.height(), bits).unwrap()
    }

    fn interior_pattern(seed: u64, w: usize, h: usize, margin: usize) -> VeinPattern {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                x >= margin && y >= margin && x < w - margin && y < h - margin && rng.random_bool(0.2)
            })
            .collect();
        VeinPattern::new(w, h, bits).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn score_in_range(seed in 0u64..10_000, da in 0.0f64..0.6, db in 0.0f64..0.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pattern(24, 20, da, &mut rng);
            let b = random_pattern(24, 20, db, &mut rng);
            let s = miura_match(&a, &b, 3, 2).unwrap().value;
            prop_assert!((0.0..=0.5).contains(&s));
        }

        #[test]
        fn matches_oracle_everywhere(seed in 0u64..10_000, cw in 0usize..5, ch in 0usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_pattern(20, 16, 0.2, &mut rng);
            let b = random_pattern(20, 16, 0.2, &mut rng);
            prop_assert_eq!(miura_match(&a, &b, cw, ch).unwrap().value, match_oracle(&a, &b, cw, ch));
        }

        #[test]
        fn shift_equivariance(seed in 0u64..10_000, dx in 0usize..4, dy in 0usize..4) {
            let a = interior_pattern(seed, 40, 32, 8);
            let b = interior_pattern(seed + 1, 40, 32, 8);
            let s0 = miura_match(&a, &b, 2, 2).unwrap().value;
            let s1 = miura_match(&shifted(&a, dx, dy), &shifted(&b, dx, dy), 2, 2).unwrap().value;
            prop_assert_eq!(s0, s1);
        }
    }
}
