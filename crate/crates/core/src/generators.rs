//! Vein image synthesis: a procedural stroke renderer driven by a 24-value
//! latent, an adapter over decoder weights, and the synthetic corpus builder.

use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    estimate_finger_mask, load_image, load_mask, resize_bilinear, save_mask, save_pgm, FingerMask,
    VeinImage, FULL_HEIGHT, FULL_WIDTH,
};
use crate::neural::DecoderNet;

/// Anything that maps a latent vector to a vein image.
pub trait Generator: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn generate(&self, z: &[f64]) -> Result<VeinImage>;

    /// Symmetric box the latent is clamped to, if any.
    fn latent_bound(&self) -> Option<f64> {
        None
    }
}

pub const STROKES: usize = 4;
pub const PARAMS_PER_STROKE: usize = 6;
pub const PROCEDURAL_LATENT_DIM: usize = STROKES * PARAMS_PER_STROKE;
pub const LATENT_BOUND: f64 = 3.0;

const BACKGROUND: f32 = 0.82;
const OUTSIDE: f32 = 0.62;
const MAX_WIDTH: f32 = 2.6 * 1.8221188; // width at z = +3
const CUTOFF: f32 = 3.5 * MAX_WIDTH;

/// Endpoints of each stroke at z = 0, in canvas fractions.
const BASE_STROKES: [[(f32, f32); 2]; STROKES] = [
    [(0.03, 0.32), (0.97, 0.36)],
    [(0.03, 0.66), (0.97, 0.61)],
    [(0.22, 0.12), (0.52, 0.88)],
    [(0.58, 0.88), (0.86, 0.12)],
];

/// Stroke parameters decoded from six latent coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub start: (f32, f32),
    pub control: (f32, f32),
    pub end: (f32, f32),
    pub width: f32,
    pub depth: f32,
}

impl Stroke {
    fn point(&self, t: f32) -> (f32, f32) {
        let u = 1.0 - t;
        (
            u * u * self.start.0 + 2.0 * u * t * self.control.0 + t * t * self.end.0,
            u * u * self.start.1 + 2.0 * u * t * self.control.1 + t * t * self.end.1,
        )
    }
}

/// Clamps a latent into the valid box, warning once if anything moved.
pub fn clamp_latent(z: &[f64]) -> Vec<f64> {
    let out: Vec<f64> = z.iter().map(|v| v.clamp(-LATENT_BOUND, LATENT_BOUND)).collect();
    if out.iter().zip(z).any(|(a, b)| a != b) {
        warn!("latent outside [-{LATENT_BOUND}, {LATENT_BOUND}] clamped");
    }
    out
}

/// Decodes the stroke geometry for a (clamped) latent on a `width x height` canvas.
pub fn decode_strokes(z: &[f64], width: usize, height: usize) -> Result<[Stroke; STROKES]> {
    if z.len() != PROCEDURAL_LATENT_DIM {
        return Err(Error::DimensionMismatch(format!(
            "procedural latent has {} entries, expected {PROCEDURAL_LATENT_DIM}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent".into()));
    }
    let z = clamp_latent(z);
    let (w, h) = (width as f32, height as f32);
    let shift = 0.11 * h;
    let mut strokes = [Stroke {
        start: (0.0, 0.0),
        control: (0.0, 0.0),
        end: (0.0, 0.0),
        width: 1.0,
        depth: 0.0,
    }; STROKES];
    for (s, (stroke, base)) in strokes.iter_mut().zip(&BASE_STROKES).enumerate() {
        let p = &z[s * PARAMS_PER_STROKE..(s + 1) * PARAMS_PER_STROKE];
        let p: Vec<f32> = p.iter().map(|v| *v as f32).collect();
        let a = (base[0].0 * w, base[0].1 * h);
        let b = (base[1].0 * w, base[1].1 * h);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = (dx * dx + dy * dy).sqrt();
        let normal = (-dy / len, dx / len);
        let start = (a.0 + normal.0 * shift * p[0], a.1 + normal.1 * shift * p[0]);
        let end = (b.0 + normal.0 * shift * p[1], b.1 + normal.1 * shift * p[1]);
        let t = 0.5 + 0.12 * p[2];
        let mid = (start.0 + t * (end.0 - start.0), start.1 + t * (end.1 - start.1));
        let bend = 0.09 * h * p[5];
        *stroke = Stroke {
            start,
            control: (mid.0 + normal.0 * bend * 2.0, mid.1 + normal.1 * bend * 2.0),
            end,
            width: 2.6 * (0.2 * p[3]).exp(),
            depth: (0.58 + 0.08 * p[4]).clamp(0.2, 0.9),
        };
    }
    Ok(strokes)
}

/// Smooth finger-shaped background: bright rounded rectangle with a vertical
/// vignette, easing to a dimmer surround.
fn background(width: usize, height: usize) -> Vec<f32> {
    let (w, h) = (width as f32, height as f32);
    let margin_y = 0.06 * h;
    let radius = 0.18 * h;
    let edge = 3.0f32;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            // signed distance to the rounded rectangle
            let hx = 0.5 * w - radius;
            let hy = 0.5 * h - margin_y - radius;
            let qx = (px - 0.5 * w).abs() - hx;
            let qy = (py - 0.5 * h).abs() - hy;
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            let sd = outside + qx.max(qy).min(0.0) - radius;
            let inside = 1.0 / (1.0 + (sd / edge).exp());
            let v = (py / h - 0.5) / 0.5;
            let finger = BACKGROUND * (1.0 - 0.12 * v * v);
            out.push(OUTSIDE + (finger - OUTSIDE) * inside);
        }
    }
    out
}

/// Renders a latent with the procedural stroke model. Pure function of `z`.
pub fn procedural_vein(z: &[f64], width: usize, height: usize) -> Result<VeinImage> {
    if width < 16 || height < 16 {
        return Err(Error::param("canvas", format!("{width}x{height} is too small")));
    }
    let strokes = decode_strokes(z, width, height)?;
    let mut img = background(width, height);
    let r = CUTOFF.ceil() as isize;
    let mut dist = vec![f32::INFINITY; width * height];
    for s in &strokes {
        dist.iter_mut().for_each(|d| *d = f32::INFINITY);
        let approx_len = {
            let (a, c, b) = (s.start, s.control, s.end);
            let l1 = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
            let l2 = ((b.0 - c.0).powi(2) + (b.1 - c.1).powi(2)).sqrt();
            l1 + l2
        };
        let samples = (approx_len * 2.0).ceil().max(8.0) as usize;
        for i in 0..=samples {
            let (cx, cy) = s.point(i as f32 / samples as f32);
            let (ix, iy) = (cx.floor() as isize, cy.floor() as isize);
            for y in (iy - r).max(0)..(iy + r + 2).min(height as isize) {
                let ddy = y as f32 + 0.5 - cy;
                for x in (ix - r).max(0)..(ix + r + 2).min(width as isize) {
                    let ddx = x as f32 + 0.5 - cx;
                    let d2 = ddx * ddx + ddy * ddy;
                    let slot = &mut dist[y as usize * width + x as usize];
                    if d2 < *slot {
                        *slot = d2;
                    }
                }
            }
        }
        let inv = 1.0 / (2.0 * s.width * s.width);
        let cut = (-(CUTOFF * CUTOFF) * inv).exp();
        for (p, d2) in img.iter_mut().zip(&dist) {
            if d2.is_finite() && *d2 < CUTOFF * CUTOFF {
                let g = ((-d2 * inv).exp() - cut).max(0.0) / (1.0 - cut);
                *p *= 1.0 - s.depth * g;
            }
        }
    }
    VeinImage::new(width, height, img)
}

/// The procedural renderer as a [`Generator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProceduralGenerator {
    pub width: usize,
    pub height: usize,
}

impl Default for ProceduralGenerator {
    fn default() -> Self {
        ProceduralGenerator {
            width: FULL_WIDTH,
            height: FULL_HEIGHT,
        }
    }
}

impl Generator for ProceduralGenerator {
    fn latent_dim(&self) -> usize {
        PROCEDURAL_LATENT_DIM
    }

    fn generate(&self, z: &[f64]) -> Result<VeinImage> {
        procedural_vein(z, self.width, self.height)
    }

    fn latent_bound(&self) -> Option<f64> {
        Some(LATENT_BOUND)
    }
}

/// Decoder weights as a [`Generator`], upscaled to the canonical size.
#[derive(Debug, Clone)]
pub struct NeuralGenerator {
    decoder: DecoderNet,
    width: usize,
    height: usize,
}

pub fn neural_generator(decoder: DecoderNet) -> Result<NeuralGenerator> {
    decoder.validate()?;
    Ok(NeuralGenerator {
        decoder,
        width: FULL_WIDTH,
        height: FULL_HEIGHT,
    })
}

impl Generator for NeuralGenerator {
    fn latent_dim(&self) -> usize {
        self.decoder.latent_dim
    }

    fn generate(&self, z: &[f64]) -> Result<VeinImage> {
        let z: Vec<f32> = z.iter().map(|v| *v as f32).collect();
        let img = self.decoder.decode(&z)?;
        if img.width() == self.width && img.height() == self.height {
            return Ok(img);
        }
        VeinImage::try_from_map(resize_bilinear(img.as_map(), self.width, self.height))
    }
}

/// Parameters that fully determine a synthetic corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub identities: usize,
    pub samples_per_id: usize,
    pub jitter: f64,
    pub brightness_jitter: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub mask_threshold: f32,
    pub mask_dilation: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            identities: 20,
            samples_per_id: 8,
            jitter: 0.15,
            brightness_jitter: 0.04,
            seed: 3,
            width: FULL_WIDTH,
            height: FULL_HEIGHT,
            mask_threshold: 0.5,
            mask_dilation: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: VeinImage,
    pub mask: FingerMask,
}

impl Sample {
    /// Wraps an image with its estimated mask, falling back to the full frame
    /// when the image has no dark region at all.
    pub fn from_image(image: VeinImage, threshold: f32, dilation: usize) -> Result<Sample> {
        let mask = match estimate_finger_mask(&image, threshold, dilation) {
            Ok(m) => m,
            Err(Error::EmptyMask(_)) => FingerMask::full(image.width(), image.height()),
            Err(e) => return Err(e),
        };
        Ok(Sample { image, mask })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub id: String,
    pub enroll: Vec<Sample>,
    pub probe: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VeinCorpus {
    pub params: CorpusParams,
    pub identities: Vec<Identity>,
}

impl VeinCorpus {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    /// All images with dense identity labels, enrollment first.
    pub fn labeled_images(&self) -> Vec<(VeinImage, usize)> {
        self.identities
            .iter()
            .enumerate()
            .flat_map(|(i, ident)| {
                ident
                    .enroll
                    .iter()
                    .chain(&ident.probe)
                    .map(move |s| (s.image.clone(), i))
            })
            .collect()
    }
}

/// Renders the corpus described by `params`: one base latent per identity,
/// Gaussian latent jitter and a global gain per sample.
pub fn build_corpus(params: &CorpusParams) -> Result<VeinCorpus> {
    if params.identities < 2 || params.samples_per_id < 2 {
        return Err(Error::param(
            "identities/samples",
            "need at least 2 identities and 2 samples per identity",
        ));
    }
    if !(params.jitter >= 0.0 && params.jitter.is_finite()) || !(0.0..0.5).contains(&params.brightness_jitter) {
        return Err(Error::param("jitter", "must be finite and non-negative (gain jitter < 0.5)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut plans = Vec::with_capacity(params.identities * params.samples_per_id);
    for _ in 0..params.identities {
        let base: Vec<f64> = (0..PROCEDURAL_LATENT_DIM)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v.clamp(-2.5, 2.5)
            })
            .collect();
        for _ in 0..params.samples_per_id {
            let z: Vec<f64> = base
                .iter()
                .map(|b| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    (b + params.jitter * n).clamp(-LATENT_BOUND, LATENT_BOUND)
                })
                .collect();
            let gain = 1.0 + params.brightness_jitter * (2.0 * rng.random::<f64>() - 1.0);
            plans.push((z, gain as f32));
        }
    }
    let samples = plans
        .par_iter()
        .map(|(z, gain)| {
            let img = procedural_vein(z, params.width, params.height)?;
            let mut map = img.into_map();
            map.data_mut().iter_mut().for_each(|v| *v *= gain);
            let img = VeinImage::from_map_clamped(map);
            Sample::from_image(img, params.mask_threshold, params.mask_dilation)
        })
        .collect::<Result<Vec<_>>>()?;
    let n_enroll = params.samples_per_id / 2;
    let mut it = samples.into_iter();
    let identities = (0..params.identities)
        .map(|i| {
            let mut all: Vec<Sample> = it.by_ref().take(params.samples_per_id).collect();
            let probe = all.split_off(n_enroll);
            Identity {
                id: format!("{i:03}"),
                enroll: all,
                probe,
            }
        })
        .collect();
    Ok(VeinCorpus {
        params: *params,
        identities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub id: String,
    pub enroll: usize,
    pub probe: usize,
}

/// `manifest.json` at the corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: String,
    pub params: CorpusParams,
    pub identities: Vec<IdentityEntry>,
}

const SPLITS: [&str; 2] = ["enroll", "probe"];

/// Writes `<dir>/<id>/<enroll|probe>/<k>.pgm` plus `<k>.mask.pgm` and the manifest.
pub fn save_corpus(corpus: &VeinCorpus, dir: &Path) -> Result<()> {
    for ident in &corpus.identities {
        for (split, samples) in SPLITS.iter().zip([&ident.enroll, &ident.probe]) {
            let sub = dir.join(&ident.id).join(split);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (k, s) in samples.iter().enumerate() {
                save_pgm(&s.image, sub.join(format!("{k}.pgm")))?;
                save_mask(&s.mask, sub.join(format!("{k}.mask.pgm")))?;
            }
        }
    }
    let manifest = CorpusManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        params: corpus.params,
        identities: corpus
            .identities
            .iter()
            .map(|i| IdentityEntry {
                id: i.id.clone(),
                enroll: i.enroll.len(),
                probe: i.probe.len(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<VeinCorpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text)?;
    let mut seen = std::collections::HashSet::new();
    let mut identities = Vec::with_capacity(manifest.identities.len());
    for entry in &manifest.identities {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Corpus(format!("duplicate identity {}", entry.id)));
        }
        if entry.enroll == 0 || entry.probe == 0 {
            return Err(Error::Corpus(format!(
                "identity {} needs at least one enrollment and one probe image",
                entry.id
            )));
        }
        let load = |split: &str, n: usize| -> Result<Vec<Sample>> {
            let sub = dir.join(&entry.id).join(split);
            (0..n)
                .map(|k| {
                    let image = load_image(sub.join(format!("{k}.pgm")))?;
                    let mask = load_mask(sub.join(format!("{k}.mask.pgm")))?;
                    if !mask.matches(image.as_map()) {
                        return Err(Error::Corpus(format!(
                            "{}/{split}/{k}: mask size differs from image",
                            entry.id
                        )));
                    }
                    Ok(Sample { image, mask })
                })
                .collect()
        };
        identities.push(Identity {
            id: entry.id.clone(),
            enroll: load("enroll", entry.enroll)?,
            probe: load("probe", entry.probe)?,
        });
    }
    Ok(VeinCorpus {
        params: manifest.params,
        identities,
    })
}
