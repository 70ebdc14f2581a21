//! Matching systems, score matrices, EER threshold calibration and the
//! false-acceptance measurements for zero-effort impostors and master probes.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{Sample, VeinCorpus};
use crate::imaging::{random_crop_origin, PARTIAL_SIZE};
use crate::miura::{max_curvature, miura_match, MiuraParams, VeinPattern};
use crate::neural::{cosine_score, CnnModel, Embedding};

/// Whether probes are matched whole or as random `PARTIAL_SIZE` crops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Full,
    Partial,
}

/// A recognition system: builds templates from enrollment samples and
/// compares prepared probes against them.
pub trait Matcher: Sync {
    type Template: Send + Sync;
    type Probe: Send + Sync;

    fn name(&self) -> String;
    fn template(&self, sample: &Sample) -> Result<Self::Template>;
    fn probe(&self, sample: &Sample) -> Result<Self::Probe>;
    fn score(&self, probe: &Self::Probe, template: &Self::Template) -> Result<f64>;
}

/// Maximum-curvature extraction with sliding-overlap matching.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MiuraMatcher {
    pub params: MiuraParams,
}

impl Matcher for MiuraMatcher {
    type Template = VeinPattern;
    type Probe = VeinPattern;

    fn name(&self) -> String {
        "miura".into()
    }

    fn template(&self, sample: &Sample) -> Result<VeinPattern> {
        max_curvature(&sample.image, &sample.mask, self.params.sigma)
    }

    fn probe(&self, sample: &Sample) -> Result<VeinPattern> {
        max_curvature(&sample.image, &sample.mask, self.params.sigma)
    }

    fn score(&self, probe: &VeinPattern, template: &VeinPattern) -> Result<f64> {
        let full = probe.width() == template.width() && probe.height() == template.height();
        let (cw, ch) = if full {
            (self.params.cw, self.params.ch)
        } else {
            (self.params.partial_cw, self.params.partial_ch)
        };
        Ok(miura_match(probe, template, cw, ch)?.value)
    }
}

/// Cosine similarity between CNN embeddings.
#[derive(Debug, Clone)]
pub struct CnnMatcher {
    pub model: CnnModel<f32>,
}

impl Matcher for CnnMatcher {
    type Template = Embedding;
    type Probe = Embedding;

    fn name(&self) -> String {
        "cnn".into()
    }

    fn template(&self, sample: &Sample) -> Result<Embedding> {
        self.model.embed(&sample.image)
    }

    fn probe(&self, sample: &Sample) -> Result<Embedding> {
        self.model.embed(&sample.image)
    }

    fn score(&self, probe: &Embedding, template: &Embedding) -> Result<f64> {
        cosine_score(probe, template)
    }
}

/// Enrolled templates, one list per identity.
#[derive(Debug, Clone)]
pub struct Enrolled<T> {
    pub ids: Vec<String>,
    pub templates: Vec<Vec<T>>,
}

impl<T> Enrolled<T> {
    pub fn template_count(&self) -> usize {
        self.templates.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.templates.iter().flatten()
    }
}

pub fn enroll<M: Matcher>(matcher: &M, corpus: &VeinCorpus) -> Result<Enrolled<M::Template>> {
    let templates = corpus
        .identities
        .par_iter()
        .map(|ident| ident.enroll.iter().map(|s| matcher.template(s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(Enrolled {
        ids: corpus.identities.iter().map(|i| i.id.clone()).collect(),
        templates,
    })
}

/// Crops image and mask at the same random `PARTIAL_SIZE` window.
pub fn partial_crop<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let (x, y) = random_crop_origin(sample.image.width(), sample.image.height(), PARTIAL_SIZE, PARTIAL_SIZE, rng)?;
    Ok(Sample {
        image: sample.image.crop(x, y, PARTIAL_SIZE, PARTIAL_SIZE)?,
        mask: sample.mask.crop(x, y, PARTIAL_SIZE, PARTIAL_SIZE)?,
    })
}

fn prepare<R: Rng + ?Sized>(sample: &Sample, mode: MatchMode, rng: &mut R) -> Result<Sample> {
    match mode {
        MatchMode::Full => Ok(sample.clone()),
        MatchMode::Partial => partial_crop(sample, rng),
    }
}

/// One probe-versus-template comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub probe_id: String,
    pub probe_index: usize,
    pub template_id: String,
    pub template_index: usize,
    pub score: f64,
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreMatrix {
    pub entries: Vec<ScoreEntry>,
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreMatrix {
    /// True when the corpus had a single identity and no impostor pairs exist.
    pub fn impostor_empty(&self) -> bool {
        self.impostor.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe_id,probe_index,template_id,template_index,score,genuine\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.probe_id, e.probe_index, e.template_id, e.template_index, e.score, e.genuine as u8
            );
        }
        out
    }
}

/// Scores every probe against every enrolled template. Partial-mode crops are
/// drawn from `rng` in corpus order before the parallel scoring.
pub fn score_matrix<M: Matcher, R: Rng + ?Sized>(
    matcher: &M,
    corpus: &VeinCorpus,
    enrolled: &Enrolled<M::Template>,
    mode: MatchMode,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    let mut probes = Vec::new();
    for (pi, ident) in corpus.identities.iter().enumerate() {
        for (k, s) in ident.probe.iter().enumerate() {
            probes.push((pi, k, prepare(s, mode, rng)?));
        }
    }
    let rows = probes
        .par_iter()
        .map(|(pi, k, s)| {
            let p = matcher.probe(s)?;
            let mut row = Vec::with_capacity(enrolled.template_count());
            for (ti, temps) in enrolled.templates.iter().enumerate() {
                for (tk, t) in temps.iter().enumerate() {
                    row.push(ScoreEntry {
                        probe_id: corpus.identities[*pi].id.clone(),
                        probe_index: *k,
                        template_id: enrolled.ids[ti].clone(),
                        template_index: tk,
                        score: matcher.score(&p, t)?,
                        genuine: ti == *pi,
                    });
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<ScoreEntry> = rows.into_iter().flatten().collect();
    let genuine = entries.iter().filter(|e| e.genuine).map(|e| e.score).collect();
    let impostor: Vec<f64> = entries.iter().filter(|e| !e.genuine).map(|e| e.score).collect();
    if impostor.is_empty() {
        warn!("score matrix has no impostor pairs (single identity)");
    }
    Ok(ScoreMatrix {
        entries,
        genuine,
        impostor,
    })
}

/// Operating point chosen by [`calibrate_threshold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub eer: f64,
}

fn check_scores(scores: &[f64], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::param("scores", format!("{what} scores are empty")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{what} scores")));
    }
    Ok(())
}

/// Fraction of scores at or above the threshold.
pub fn compute_far(impostor: &[f64], threshold: f64) -> Result<f64> {
    check_scores(impostor, "impostor")?;
    Ok(impostor.iter().filter(|s| **s >= threshold).count() as f64 / impostor.len() as f64)
}

/// Fraction of genuine scores below the threshold.
pub fn compute_frr(genuine: &[f64], threshold: f64) -> Result<f64> {
    check_scores(genuine, "genuine")?;
    Ok(genuine.iter().filter(|s| **s < threshold).count() as f64 / genuine.len() as f64)
}

/// Equal-error-rate threshold: among the intervals between consecutive
/// distinct scores, picks the one minimizing `|FAR - FRR|` (ties go to the
/// lower FAR) and returns its midpoint.
pub fn calibrate_threshold(genuine: &[f64], impostor: &[f64]) -> Result<Calibration> {
    check_scores(genuine, "genuine")?;
    check_scores(impostor, "impostor")?;
    let mut cuts: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    // candidate i represents thresholds in (cuts[i-1], cuts[i]]; the last one
    // lies above every score
    let candidate = |i: usize| -> f64 {
        match i {
            0 => cuts[0],
            i if i == cuts.len() => cuts[i - 1] + 1e-6,
            i => 0.5 * (cuts[i - 1] + cuts[i]),
        }
    };
    let mut best: Option<Calibration> = None;
    for i in 0..=cuts.len() {
        let t = candidate(i);
        let far = compute_far(impostor, t)?;
        let frr = compute_frr(genuine, t)?;
        let c = Calibration {
            threshold: t,
            far,
            frr,
            eer: 0.5 * (far + frr),
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let (gap, bgap) = ((far - frr).abs(), (b.far - b.frr).abs());
                gap < bgap || (gap == bgap && far < b.far)
            }
        };
        if better {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Result of presenting a single probe to every enrolled identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterOutcome {
    pub far: f64,
    pub accepted: Vec<String>,
    /// Best score per identity, in enrollment order.
    pub best_scores: Vec<f64>,
}

/// FAR of one master probe: the fraction of identities (optionally skipping
/// one) for which any template scores at or above `threshold`.
pub fn master_far<M: Matcher, R: Rng + ?Sized>(
    matcher: &M,
    enrolled: &Enrolled<M::Template>,
    master: &Sample,
    threshold: f64,
    mode: MatchMode,
    exclude: Option<usize>,
    rng: &mut R,
) -> Result<MasterOutcome> {
    let probe_sample = prepare(master, mode, rng)?;
    let probe = matcher.probe(&probe_sample)?;
    let best_scores = enrolled
        .templates
        .par_iter()
        .map(|temps| {
            temps
                .iter()
                .map(|t| matcher.score(&probe, t))
                .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let considered: Vec<usize> = (0..best_scores.len()).filter(|i| Some(*i) != exclude).collect();
    if considered.is_empty() {
        return Err(Error::param("enrolled", "no identities to attack"));
    }
    let accepted: Vec<String> = considered
        .iter()
        .filter(|i| best_scores[**i] >= threshold)
        .map(|i| enrolled.ids[*i].clone())
        .collect();
    Ok(MasterOutcome {
        far: accepted.len() as f64 / considered.len() as f64,
        accepted,
        best_scores,
    })
}

/// Mean score of a prepared probe over every template in the database.
pub fn mean_score<M: Matcher>(matcher: &M, enrolled: &Enrolled<M::Template>, probe: &M::Probe) -> Result<f64> {
    let n = enrolled.template_count();
    if n == 0 {
        return Err(Error::param("database", "no enrolled templates"));
    }
    let mut total = 0.0;
    for t in enrolled.iter() {
        total += matcher.score(probe, t)?;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreSummary {
    pub fn of(scores: &[f64]) -> Self {
        let count = scores.len();
        if count == 0 {
            return ScoreSummary {
                count,
                mean: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
            };
        }
        ScoreSummary {
            count,
            mean: scores.iter().sum::<f64>() / count as f64,
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterResult {
    pub attack: String,
    pub far: f64,
    pub accepted: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub mode: MatchMode,
    pub seed: u64,
    pub calibration: Calibration,
    pub genuine: ScoreSummary,
    pub impostor: ScoreSummary,
    pub impostor_far: f64,
    pub masters: Vec<MasterResult>,
}

/// Plain-text grid with one row per system and one column per attack.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut attacks: Vec<String> = Vec::new();
    for r in reports {
        for m in &r.masters {
            if !attacks.contains(&m.attack) {
                attacks.push(m.attack.clone());
            }
        }
    }
    let mut header = vec!["system".to_string(), "mode".into(), "threshold".into(), "impostor".into()];
    header.extend(attacks.iter().cloned());
    let mut rows = vec![header];
    for r in reports {
        let mode = match r.mode {
            MatchMode::Full => "full",
            MatchMode::Partial => "partial",
        };
        let mut row = vec![
            r.system.clone(),
            mode.to_string(),
            format!("{:.4}", r.calibration.threshold),
            format!("{:.2}%", 100.0 * r.impostor_far),
        ];
        for a in &attacks {
            row.push(match r.masters.iter().find(|m| &m.attack == a) {
                Some(m) => format!("{:.2}%", 100.0 * m.far),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, w))| if c < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
