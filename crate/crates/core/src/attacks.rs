//! Master-vein attacks: latent variable evolution over a generator, the
//! masked and filtered multi-label PGD attack, their combination and the
//! target-count sweep.

use std::fmt::Write as _;

use log::{debug, info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{mean_score, Enrolled, Matcher};
use crate::generators::{Generator, Sample};
use crate::imaging::{convolve2d, make_kernel, FingerMask, FloatMap, KernelKind, VeinImage};
use crate::neural::CnnModel;
use crate::optim::{CmaEs, GenerationRecord};

/// Scores a candidate image; LVE maximizes it.
pub trait Objective: Sync {
    fn fitness(&self, image: &VeinImage) -> Result<f64>;
}

/// Mean matcher score of a probe against every enrolled template.
pub struct DatabaseObjective<'a, M: Matcher> {
    pub matcher: &'a M,
    pub enrolled: &'a Enrolled<M::Template>,
    pub mask_threshold: f32,
    pub mask_dilation: usize,
}

impl<M: Matcher> Objective for DatabaseObjective<'_, M> {
    fn fitness(&self, image: &VeinImage) -> Result<f64> {
        let sample = Sample::from_image(image.clone(), self.mask_threshold, self.mask_dilation)?;
        let probe = self.matcher.probe(&sample)?;
        mean_score(self.matcher, self.enrolled, &probe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LveStrategy {
    /// CMA-ES over the latent space.
    Evolve,
    /// Independent standard-normal latents, same evaluation budget.
    RandomSampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LveConfig {
    pub population: usize,
    pub iterations: usize,
    pub sigma0: f64,
    pub seed: u64,
    pub strategy: LveStrategy,
}

impl Default for LveConfig {
    fn default() -> Self {
        LveConfig {
            population: 18,
            iterations: 40,
            sigma0: 1.0,
            seed: 11,
            strategy: LveStrategy::Evolve,
        }
    }
}

/// Best candidate of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct LveGeneration {
    pub generation: usize,
    pub best_score: f64,
    pub best_latent: Vec<f64>,
    pub best_image: VeinImage,
    pub mean_score: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LveResult {
    pub best_image: VeinImage,
    pub best_latent: Vec<f64>,
    pub best_score: f64,
    pub history: Vec<LveGeneration>,
    pub trace: Vec<GenerationRecord>,
}

impl LveResult {
    /// Running maximum of the per-generation best scores.
    pub fn global_best_trace(&self) -> Vec<f64> {
        self.history
            .iter()
            .scan(f64::NEG_INFINITY, |best, g| {
                *best = best.max(g.best_score);
                Some(*best)
            })
            .collect()
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("generation,best_score,global_best,mean_score,sigma\n");
        for (g, gb) in self.history.iter().zip(self.global_best_trace()) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                g.generation, g.best_score, gb, g.mean_score, g.sigma
            );
        }
        out
    }
}

fn clamp_to(z: &[f64], bound: Option<f64>) -> Vec<f64> {
    match bound {
        Some(b) => z.iter().map(|v| v.clamp(-b, b)).collect(),
        None => z.to_vec(),
    }
}

fn evaluate<G: Generator + ?Sized, O: Objective + ?Sized>(
    generator: &G,
    objective: &O,
    latents: &[Vec<f64>],
    generation: usize,
) -> Result<Vec<(VeinImage, f64)>> {
    latents
        .par_iter()
        .enumerate()
        .map(|(candidate, z)| {
            let wrap = |e: Error| Error::Matcher {
                generation,
                candidate,
                source: Box::new(e),
            };
            let img = generator.generate(z).map_err(wrap)?;
            let s = objective.fitness(&img).map_err(wrap)?;
            if !s.is_finite() {
                return Err(wrap(Error::NonFinite("fitness".into())));
            }
            Ok((img, s))
        })
        .collect()
}

/// Latent variable evolution: each generation samples `population` latents,
/// renders them, scores each against the database and feeds the scores back
/// to CMA-ES (maximizing). Returns the global best over all generations.
pub fn lve_run<G: Generator + ?Sized, O: Objective + ?Sized>(
    generator: &G,
    objective: &O,
    cfg: &LveConfig,
) -> Result<LveResult> {
    if cfg.population < 2 || cfg.iterations == 0 {
        return Err(Error::param("population/iterations", "need population >= 2 and iterations >= 1"));
    }
    let dim = generator.latent_dim();
    let bound = generator.latent_bound();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut es = CmaEs::new(&vec![0.0; dim], cfg.sigma0, Some(cfg.population))?;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for generation in 0..cfg.iterations {
        let raw: Vec<Vec<f64>> = match cfg.strategy {
            LveStrategy::Evolve => es.ask(&mut rng),
            LveStrategy::RandomSampling => (0..cfg.population)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect(),
        };
        let latents: Vec<Vec<f64>> = raw.iter().map(|z| clamp_to(z, bound)).collect();
        let scored = evaluate(generator, objective, &latents, generation)?;
        let fitness: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
        let best = CmaEs::rank(&fitness, true)[0];
        trace.push(GenerationRecord::new(&es, &fitness, true));
        let (img, score) = scored.into_iter().nth(best).expect("nonempty population");
        history.push(LveGeneration {
            generation,
            best_score: score,
            best_latent: latents[best].clone(),
            best_image: img,
            mean_score: fitness.iter().sum::<f64>() / fitness.len() as f64,
            sigma: es.sigma(),
        });
        if cfg.strategy == LveStrategy::Evolve {
            es.tell(&raw, &fitness, true)?;
        }
        debug!("lve generation {generation}: best {score:.5}");
    }
    let top = history
        .iter()
        .enumerate()
        .fold(0, |b, (i, g)| if g.best_score > history[b].best_score { i } else { b });
    let result = LveResult {
        best_image: history[top].best_image.clone(),
        best_latent: history[top].best_latent.clone(),
        best_score: history[top].best_score,
        history,
        trace,
    };
    let running = result.global_best_trace();
    assert_eq!(running.last().copied(), Some(result.best_score));
    info!(
        "lve finished: best score {:.5} in generation {top}",
        result.best_score
    );
    Ok(result)
}

/// How many labels the target distribution covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSize {
    Count(usize),
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    RandomK,
    TopK,
}

/// Soft multi-label target with `1/k` on each chosen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub y: Vec<f64>,
    pub indices: Vec<usize>,
}

impl TargetVector {
    pub fn from_indices(n: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        let k = indices.len();
        if k < 2 || k >= n || indices.iter().any(|i| *i >= n) {
            return Err(Error::param("k", format!("need 1 < k < {n} distinct valid labels, got {k}")));
        }
        let mut y = vec![0.0; n];
        for i in &indices {
            y[*i] = 1.0 / k as f64;
        }
        Ok(TargetVector { y, indices })
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Probability mass that `probs` puts on the target labels.
    pub fn mass(&self, probs: &[f64]) -> f64 {
        self.indices.iter().map(|i| probs[*i]).sum()
    }
}

/// Turns a count or fraction into a label count with `1 < k < n`. Fractions
/// are rounded, raised to 2 and clamped below `n` (with a warning).
pub fn resolve_k(n: usize, size: TargetSize) -> Result<usize> {
    if n < 3 {
        return Err(Error::param("classes", format!("multi-label targets need at least 3 classes, got {n}")));
    }
    match size {
        TargetSize::Count(k) => {
            if k < 2 || k >= n {
                return Err(Error::param("k", format!("need 1 < k < {n}, got {k}")));
            }
            Ok(k)
        }
        TargetSize::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::param("k", format!("fraction must lie in (0, 1), got {f}")));
            }
            let k = ((f * n as f64).round() as usize).max(2);
            if k >= n {
                warn!("target fraction {f} of {n} classes clamped to k = {}", n - 1);
                return Ok(n - 1);
            }
            Ok(k)
        }
    }
}

pub fn build_target_vector<R: Rng + ?Sized>(
    n: usize,
    size: TargetSize,
    mode: TargetMode,
    class_probs: Option<&[f64]>,
    rng: &mut R,
) -> Result<TargetVector> {
    let k = resolve_k(n, size)?;
    let indices = match mode {
        TargetMode::RandomK => index::sample(rng, n, k).into_vec(),
        TargetMode::TopK => {
            let probs = class_probs.ok_or_else(|| Error::param("class_probs", "top-k mode needs class probabilities"))?;
            if probs.len() != n {
                return Err(Error::DimensionMismatch(format!("{} probabilities for {n} classes", probs.len())));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            order.truncate(k);
            order
        }
    };
    TargetVector::from_indices(n, indices)
}

/// A classifier with input gradients of a soft-target cross-entropy.
pub trait DifferentiableClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn class_probs(&self, image: &VeinImage) -> Result<Vec<f64>>;
    fn loss_and_input_grad(&self, image: &VeinImage, y: &[f64]) -> Result<(f64, FloatMap)>;
}

impl DifferentiableClassifier for CnnModel<f32> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn class_probs(&self, image: &VeinImage) -> Result<Vec<f64>> {
        CnnModel::class_probs(self, image)
    }

    fn loss_and_input_grad(&self, image: &VeinImage, y: &[f64]) -> Result<(f64, FloatMap)> {
        CnnModel::loss_and_input_grad(self, image, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Step size; `None` means `epsilon / 10`.
    pub alpha: Option<f64>,
    pub iterations: usize,
    pub kernel: KernelKind,
    pub kernel_size: usize,
    pub kernel_sigma: f32,
    pub target: TargetSize,
    pub mode: TargetMode,
    /// Rebuild top-k labels from the current image every iteration.
    pub recompute_topk: bool,
    /// Scale each step direction to unit max-norm before applying `alpha`.
    pub normalize_step: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 16.0 / 255.0,
            alpha: None,
            iterations: 100,
            kernel: KernelKind::Gaussian,
            kernel_size: 5,
            kernel_sigma: 1.0,
            target: TargetSize::Fraction(0.05),
            mode: TargetMode::TopK,
            recompute_topk: false,
            normalize_step: true,
            seed: 7,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 10.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon", "must be finite and non-negative"));
        }
        let a = self.step_size();
        if !(a > 0.0 && a.is_finite()) && self.epsilon > 0.0 {
            return Err(Error::param("alpha", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    pub image: VeinImage,
    pub target: TargetVector,
    /// Loss before every step, then after the last one.
    pub loss_trace: Vec<f64>,
    pub initial_target_mass: f64,
    pub final_target_mass: f64,
    pub linf: f64,
}

impl PgdResult {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss_trace.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

fn linf(a: &VeinImage, b: &VeinImage) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max)
}

/// Builds the target from `cfg` (top-k labels from `x0`'s predictions) and
/// runs [`pgd_attack_with_target`].
pub fn pgd_attack<C: DifferentiableClassifier + ?Sized>(
    model: &C,
    x0: &VeinImage,
    mask: &FingerMask,
    cfg: &AttackConfig,
) -> Result<PgdResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probs = model.class_probs(x0)?;
    let target = build_target_vector(model.num_classes(), cfg.target, cfg.mode, Some(&probs), &mut rng)?;
    pgd_attack_with_target(model, x0, mask, target, cfg)
}

/// Iterates `x <- clip(x - alpha (grad * K) . M)` into the L-inf ball of
/// radius epsilon around `x0` (and [0, 1]), descending the targeted loss.
pub fn pgd_attack_with_target<C: DifferentiableClassifier + ?Sized>(
    model: &C,
    x0: &VeinImage,
    mask: &FingerMask,
    target: TargetVector,
    cfg: &AttackConfig,
) -> Result<PgdResult> {
    cfg.validate()?;
    if !mask.matches(x0.as_map()) {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            x0.width(),
            x0.height()
        )));
    }
    if target.y.len() != model.num_classes() {
        return Err(Error::DimensionMismatch(format!(
            "target has {} labels, model has {}",
            target.y.len(),
            model.num_classes()
        )));
    }
    let initial_target_mass = target.mass(&model.class_probs(x0)?);
    let unchanged = |loss_trace: Vec<f64>, target: TargetVector| PgdResult {
        image: x0.clone(),
        target,
        loss_trace,
        initial_target_mass,
        final_target_mass: initial_target_mass,
        linf: 0.0,
    };
    if mask.is_empty() {
        warn!("attack mask is empty; returning the input unchanged");
        return Ok(unchanged(Vec::new(), target));
    }
    if cfg.epsilon == 0.0 {
        return Ok(unchanged(Vec::new(), target));
    }
    let kernel = make_kernel(cfg.kernel, cfg.kernel_size, cfg.kernel_sigma)?;
    let alpha = cfg.step_size() as f32;
    let eps = cfg.epsilon as f32;
    let (lo, hi): (Vec<f32>, Vec<f32>) = x0
        .pixels()
        .iter()
        .map(|v| ((v - eps).max(0.0), (v + eps).min(1.0)))
        .unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut target = target;
    let mut x = x0.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        if it > 0 && cfg.recompute_topk && cfg.mode == TargetMode::TopK {
            let probs = model.class_probs(&x)?;
            target = build_target_vector(model.num_classes(), TargetSize::Count(target.k()), TargetMode::TopK, Some(&probs), &mut rng)?;
        }
        let (loss, grad) = model.loss_and_input_grad(&x, &target.y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("attack loss at iteration {it}")));
        }
        trace.push(loss);
        let mut dir = convolve2d(&grad, &kernel)?;
        for (d, m) in dir.data_mut().iter_mut().zip(mask.bits()) {
            if !m {
                *d = 0.0;
            }
        }
        let mut scale = alpha;
        if cfg.normalize_step {
            let peak = dir.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                scale = alpha / peak;
            }
        }
        let mut next = x.into_map();
        for (((p, d), l), h) in next.data_mut().iter_mut().zip(dir.data()).zip(&lo).zip(&hi) {
            *p = (*p - scale * d).clamp(*l, *h);
        }
        x = VeinImage::try_from_map(next)?;
    }
    let (final_loss, _) = model.loss_and_input_grad(&x, &target.y)?;
    trace.push(final_loss);
    let final_target_mass = target.mass(&model.class_probs(&x)?);
    let d = linf(&x, x0);
    info!(
        "pgd: loss {:.4} -> {:.4}, target mass {:.4} -> {:.4}, linf {:.5}",
        trace[0], final_loss, initial_target_mass, final_target_mass, d
    );
    Ok(PgdResult {
        image: x,
        target,
        loss_trace: trace,
        initial_target_mass,
        final_target_mass,
        linf: d,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedResult {
    pub lve_score: f64,
    pub lve_trace: Vec<f64>,
    pub pgd: PgdResult,
}

/// PGD started from the LVE master vein, masked to its own finger region.
pub fn combined_attack<C: DifferentiableClassifier + ?Sized>(
    lve: &LveResult,
    model: &C,
    mask_threshold: f32,
    mask_dilation: usize,
    cfg: &AttackConfig,
) -> Result<CombinedResult> {
    let pgd = attack_master(&lve.best_image, model, mask_threshold, mask_dilation, cfg)?;
    Ok(CombinedResult {
        lve_score: lve.best_score,
        lve_trace: lve.global_best_trace(),
        pgd,
    })
}

/// PGD on an existing master-vein image, e.g. one loaded from disk.
pub fn attack_master<C: DifferentiableClassifier + ?Sized>(
    master: &VeinImage,
    model: &C,
    mask_threshold: f32,
    mask_dilation: usize,
    cfg: &AttackConfig,
) -> Result<PgdResult> {
    let sample = Sample::from_image(master.clone(), mask_threshold, mask_dilation)?;
    pgd_attack(model, &sample.image, &sample.mask, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub k: usize,
    pub far: f64,
    pub initial_target_mass: f64,
    pub final_target_mass: f64,
}

/// Runs the attack once per target fraction and measures each result's FAR
/// with `far_of`.
pub fn topk_sweep<C, F>(
    model: &C,
    x0: &VeinImage,
    mask: &FingerMask,
    fractions: &[f64],
    cfg: &AttackConfig,
    far_of: F,
) -> Result<Vec<SweepRow>>
where
    C: DifferentiableClassifier + ?Sized,
    F: Fn(&VeinImage) -> Result<f64>,
{
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let k = resolve_k(model.num_classes(), TargetSize::Fraction(f))?;
        let run = AttackConfig {
            target: TargetSize::Count(k),
            ..*cfg
        };
        let out = pgd_attack(model, x0, mask, &run)?;
        rows.push(SweepRow {
            fraction: f,
            k,
            far: far_of(&out.image)?,
            initial_target_mass: out.initial_target_mass,
            final_target_mass: out.final_target_mass,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,k,far,initial_target_mass,final_target_mass\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.fraction, r.k, r.far, r.initial_target_mass, r.final_target_mass
        );
    }
    out
}
