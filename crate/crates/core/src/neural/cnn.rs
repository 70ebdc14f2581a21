use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::{self, Shape};
use super::{real, Real};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, resize_bilinear_adjoint, FloatMap, VeinImage};

pub const INPUT_WIDTH: usize = 64;
pub const INPUT_HEIGHT: usize = 48;
pub const EMBED_DIM: usize = 64;
/// Width of each class-weight row (the embedding dimension).
pub const CLASS_DIM: usize = EMBED_DIM;
pub(crate) const CONV_CHANNELS: [usize; 3] = [8, 16, 32];
pub(crate) const KERNEL: usize = 3;
pub(crate) const FLAT_DIM: usize = 32 * (INPUT_HEIGHT / 8) * (INPUT_WIDTH / 8);

/// Number of ops in the feature chain (3 x conv/relu/pool, then dense).
pub const NUM_OPS: usize = 10;

const STD_FLOOR: f64 = 1e-3;

fn resample(image: &VeinImage) -> FloatMap {
    let src = image.as_map();
    if src.width() == INPUT_WIDTH && src.height() == INPUT_HEIGHT {
        src.clone()
    } else {
        resize_bilinear(src, INPUT_WIDTH, INPUT_HEIGHT)
    }
}

/// Mean and floored standard deviation of the input grid.
fn moments(data: &[f32]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = data.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, (var + STD_FLOOR * STD_FLOOR).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Relu,
    Pool,
    Dense,
}

pub fn op_kind(op: usize) -> LayerKind {
    match op {
        9 => LayerKind::Dense,
        _ => match op % 3 {
            0 => LayerKind::Conv,
            1 => LayerKind::Relu,
            _ => LayerKind::Pool,
        },
    }
}

/// Shape of activation `i` (0 = input, `NUM_OPS` = embedding).
pub fn act_shape(i: usize) -> Shape {
    match i {
        0 => Shape::new(1, INPUT_HEIGHT, INPUT_WIDTH),
        10 => Shape::new(EMBED_DIM, 1, 1),
        _ => {
            let block = (i - 1) / 3;
            let c = CONV_CHANNELS[block];
            let pooled = (i - 1) % 3 == 2;
            let scale = 1 << (block + pooled as usize);
            Shape::new(c, INPUT_HEIGHT / scale, INPUT_WIDTH / scale)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Real> {
    pub out_c: usize,
    pub in_c: usize,
    pub k: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T: Real> {
    pub out: usize,
    pub inp: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Fixed-topology embedding network with an additive-angular-margin head.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T: Real = f32> {
    pub convs: Vec<ConvLayer<T>>,
    pub dense: DenseLayer<T>,
    /// `num_classes x CLASS_DIM`, rows kept at unit length.
    pub class_weights: Vec<T>,
    pub num_classes: usize,
    /// Angular margin in radians.
    pub margin: T,
    pub scale: T,
}

/// Embedding vector produced by the feature chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f32>);

impl Embedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Activations of a forward pass starting at op `start`.
#[derive(Debug, Clone)]
pub struct ActivationCache<T: Real> {
    pub start: usize,
    /// `acts[j]` is activation `start + j`; the last one is the embedding.
    pub acts: Vec<Vec<T>>,
    pool_idx: Vec<Option<Vec<u32>>>,
}

impl<T: Real> ActivationCache<T> {
    pub fn embedding(&self) -> &[T] {
        self.acts.last().expect("nonempty")
    }

    pub fn activation(&self, i: usize) -> &[T] {
        &self.acts[i - self.start]
    }
}

#[derive(Debug, Clone)]
pub struct CnnGrads<T: Real> {
    pub convs: Vec<(Vec<T>, Vec<T>)>,
    pub dense: (Vec<T>, Vec<T>),
    pub class_weights: Vec<T>,
}

impl<T: Real> CnnGrads<T> {
    fn zeros_like(m: &CnnModel<T>) -> Self {
        CnnGrads {
            convs: m
                .convs
                .iter()
                .map(|c| (vec![T::zero(); c.weight.len()], vec![T::zero(); c.bias.len()]))
                .collect(),
            dense: (
                vec![T::zero(); m.dense.weight.len()],
                vec![T::zero(); m.dense.bias.len()],
            ),
            class_weights: vec![T::zero(); m.class_weights.len()],
        }
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::new();
        for (w, b) in &mut self.convs {
            v.push(w);
            v.push(b);
        }
        v.push(&mut self.dense.0);
        v.push(&mut self.dense.1);
        v.push(&mut self.class_weights);
        v
    }

    fn add(&mut self, other: &CnnGrads<T>) {
        let mut theirs = other.clone();
        for (a, b) in self.buffers_mut().into_iter().zip(theirs.buffers_mut()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }
}

/// Head evaluation for one embedding.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Real> {
    pub cosines: Vec<T>,
    pub logits: Vec<T>,
    pub loss: T,
    pub grad_embedding: Vec<T>,
    pub grad_class_weights: Option<Vec<T>>,
}

fn l2(v: &[impl Real]) -> f64 {
    v.iter()
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Real> CnnModel<T> {
    /// Seeded He/Xavier initialization with random unit class rows.
    pub fn init(num_classes: usize, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param("num_classes", "need at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<T> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    real(z * std)
                })
                .collect()
        };
        let mut convs = Vec::new();
        let mut in_c = 1;
        for &out_c in &CONV_CHANNELS {
            let fan_in = (in_c * KERNEL * KERNEL) as f64;
            convs.push(ConvLayer {
                out_c,
                in_c,
                k: KERNEL,
                weight: normal(out_c * in_c * KERNEL * KERNEL, (2.0 / fan_in).sqrt()),
                bias: vec![T::zero(); out_c],
            });
            in_c = out_c;
        }
        let dense = DenseLayer {
            out: EMBED_DIM,
            inp: FLAT_DIM,
            weight: normal(EMBED_DIM * FLAT_DIM, (1.0 / FLAT_DIM as f64).sqrt()),
            bias: vec![T::zero(); EMBED_DIM],
        };
        let class_weights = normal(num_classes * CLASS_DIM, 1.0);
        let mut model = CnnModel {
            convs,
            dense,
            class_weights,
            num_classes,
            margin: real(margin),
            scale: real(scale),
        };
        model.normalize_class_weights();
        model.validate()?;
        Ok(model)
    }

    /// Checks the fixed topology and finiteness of every parameter.
    pub fn validate(&self) -> Result<()> {
        if self.convs.len() != 3 {
            return Err(Error::InvalidWeights(format!(
                "expected 3 conv layers, found {}",
                self.convs.len()
            )));
        }
        let mut in_c = 1;
        for (i, c) in self.convs.iter().enumerate() {
            let expect = (CONV_CHANNELS[i], in_c, KERNEL);
            if (c.out_c, c.in_c, c.k) != expect
                || c.weight.len() != c.out_c * c.in_c * c.k * c.k
                || c.bias.len() != c.out_c
            {
                return Err(Error::InvalidWeights(format!("conv layer {i} has wrong shape")));
            }
            in_c = c.out_c;
        }
        let d = &self.dense;
        if d.out != EMBED_DIM || d.inp != FLAT_DIM || d.weight.len() != d.out * d.inp || d.bias.len() != d.out {
            return Err(Error::InvalidWeights("dense layer has wrong shape".into()));
        }
        if self.num_classes < 2 || self.class_weights.len() != self.num_classes * CLASS_DIM {
            return Err(Error::InvalidWeights("class weight matrix has wrong shape".into()));
        }
        let m = self.margin.to_f64().unwrap_or(f64::NAN);
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
            return Err(Error::param("margin", format!("must lie in [0, pi/2), got {m}")));
        }
        if !self.all_finite() {
            return Err(Error::NonFinite("model weights".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let conv_ok = self
            .convs
            .iter()
            .all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()));
        conv_ok
            && self.dense.weight.iter().chain(&self.dense.bias).all(|v| v.is_finite())
            && self.class_weights.iter().all(|v| v.is_finite())
            && self.margin.is_finite()
            && self.scale.is_finite()
    }

    /// Rescales class rows to unit length (rows already within a few ulps of
    /// unit length are left untouched).
    pub fn normalize_class_weights(&mut self) {
        let tol = T::epsilon() * real(4.0);
        for row in self.class_weights.chunks_mut(CLASS_DIM) {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n > T::zero() && (n - T::one()).abs() > tol {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> CnnModel<U> {
        let cv = |v: &[T]| -> Vec<U> { v.iter().map(|x| real(x.to_f64().unwrap_or(f64::NAN))).collect() };
        CnnModel {
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer {
                    out_c: c.out_c,
                    in_c: c.in_c,
                    k: c.k,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                })
                .collect(),
            dense: DenseLayer {
                out: self.dense.out,
                inp: self.dense.inp,
                weight: cv(&self.dense.weight),
                bias: cv(&self.dense.bias),
            },
            class_weights: cv(&self.class_weights),
            num_classes: self.num_classes,
            margin: real(self.margin.to_f64().unwrap_or(f64::NAN)),
            scale: real(self.scale.to_f64().unwrap_or(f64::NAN)),
        }
    }

    /// Resamples an image to the network input grid and standardizes it to
    /// zero mean and unit variance.
    pub fn prepare_input(image: &VeinImage) -> Vec<T> {
        let small = resample(image);
        let (mean, std) = moments(small.data());
        small.data().iter().map(|v| real((*v as f64 - mean) / std)).collect()
    }

    fn apply_op(&self, op: usize, act: &[T]) -> (Vec<T>, Option<Vec<u32>>) {
        let shape = act_shape(op);
        match op_kind(op) {
            LayerKind::Conv => {
                let c = &self.convs[op / 3];
                (layers::conv_forward(act, shape, &c.weight, &c.bias, c.out_c, c.k), None)
            }
            LayerKind::Relu => (layers::relu_forward(act), None),
            LayerKind::Pool => {
                let (out, idx) = layers::maxpool_forward(act, shape);
                (out, Some(idx))
            }
            LayerKind::Dense => (
                layers::dense_forward(act, &self.dense.weight, &self.dense.bias, self.dense.out),
                None,
            ),
        }
    }

    /// Runs the feature chain from activation `start` onwards.
    pub fn forward_from(&self, start: usize, act: Vec<T>) -> Result<ActivationCache<T>> {
        if act.len() != act_shape(start).len() {
            return Err(Error::DimensionMismatch(format!(
                "activation {start} needs {} values, got {}",
                act_shape(start).len(),
                act.len()
            )));
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let mut acts = vec![act];
        let mut pool_idx = vec![None; NUM_OPS];
        for op in start..NUM_OPS {
            let (next, idx) = self.apply_op(op, acts.last().expect("nonempty"));
            pool_idx[op] = idx;
            acts.push(next);
        }
        Ok(ActivationCache {
            start,
            acts,
            pool_idx,
        })
    }

    pub fn forward(&self, input: Vec<T>) -> Result<ActivationCache<T>> {
        self.forward_from(0, input)
    }

    /// Back-propagates `grad_embedding` through the cached chain. Returns the
    /// gradient of every cached activation (index-aligned with `cache.acts`);
    /// the input gradient is skipped when `need_input_grad` is false.
    pub fn backward(
        &self,
        cache: &ActivationCache<T>,
        grad_embedding: &[T],
        mut grads: Option<&mut CnnGrads<T>>,
        need_input_grad: bool,
    ) -> Vec<Vec<T>> {
        let n = cache.acts.len();
        let mut out = vec![Vec::new(); n];
        out[n - 1] = grad_embedding.to_vec();
        for op in (cache.start..NUM_OPS).rev() {
            let j = op - cache.start;
            let input = &cache.acts[j];
            let g = &out[j + 1];
            let want_in = need_input_grad || op > cache.start;
            let gin = match op_kind(op) {
                LayerKind::Conv => {
                    let li = op / 3;
                    let c = &self.convs[li];
                    let pg = grads
                        .as_deref_mut()
                        .map(|gr| {
                            let (w, b) = &mut gr.convs[li];
                            (w.as_mut_slice(), b.as_mut_slice())
                        });
                    layers::conv_backward(input, act_shape(op), &c.weight, c.out_c, c.k, g, pg, want_in)
                }
                LayerKind::Relu => layers::relu_backward(input, g),
                LayerKind::Pool => {
                    let idx = cache.pool_idx[op].as_ref().expect("pool indices cached");
                    layers::maxpool_backward(idx, g, input.len())
                }
                LayerKind::Dense => {
                    let pg = grads
                        .as_deref_mut()
                        .map(|gr| (gr.dense.0.as_mut_slice(), gr.dense.1.as_mut_slice()));
                    layers::dense_backward(input, &self.dense.weight, g, pg)
                }
            };
            out[j] = gin;
        }
        out
    }

    /// Margin head: cosine logits, soft-target cross-entropy and gradients.
    /// Every class with positive target mass receives the angular margin.
    pub fn head(&self, embedding: &[T], target: &[f64], want_weight_grad: bool) -> Result<HeadOutput<T>> {
        let n = self.num_classes;
        if target.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "target has {} entries for {n} classes",
                target.len()
            )));
        }
        if target.iter().any(|v| !(*v >= 0.0)) || (target.iter().sum::<f64>() - 1.0).abs() > 1e-4 {
            return Err(Error::param("y", "target must be a probability distribution"));
        }
        let norm = embedding.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::param("embedding", "zero or non-finite embedding has no angle"));
        }
        let e_hat: Vec<T> = embedding.iter().map(|v| *v / norm).collect();
        let (sin_m, cos_m) = self.margin.sin_cos();
        let s = self.scale;
        let one = T::one();
        let floor: T = real(1e-12);

        let mut w_hat = Vec::with_capacity(n * CLASS_DIM);
        let mut w_norm = Vec::with_capacity(n);
        let mut cosines = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut dfdc = Vec::with_capacity(n);
        for j in 0..n {
            let row = &self.class_weights[j * CLASS_DIM..(j + 1) * CLASS_DIM];
            let wn = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if !(wn > T::zero()) {
                return Err(Error::NonFinite(format!("class weight row {j}")));
            }
            let start = w_hat.len();
            w_hat.extend(row.iter().map(|v| *v / wn));
            let c = e_hat
                .iter()
                .zip(&w_hat[start..])
                .map(|(a, b)| *a * *b)
                .sum::<T>()
                .max(-one)
                .min(one);
            w_norm.push(wn);
            cosines.push(c);
            if target[j] > 0.0 {
                let sin_t = (one - c * c).max(floor).sqrt();
                logits.push(s * (c * cos_m - sin_t * sin_m));
                dfdc.push(cos_m + c * sin_m / sin_t);
            } else {
                logits.push(s * c);
                dfdc.push(one);
            }
        }
        let lf: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let mx = lf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + lf.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
        let loss: f64 = target
            .iter()
            .zip(&lf)
            .filter(|(y, _)| **y > 0.0)
            .map(|(y, z)| -y * (z - lse))
            .sum();
        if !loss.is_finite() {
            return Err(Error::NonFinite("margin loss".into()));
        }
        let dc: Vec<T> = (0..n)
            .map(|j| {
                let p = (lf[j] - lse).exp();
                real::<T>(p - target[j]) * s * dfdc[j]
            })
            .collect();
        let mut d_ehat = vec![T::zero(); CLASS_DIM];
        for j in 0..n {
            for (d, w) in d_ehat.iter_mut().zip(&w_hat[j * CLASS_DIM..(j + 1) * CLASS_DIM]) {
                *d += dc[j] * *w;
            }
        }
        let proj = e_hat.iter().zip(&d_ehat).map(|(a, b)| *a * *b).sum::<T>();
        let grad_embedding = d_ehat
            .iter()
            .zip(&e_hat)
            .map(|(d, e)| (*d - *e * proj) / norm)
            .collect();
        let grad_class_weights = want_weight_grad.then(|| {
            let mut gw = vec![T::zero(); n * CLASS_DIM];
            for j in 0..n {
                let wh = &w_hat[j * CLASS_DIM..(j + 1) * CLASS_DIM];
                let proj = wh.iter().zip(&e_hat).map(|(w, e)| *w * *e).sum::<T>();
                for ((g, w), e) in gw[j * CLASS_DIM..(j + 1) * CLASS_DIM].iter_mut().zip(wh).zip(&e_hat) {
                    *g = dc[j] * (*e - *w * proj) / w_norm[j];
                }
            }
            gw
        });
        Ok(HeadOutput {
            cosines,
            logits,
            loss: real(loss),
            grad_embedding,
            grad_class_weights,
        })
    }

    /// Cosine logits `s * cos(theta_j)` without margin.
    pub fn class_logits(&self, embedding: &[T]) -> Result<Vec<f64>> {
        let e: Vec<f32> = embedding.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect();
        arcface_logits(&Embedding(e), self, None)
    }

    /// Loss and its exact gradient w.r.t. the input pixels, mapped back through
    /// the input resampling to the image's own resolution.
    pub fn loss_and_input_grad(&self, image: &VeinImage, target: &[f64]) -> Result<(f64, FloatMap)> {
        let cache = self.forward(Self::prepare_input(image))?;
        let head = self.head(cache.embedding(), target, false)?;
        let grads = self.backward(&cache, &head.grad_embedding, None, true);
        let (_, std) = moments(resample(image).data());
        let y: Vec<f64> = cache.acts[0].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let gy: Vec<f64> = grads[0].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let n = gy.len() as f64;
        let g_mean = gy.iter().sum::<f64>() / n;
        let gy_mean = gy.iter().zip(&y).map(|(g, y)| g * y).sum::<f64>() / n;
        let g: Vec<f32> = gy
            .iter()
            .zip(&y)
            .map(|(g, y)| ((g - g_mean - y * gy_mean) / std) as f32)
            .collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input gradient".into()));
        }
        let small = FloatMap::new(INPUT_WIDTH, INPUT_HEIGHT, g)?;
        let full = if image.width() == INPUT_WIDTH && image.height() == INPUT_HEIGHT {
            small
        } else {
            resize_bilinear_adjoint(&small, image.width(), image.height())
        };
        Ok((head.loss.to_f64().unwrap_or(f64::NAN), full))
    }
}

impl CnnModel<f32> {
    pub fn embed(&self, image: &VeinImage) -> Result<Embedding> {
        Ok(self.cnn_forward(image)?.0)
    }

    /// Forward pass returning the embedding and the activation cache.
    pub fn cnn_forward(&self, image: &VeinImage) -> Result<(Embedding, ActivationCache<f32>)> {
        if !self.all_finite() {
            return Err(Error::NonFinite("model weights".into()));
        }
        let cache = self.forward(Self::prepare_input(image))?;
        Ok((Embedding(cache.embedding().to_vec()), cache))
    }

    /// Inference-time class probabilities `softmax(s cos theta)`.
    pub fn class_probs(&self, image: &VeinImage) -> Result<Vec<f64>> {
        let e = self.embed(image)?;
        Ok(softmax(&arcface_logits(&e, self, None)?))
    }
}

/// Logits of the margin head. With `target_class` set that class gets
/// `s cos(theta + m)`; every other class (or all, without a target) `s cos theta`.
pub fn arcface_logits<T: Real>(
    embedding: &Embedding,
    model: &CnnModel<T>,
    target_class: Option<usize>,
) -> Result<Vec<f64>> {
    let e: Vec<f64> = embedding.0.iter().map(|v| *v as f64).collect();
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::param("embedding", "zero or non-finite embedding has no angle"));
    }
    if let Some(t) = target_class {
        if t >= model.num_classes {
            return Err(Error::param("target_class", format!("{t} >= {}", model.num_classes)));
        }
    }
    let m = model.margin.to_f64().unwrap_or(f64::NAN);
    if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
        return Err(Error::param("margin", format!("must lie in [0, pi/2), got {m}")));
    }
    let s = model.scale.to_f64().unwrap_or(f64::NAN);
    Ok(model
        .class_weights
        .chunks(CLASS_DIM)
        .enumerate()
        .map(|(j, row)| {
            let wn = l2(row);
            let c = (row
                .iter()
                .zip(&e)
                .map(|(w, x)| w.to_f64().unwrap_or(f64::NAN) * x)
                .sum::<f64>()
                / (wn * norm))
                .clamp(-1.0, 1.0);
            if Some(j) == target_class {
                s * (c.acos() + m).cos()
            } else {
                s * c
            }
        })
        .collect())
}

pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings of length {} and {}",
            a.0.len(),
            b.0.len()
        )));
    }
    let (na, nb) = (l2(&a.0), l2(&b.0));
    if !(na > 0.0 && nb > 0.0) || !(na.is_finite() && nb.is_finite()) {
        return Err(Error::param("embedding", "cosine of a zero vector is undefined"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| *x as f64 * *y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub margin: f64,
    pub scale: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.05,
            margin: 0.3,
            scale: 16.0,
            batch_size: 16,
            momentum: 0.9,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedCnn {
    pub model: CnnModel<f32>,
    pub log: Vec<EpochLog>,
}

/// Mini-batch SGD with momentum on the margin cross-entropy.
pub fn train_cnn(dataset: &[(VeinImage, usize)], cfg: &TrainConfig) -> Result<TrainedCnn> {
    let num_classes = dataset.iter().map(|(_, l)| *l + 1).max().unwrap_or(0);
    let mut per_class = vec![0usize; num_classes];
    for (_, l) in dataset {
        per_class[*l] += 1;
    }
    if num_classes < 2 || per_class.iter().any(|c| *c < 2) {
        return Err(Error::param(
            "dataset",
            "need at least 2 identities with at least 2 samples each",
        ));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::param("epochs/batch_size", "must be positive"));
    }
    let mut model = CnnModel::<f32>::init(num_classes, cfg.margin, cfg.scale, cfg.seed)?;
    let inputs: Vec<Vec<f32>> = dataset.iter().map(|(img, _)| CnnModel::<f32>::prepare_input(img)).collect();
    let mut velocity = CnnGrads::zeros_like(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let lr = cfg.lr as f32;
    let mu = cfg.momentum as f32;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0f64; dataset.len()];
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, bool, CnnGrads<f32>)>> = batch
                .par_iter()
                .map(|&i| {
                    let label = dataset[i].1;
                    let mut target = vec![0.0; num_classes];
                    target[label] = 1.0;
                    let cache = model.forward(inputs[i].clone())?;
                    let head = model.head(cache.embedding(), &target, true)?;
                    let mut g = CnnGrads::zeros_like(&model);
                    model.backward(&cache, &head.grad_embedding, Some(&mut g), false);
                    g.class_weights = head.grad_class_weights.expect("requested");
                    let pred = argmax(&head.cosines);
                    Ok((head.loss as f64, pred == label, g))
                })
                .collect();
            let mut total = CnnGrads::zeros_like(&model);
            for (&i, r) in batch.iter().zip(results) {
                let (loss, ok, g) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss });
                }
                losses[i] = loss;
                correct += ok as usize;
                total.add(&g);
            }
            let inv = 1.0 / batch.len() as f32;
            let mut params = param_buffers(&mut model);
            for ((p, v), g) in params
                .iter_mut()
                .zip(velocity.buffers_mut())
                .zip(total.buffers_mut())
            {
                for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g.iter()) {
                    *vv = mu * *vv + *gv * inv;
                    *pv -= lr * *vv;
                }
            }
            model.normalize_class_weights();
            if !model.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
        }
        let mean_loss = losses.iter().sum::<f64>() / dataset.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_loss,
            train_accuracy: correct as f64 / dataset.len() as f64,
        };
        debug!("epoch {epoch}: loss {mean_loss:.4}, acc {:.3}", entry.train_accuracy);
        log.push(entry);
    }
    if let Some(last) = log.last() {
        info!(
            "trained cnn: {} epochs, final loss {:.4}, train accuracy {:.3}",
            cfg.epochs, last.mean_loss, last.train_accuracy
        );
    }
    Ok(TrainedCnn { model, log })
}

fn param_buffers<T: Real>(m: &mut CnnModel<T>) -> Vec<&mut Vec<T>> {
    let mut v: Vec<&mut Vec<T>> = Vec::new();
    for c in &mut m.convs {
        v.push(&mut c.weight);
        v.push(&mut c.bias);
    }
    v.push(&mut m.dense.weight);
    v.push(&mut m.dense.bias);
    v.push(&mut m.class_weights);
    v
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> VeinImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VeinImage::new(w, h, (0..w * h).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn zero_model(n: usize) -> CnnModel<f32> {
        let mut m = CnnModel::<f32>::init(n, 0.3, 16.0, 1).unwrap();
        for c in &mut m.convs {
            c.weight.iter_mut().for_each(|v| *v = 0.0);
            c.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        m.dense.weight.iter_mut().for_each(|v| *v = 0.0);
        m.dense.bias.iter_mut().for_each(|v| *v = 0.0);
        m
    }

    /// Independent forward pass: plain nested loops, f64, no shared helpers.
    fn naive_embedding(m: &CnnModel<f32>, input: &[f32]) -> Vec<f64> {
        let mut act: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let (mut c, mut h, mut w) = (1usize, INPUT_HEIGHT, INPUT_WIDTH);
        for layer in &m.convs {
            let mut out = vec![0.0f64; layer.out_c * h * w];
            for o in 0..layer.out_c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = layer.bias[o] as f64;
                        for i in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = x as isize + kx as isize - 1;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                        acc += layer.weight[((o * c + i) * 3 + ky) * 3 + kx] as f64
                                            * act[(i * h + sy as usize) * w + sx as usize];
                                    }
                                }
                            }
                        }
                        out[(o * h + y) * w + x] = acc.max(0.0);
                    }
                }
            }
            c = layer.out_c;
            let mut pooled = vec![0.0f64; c * (h / 2) * (w / 2)];
            for ch in 0..c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                best = best.max(out[(ch * h + 2 * y + dy) * w + 2 * x + dx]);
                            }
                        }
                        pooled[(ch * (h / 2) + y) * (w / 2) + x] = best;
                    }
                }
            }
            act = pooled;
            h /= 2;
            w /= 2;
        }
        (0..EMBED_DIM)
            .map(|o| {
                m.dense.bias[o] as f64
                    + (0..FLAT_DIM)
                        .map(|i| m.dense.weight[o * FLAT_DIM + i] as f64 * act[i])
                        .sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn shapes_follow_topology() {
        assert_eq!(act_shape(0), Shape::new(1, 48, 64));
        assert_eq!(act_shape(1), Shape::new(8, 48, 64));
        assert_eq!(act_shape(3), Shape::new(8, 24, 32));
        assert_eq!(act_shape(6), Shape::new(16, 12, 16));
        assert_eq!(act_shape(9), Shape::new(32, 6, 8));
        assert_eq!(act_shape(9).len(), FLAT_DIM);
        assert_eq!(act_shape(10).len(), EMBED_DIM);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let m = zero_model(4);
        let e = m.embed(&random_image(320, 240, 1)).unwrap();
        assert!(e.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let m = CnnModel::<f32>::init(5, 0.3, 16.0, 2).unwrap();
        let img = random_image(320, 240, 2);
        assert_eq!(m.embed(&img).unwrap(), m.embed(&img).unwrap());
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut m = CnnModel::<f32>::init(5, 0.3, 16.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for c in &mut m.convs {
            c.bias.iter_mut().for_each(|b| *b = rng.random::<f32>() * 0.2 - 0.1);
        }
        let img = random_image(64, 48, 3);
        let e = m.embed(&img).unwrap();
        let px = img.pixels();
        let mean = px.iter().map(|v| *v as f64).sum::<f64>() / px.len() as f64;
        let var = px.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / px.len() as f64;
        let std = (var + 1e-6).sqrt();
        let standardized: Vec<f32> = px.iter().map(|v| ((*v as f64 - mean) / std) as f32).collect();
        let want = naive_embedding(&m, &standardized);
        for (a, b) in e.0.iter().zip(&want) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn margin_zero_unit_scale_gives_cosines() {
        let mut m = CnnModel::<f32>::init(4, 0.0, 1.0, 4).unwrap();
        m.margin = 0.0;
        let e = Embedding((0..EMBED_DIM).map(|i| (i as f32 * 0.37).sin()).collect());
        let logits = arcface_logits(&e, &m, Some(1)).unwrap();
        for (j, row) in m.class_weights.chunks(CLASS_DIM).enumerate() {
            let c = cosine_score(&e, &Embedding(row.to_vec())).unwrap();
            assert!((logits[j] - c).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_embedding_gets_margin_logit() {
        let m = CnnModel::<f32>::init(3, 0.5, 64.0, 5).unwrap();
        let e = Embedding(m.class_weights[CLASS_DIM..2 * CLASS_DIM].to_vec());
        let logits = arcface_logits(&e, &m, Some(1)).unwrap();
        assert!((logits[1] - 64.0 * 0.5f64.cos()).abs() < 1e-4);
    }

    #[test]
    fn margin_lowers_target_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let m = 0.1 + rng.random::<f64>() * 0.5;
            let theta = 1e-3 + rng.random::<f64>() * (std::f64::consts::FRAC_PI_2 - m - 2e-3);
            assert!((theta + m).cos() < theta.cos());
        }
        let model = CnnModel::<f32>::init(3, 0.4, 10.0, 6).unwrap();
        let e = Embedding((0..EMBED_DIM).map(|i| ((i * 7) as f32).cos()).collect());
        let plain = arcface_logits(&e, &model, None).unwrap();
        let with = arcface_logits(&e, &model, Some(2)).unwrap();
        let theta = (plain[2] / 10.0).acos();
        if theta > 0.0 && theta < std::f64::consts::FRAC_PI_2 - 0.4 {
            assert!(with[2] < plain[2]);
        }
        assert_eq!(with[0], plain[0]);
    }

    #[test]
    fn zero_embedding_rejected() {
        let m = CnnModel::<f32>::init(3, 0.4, 10.0, 7).unwrap();
        assert!(arcface_logits(&Embedding(vec![0.0; EMBED_DIM]), &m, None).is_err());
        assert!(m.head(&vec![0.0; EMBED_DIM], &[1.0, 0.0, 0.0], false).is_err());
    }

    #[test]
    fn one_hot_without_margin_is_plain_cross_entropy() {
        let mut m = CnnModel::<f64>::init(4, 0.0, 8.0, 8).unwrap();
        m.margin = 0.0;
        let e: Vec<f64> = (0..EMBED_DIM).map(|i| (i as f64 * 0.11).cos()).collect();
        let plain = m.head(&e, &[0.25; 4], false).unwrap();
        let best = argmax(&plain.logits);
        let mut y = vec![0.0; 4];
        y[best] = 1.0;
        let out = m.head(&e, &y, false).unwrap();
        let z: Vec<f64> = out.logits.clone();
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((out.loss - (lse - z[best])).abs() < 1e-12);
    }

    #[test]
    fn uniform_target_loss_bounded_by_log_n() {
        let m = CnnModel::<f64>::init(6, 0.3, 16.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let e: Vec<f64> = (0..EMBED_DIM).map(|_| rng.random::<f64>() - 0.5).collect();
            let out = m.head(&e, &[1.0 / 6.0; 6], false).unwrap();
            assert!(out.loss >= (6.0f64).ln() - 1e-12);
        }
    }

    #[test]
    fn target_must_be_distribution() {
        let m = CnnModel::<f64>::init(3, 0.3, 16.0, 10).unwrap();
        let e = vec![1.0; EMBED_DIM];
        assert!(m.head(&e, &[0.5, 0.6, 0.0], false).is_err());
        assert!(m.head(&e, &[1.5, -0.5, 0.0], false).is_err());
        assert!(m.head(&e, &[1.0, 0.0], false).is_err());
    }

    #[test]
    fn loss_grows_with_margin() {
        let mut m = CnnModel::<f64>::init(5, 0.0, 16.0, 11).unwrap();
        // embedding close to class 0 so theta_0 stays small
        let mut e: Vec<f64> = m.class_weights[..CLASS_DIM].to_vec();
        e[0] += 0.3;
        let y = [1.0, 0.0, 0.0, 0.0, 0.0];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..8 {
            m.margin = k as f64 * 0.1;
            let loss = m.head(&e, &y, false).unwrap().loss;
            assert!(loss >= prev - 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn cosine_cases() {
        let mut a = vec![0.0f32; 8];
        a[0] = 1.0;
        let mut b = a.clone();
        b[1] = 1.0;
        let a = Embedding(a);
        let b = Embedding(b);
        assert!((cosine_score(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = Embedding(a.0.iter().map(|v| -v).collect());
        assert!((cosine_score(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((cosine_score(&a, &b).unwrap() - 0.5f64.sqrt()).abs() < 1e-7);
        assert!(cosine_score(&a, &Embedding(vec![0.0; 8])).is_err());
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a = Embedding((0..EMBED_DIM).map(|_| rng.random::<f32>() - 0.5).collect());
            let b = Embedding((0..EMBED_DIM).map(|_| rng.random::<f32>() - 0.5).collect());
            let alpha = 0.01 + rng.random::<f32>() * 100.0;
            let sa = Embedding(a.0.iter().map(|v| v * alpha).collect());
            assert!((cosine_score(&sa, &b).unwrap() - cosine_score(&a, &b).unwrap()).abs() <= 1e-6);
        }
    }

    #[test]
    fn tiny_dataset_rejected() {
        let img = random_image(64, 48, 13);
        let ds = vec![(img.clone(), 0), (img.clone(), 0), (img, 1)];
        assert!(train_cnn(&ds, &TrainConfig::default()).is_err());
    }

    fn toy_dataset() -> Vec<(VeinImage, usize)> {
        (0..8)
            .map(|i| {
                let label = i % 2;
                let px = (0..64 * 48)
                    .map(|p| {
                        let (x, y) = (p % 64, p / 64);
                        let stripe = if label == 0 { y % 12 < 3 } else { x % 12 < 3 };
                        if stripe { 0.2 + 0.01 * i as f32 } else { 0.9 }
                    })
                    .collect();
                (VeinImage::new(64, 48, px).unwrap(), label)
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train_cnn(&ds, &cfg).unwrap();
        let init = CnnModel::<f32>::init(2, cfg.margin, cfg.scale, cfg.seed).unwrap();
        assert_eq!(out.model, init);
        let first = out.log[0].mean_loss;
        assert!(out.log.iter().all(|l| l.mean_loss == first));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ds = toy_dataset();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train_cnn(&ds, &cfg).unwrap();
        let b = train_cnn(&ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.log.last().unwrap().mean_loss < a.log[0].mean_loss);
        for row in a.model.class_weights.chunks(CLASS_DIM) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let model = CnnModel::<f32>::init(4, 0.3, 16.0, 14).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let input: Vec<f64> = (0..act_shape(0).len()).map(|_| rng.random::<f64>()).collect();
        let target = [0.1, 0.6, 0.3, 0.0];
        let loss_from = |i: usize, a: Vec<f64>| {
            let c = model.forward_from(i, a).unwrap();
            model.head(c.embedding(), &target, false).unwrap().loss
        };
        let cache = model.forward(input).unwrap();
        let head = model.head(cache.embedding(), &target, false).unwrap();
        let grads = model.backward(&cache, &head.grad_embedding, None, true);
        for i in [0, 2, 3, 9, 10] {
            let act = cache.acts[i].clone();
            for _ in 0..10 {
                // zeros after a ReLU form tied pooling windows with no derivative
                let p = loop {
                    let p = rng.random_range(0..act.len());
                    if act[p] != 0.0 {
                        break p;
                    }
                };
                let h = 1e-6;
                let mut up = act.clone();
                up[p] += h;
                let mut dn = act.clone();
                dn[p] -= h;
                let fd = (loss_from(i, up) - loss_from(i, dn)) / (2.0 * h);
                let g = grads[i][p];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-4 || (g - fd).abs() < 1e-9, "act {i} idx {p}: {g} vs {fd}");
            }
        }
    }

    #[test]
    fn full_resolution_gradient_matches_finite_differences() {
        let model = CnnModel::<f32>::init(3, 0.3, 16.0, 15).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (w, h) = (96, 72);
        // multiples of 2^-12 so that +-2^-10 steps are exact in f32
        let px: Vec<f32> = (0..w * h).map(|_| rng.random_range(400..3700) as f32 / 4096.0).collect();
        let img = VeinImage::new(w, h, px).unwrap();
        let target = [0.5, 0.0, 0.5];
        let (_, grad) = model.loss_and_input_grad(&img, &target).unwrap();
        let step = 1.0 / 1024.0;
        let loss_at = |p: usize, d: f32| {
            let mut v = img.pixels().to_vec();
            v[p] += d;
            model.loss_and_input_grad(&VeinImage::new(w, h, v).unwrap(), &target).unwrap().0
        };
        let base = loss_at(0, 0.0);
        let (mut worst, mut checked) = (0.0f64, 0);
        while checked < 50 {
            let p = rng.random_range(0..w * h);
            let (up, dn) = (loss_at(p, step), loss_at(p, -step));
            let (right, left) = ((up - base) / step as f64, (base - dn) / step as f64);
            // a ReLU or pooling switch inside the stencil makes the one-sided slopes disagree
            if (right - left).abs() > 2e-3 * right.abs().max(left.abs()) {
                continue;
            }
            let fd = (up - dn) / (2.0 * step as f64);
            let g = grad.data()[p] as f64;
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
            checked += 1;
        }
        assert!(worst <= 1e-3, "{worst}");
    }
}
