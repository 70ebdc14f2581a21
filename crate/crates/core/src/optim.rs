//! (mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation, using the
//! default strategy parameters of Hansen's CMA-ES tutorial.

use std::fmt::Write as _;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EIGEN_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct CmaEs {
    dim: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    generation: usize,
}

impl CmaEs {
    /// Fresh state with `C = I` and zero paths. `lambda` defaults to
    /// `4 + floor(3 ln d)`.
    pub fn new(mean0: &[f64], sigma0: f64, lambda: Option<usize>) -> Result<Self> {
        let n = mean0.len();
        if n == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::param("sigma0", format!("must be positive and finite, got {sigma0}")));
        }
        if mean0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial mean".into()));
        }
        let nf = n as f64;
        let lambda = lambda.unwrap_or(4 + (3.0 * nf.ln()).floor() as usize);
        if lambda < 2 {
            return Err(Error::param("lambda", "population must be at least 2"));
        }
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(CmaEs {
            dim: n,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            mean: DVector::from_column_slice(mean0),
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> usize {
        self.lambda
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mu_eff(&self) -> f64 {
        self.mu_eff
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Overrides the step size (useful for degenerate-spread checks).
    pub fn set_sigma(&mut self, sigma: f64) -> Result<()> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", "must be positive and finite"));
        }
        self.sigma = sigma;
        Ok(())
    }

    /// Samples `lambda` candidates `m + sigma * B D n`.
    pub fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let bd = &self.basis * DMatrix::from_diagonal(&self.scales);
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
                let x = &self.mean + (&bd * z) * self.sigma;
                x.as_slice().to_vec()
            })
            .collect()
    }

    /// Candidate order from best to worst; ties keep candidate order.
    pub fn rank(fitness: &[f64], maximize: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..fitness.len()).collect();
        idx.sort_by(|&a, &b| {
            let o = fitness[a].total_cmp(&fitness[b]);
            if maximize {
                o.reverse()
            } else {
                o
            }
        });
        idx
    }

    /// Updates mean, paths, step size and covariance from evaluated candidates.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitness: &[f64], maximize: bool) -> Result<()> {
        if candidates.len() != self.lambda || fitness.len() != self.lambda {
            return Err(Error::DimensionMismatch(format!(
                "expected {} candidates and fitness values, got {} and {}",
                self.lambda,
                candidates.len(),
                fitness.len()
            )));
        }
        if let Some(bad) = candidates.iter().find(|c| c.len() != self.dim) {
            return Err(Error::DimensionMismatch(format!(
                "candidate of dimension {} in a {}-dimensional search",
                bad.len(),
                self.dim
            )));
        }
        if let Some(i) = fitness.iter().position(|f| !f.is_finite()) {
            return Err(Error::NonFinite(format!("fitness of candidate {i}")));
        }
        let order = Self::rank(fitness, maximize);
        let n = self.dim as f64;
        let ys: Vec<DVector<f64>> = order[..self.mu]
            .iter()
            .map(|&i| (DVector::from_column_slice(&candidates[i]) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&ys) {
            y_w += y * *w;
        }
        self.mean += &y_w * self.sigma;

        let inv_sqrt = &self.basis * DMatrix::from_diagonal(&self.scales.map(|d| 1.0 / d)) * self.basis.transpose();
        let cs = self.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + (inv_sqrt * &y_w) * (cs * (2.0 - cs) * self.mu_eff).sqrt();
        let g = (self.generation + 1) as f64;
        let ps_norm = self.p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - cs).powf(2.0 * g)).sqrt() < (1.4 + 2.0 / (n + 1.0)) * self.chi_n;
        let cc = self.c_c;
        let hs = if h_sigma { 1.0 } else { 0.0 };
        self.p_c = &self.p_c * (1.0 - cc) + &y_w * (hs * (cc * (2.0 - cc) * self.mu_eff).sqrt());
        let delta = (1.0 - hs) * cc * (2.0 - cc);

        let mut rank_mu = DMatrix::zeros(self.dim, self.dim);
        for (w, y) in self.weights.iter().zip(&ys) {
            rank_mu += (y * y.transpose()) * *w;
        }
        self.cov = &self.cov * (1.0 + self.c_1 * delta - self.c_1 - self.c_mu)
            + (&self.p_c * self.p_c.transpose()) * self.c_1
            + rank_mu * self.c_mu;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::NonFinite(format!("step size after generation {}", self.generation)));
        }
        self.generation += 1;
        self.refresh_eigen();
        Ok(())
    }

    fn refresh_eigen(&mut self) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let ok = eig.eigenvalues.iter().all(|v| v.is_finite() && *v > EIGEN_FLOOR)
            && eig.eigenvectors.iter().all(|v| v.is_finite());
        if ok {
            self.scales = eig.eigenvalues.map(f64::sqrt);
            self.basis = eig.eigenvectors;
        } else {
            warn!(
                "covariance lost positive definiteness at generation {}; resetting to identity",
                self.generation
            );
            self.cov = DMatrix::identity(self.dim, self.dim);
            self.basis = DMatrix::identity(self.dim, self.dim);
            self.scales = DVector::from_element(self.dim, 1.0);
        }
    }
}

/// One line of the optimizer trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub sigma: f64,
    pub best: f64,
    pub median: f64,
    pub mean: Vec<f64>,
}

impl GenerationRecord {
    pub fn new(state: &CmaEs, fitness: &[f64], maximize: bool) -> Self {
        let order = CmaEs::rank(fitness, maximize);
        let mut sorted: Vec<f64> = fitness.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        GenerationRecord {
            generation: state.generation(),
            sigma: state.sigma(),
            best: fitness[order[0]],
            median,
            mean: state.mean().to_vec(),
        }
    }
}

pub fn trace_csv(records: &[GenerationRecord]) -> String {
    let dim = records.first().map_or(0, |r| r.mean.len());
    let mut out = String::from("generation,sigma,best,median");
    for i in 0..dim {
        let _ = write!(out, ",mean_{i}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{},{},{},{}", r.generation, r.sigma, r.best, r.median);
        for m in &r.mean {
            let _ = write!(out, ",{m}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn minimize(
        f: impl Fn(&[f64]) -> f64,
        mean0: &[f64],
        sigma0: f64,
        budget: usize,
        seed: u64,
    ) -> (f64, CmaEs) {
        let mut es = CmaEs::new(mean0, sigma0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = f64::INFINITY;
        let mut evals = 0;
        while evals + es.lambda() <= budget {
            let xs = es.ask(&mut rng);
            let fit: Vec<f64> = xs.iter().map(|x| f(x)).collect();
            evals += xs.len();
            best = fit.iter().copied().fold(best, f64::min);
            es.tell(&xs, &fit, false).unwrap();
            assert_spd(es.covariance());
        }
        (best, es)
    }

    pub(crate) fn assert_spd(c: &DMatrix<f64>) {
        let asym = (c - c.transpose()).abs().max();
        assert!(asym <= 1e-9, "asymmetry {asym}");
        let eig = SymmetricEigen::new(c.clone());
        assert!(eig.eigenvalues.iter().all(|v| *v > 0.0));
    }

    pub(crate) fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    pub(crate) fn rosenbrock(x: &[f64]) -> f64 {
        x.windows(2)
            .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
            .sum()
    }

    #[test]
    fn default_population_sizes() {
        let es = CmaEs::new(&[0.0; 10], 1.0, None).unwrap();
        assert_eq!(es.lambda(), 10);
        assert_eq!(es.mu(), 5);
        let es = CmaEs::new(&[0.0; 24], 1.0, Some(18)).unwrap();
        assert_eq!((es.lambda(), es.mu()), (18, 9));
        let w = es.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.windows(2).all(|p| p[0] > p[1]));
    }

    #[test]
    fn invalid_construction() {
        assert!(CmaEs::new(&[0.0; 3], 0.0, None).is_err());
        assert!(CmaEs::new(&[], 1.0, None).is_err());
        assert!(CmaEs::new(&[0.0; 3], 1.0, Some(1)).is_err());
    }

    #[test]
    fn tiny_sigma_collapses_candidates() {
        let mut es = CmaEs::new(&[0.3, -1.0, 2.0], 1.0, None).unwrap();
        es.set_sigma(1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for x in es.ask(&mut rng) {
            for (a, b) in x.iter().zip(es.mean()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identity_sampling_covariance() {
        let es = CmaEs::new(&[0.0; 3], 0.7, Some(1000)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        let mut n = 0.0;
        for _ in 0..100 {
            for x in es.ask(&mut rng) {
                let v = DVector::from_column_slice(&x);
                acc += &v * v.transpose();
                n += 1.0;
            }
        }
        let cov = acc / n;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.49 } else { 0.0 };
                assert!((cov[(i, j)] - want).abs() < 0.05 * 0.49, "{i},{j}: {}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let a = minimize(sphere, &[1.0; 4], 0.5, 400, 3).1;
        let b = minimize(sphere, &[1.0; 4], 0.5, 400, 3).1;
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.sigma(), b.sigma());
    }

    #[test]
    fn fitness_shift_leaves_trajectory_unchanged() {
        let a = minimize(sphere, &[1.0; 5], 0.5, 500, 4).1;
        let b = minimize(|x| sphere(x) + 17.0, &[1.0; 5], 0.5, 500, 4).1;
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.covariance(), b.covariance());
    }

    #[test]
    fn ties_rank_by_index() {
        assert_eq!(CmaEs::rank(&[1.0, 2.0, 1.0, 2.0], true), vec![1, 3, 0, 2]);
        assert_eq!(CmaEs::rank(&[1.0, 2.0, 1.0, 2.0], false), vec![0, 2, 1, 3]);
    }

    #[test]
    fn sphere_converges() {
        let (best, _) = minimize(sphere, &[1.0; 10], 0.5, 2000, 5);
        assert!(best < 1e-10, "{best}");
    }

    #[test]
    fn maximizing_moves_mean_toward_point() {
        let p = [0.5, -2.0, 1.5, 0.0];
        let mut es = CmaEs::new(&[3.0; 4], 0.3, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dist = |m: &[f64]| sphere(&m.iter().zip(&p).map(|(a, b)| a - b).collect::<Vec<_>>());
        let start = dist(es.mean());
        for _ in 0..10 {
            let xs = es.ask(&mut rng);
            let fit: Vec<f64> = xs.iter().map(|x| -dist(x)).collect();
            es.tell(&xs, &fit, true).unwrap();
        }
        assert!(dist(es.mean()) < 0.5 * start);
    }

    #[test]
    fn rosenbrock_converges() {
        let (best, _) = minimize(rosenbrock, &[0.0; 5], 0.5, 30000, 8);
        assert!(best < 1e-6, "{best}");
    }

    #[test]
    fn tell_validates_input() {
        let mut es = CmaEs::new(&[0.0; 2], 1.0, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = es.ask(&mut rng);
        let mut fit = vec![1.0; xs.len()];
        fit[2] = f64::NAN;
        assert!(matches!(es.tell(&xs, &fit, false), Err(Error::NonFinite(_))));
        assert!(es.tell(&xs[1..], &fit[1..], false).is_err());
    }

    #[test]
    fn trace_has_header_and_rows() {
        let es = CmaEs::new(&[0.0; 2], 1.0, Some(4)).unwrap();
        let rec = GenerationRecord::new(&es, &[3.0, 1.0, 2.0, 4.0], true);
        assert_eq!((rec.best, rec.median), (4.0, 2.5));
        let csv = trace_csv(&[rec]);
        assert_eq!(csv.lines().next().unwrap(), "generation,sigma,best,median,mean_0,mean_1");
        assert_eq!(csv.lines().count(), 2);
    }
}
