//! Gaussian process over flattened policy parameters.
//!
//! Squared-exponential ARD kernel with a pluggable mean function, the joint
//! posterior of the objective's gradient, and type-II maximum likelihood
//! fitting of the kernel hyperparameters inside uniform hyperprior boxes.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, mean_var, symmetrize};

/// Relative diagonal jitter added to `K(X, X)`, scaled by the signal variance.
pub const BASE_JITTER: f64 = 1e-8;
/// Lower floor on data-driven standard-deviation estimates.
pub const SD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyper {
    pub signal_var: f64,
    pub noise_var: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelHyper {
    pub fn new(signal_var: f64, noise_var: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(signal_var) || !ok(noise_var) || !lengthscales.iter().all(|&l| ok(l)) {
            return Err(Error::Config(format!(
                "kernel hyperparameters must be positive: σ_f²={signal_var}, σ_n²={noise_var}, ℓ={lengthscales:?}"
            )));
        }
        Ok(Self {
            signal_var,
            noise_var,
            lengthscales,
        })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[ln σ_f, ln σ_n, ln ℓ_1, …]`
    fn to_log(&self) -> Vec<f64> {
        let mut eta = vec![0.5 * self.signal_var.ln(), 0.5 * self.noise_var.ln()];
        eta.extend(self.lengthscales.iter().map(|l| l.ln()));
        eta
    }

    fn from_log(eta: &[f64]) -> Self {
        Self {
            signal_var: (2.0 * eta[0]).exp(),
            noise_var: (2.0 * eta[1]).exp(),
            lengthscales: eta[2..].iter().map(|e| e.exp()).collect(),
        }
    }

    pub fn median_lengthscale(&self) -> f64 {
        let mut ls = self.lengthscales.clone();
        ls.sort_by(f64::total_cmp);
        let n = ls.len();
        if n % 2 == 1 {
            ls[n / 2]
        } else {
            0.5 * (ls[n / 2 - 1] + ls[n / 2])
        }
    }
}

/// Closed interval used as a uniform hyperprior support (standard-deviation scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// `U[σ/3, 3σ]`
    pub fn around(sd: f64) -> Self {
        Self {
            lo: sd / 3.0,
            hi: 3.0 * sd,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{what} prior must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )))
        }
    }

    /// Geometric midpoint.
    pub fn midpoint(&self) -> f64 {
        (self.lo * self.hi).sqrt()
    }
}

/// Uniform hyperprior boxes for `σ_f`, `σ_n` and every lengthscale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPriors {
    pub signal_sd: Interval,
    pub noise_sd: Interval,
    pub lengthscale: Interval,
}

impl HyperPriors {
    pub fn validate(&self) -> Result<()> {
        self.signal_sd.validate("signal sd")?;
        self.noise_sd.validate("noise sd")?;
        self.lengthscale.validate("lengthscale")
    }

    pub fn midpoint(&self, dim: usize) -> KernelHyper {
        KernelHyper {
            signal_var: self.signal_sd.midpoint().powi(2),
            noise_var: self.noise_sd.midpoint().powi(2),
            lengthscales: vec![self.lengthscale.midpoint(); dim],
        }
    }

    fn log_box(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.signal_sd.lo.ln(), self.noise_sd.lo.ln()];
        let mut hi = vec![self.signal_sd.hi.ln(), self.noise_sd.hi.ln()];
        lo.extend(std::iter::repeat_n(self.lengthscale.lo.ln(), dim));
        hi.extend(std::iter::repeat_n(self.lengthscale.hi.ln(), dim));
        (lo, hi)
    }

    pub fn contains(&self, hyper: &KernelHyper) -> bool {
        let tol = 1e-9;
        let inside = |iv: &Interval, v: f64| v >= iv.lo * (1.0 - tol) && v <= iv.hi * (1.0 + tol);
        inside(&self.signal_sd, hyper.signal_var.sqrt())
            && inside(&self.noise_sd, hyper.noise_var.sqrt())
            && hyper
                .lengthscales
                .iter()
                .all(|&l| inside(&self.lengthscale, l))
    }
}

/// Prior mean of the GP together with its analytic gradient.
pub trait MeanFn {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantMean(pub f64);

impl MeanFn for ConstantMean {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
}

/// Noise-free part `σ_f² exp(−½ Σ (x_i − x'_i)² / σ_i²)`.
pub fn kernel_cov(x: &[f64], x2: &[f64], hyper: &KernelHyper) -> f64 {
    let q: f64 = x
        .iter()
        .zip(x2)
        .zip(&hyper.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum();
    hyper.signal_var * (-0.5 * q).exp()
}

/// Kernel between two inputs; the noise term is added only when both arguments
/// are the same dataset point.
pub fn kernel_eval(x: &[f64], x2: &[f64], hyper: &KernelHyper, same_point: bool) -> f64 {
    let noise = if same_point { hyper.noise_var } else { 0.0 };
    kernel_cov(x, x2, hyper) + noise
}

/// `∇_θ K(θ, X)` as a `D × n` matrix; column `j` is `−diag(σ⁻²)(θ − x_j) k(θ, x_j)`.
pub fn kernel_grad(theta: &[f64], xs: &[Vec<f64>], hyper: &KernelHyper) -> DMatrix<f64> {
    let d = theta.len();
    let mut g = DMatrix::zeros(d, xs.len());
    for (j, x) in xs.iter().enumerate() {
        let k = kernel_cov(theta, x, hyper);
        for i in 0..d {
            g[(i, j)] = -(theta[i] - x[i]) / hyper.lengthscales[i].powi(2) * k;
        }
    }
    g
}

/// Prior gradient covariance `∇_θ∇_θ' K(θ, θ')|_{θ'=θ} = σ_f² diag(σ⁻²)`.
pub fn kernel_hess_diag(hyper: &KernelHyper) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        hyper.dim(),
        hyper
            .lengthscales
            .iter()
            .map(|l| hyper.signal_var / (l * l)),
    ))
}

fn gram(xs: &[Vec<f64>], hyper: &KernelHyper) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| kernel_eval(&xs[i], &xs[j], hyper, i == j))
}

/// Observations retained for the GP, oldest first, with cached mean values.
#[derive(Clone, Debug, Default)]
pub struct GpDataset {
    capacity: usize,
    xs: VecDeque<Vec<f64>>,
    ys: VecDeque<f64>,
    means: Vec<f64>,
}

impl GpDataset {
    /// `capacity` is the FIFO retention limit (`N_max`).
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            ..Default::default()
        }
    }

    pub fn from_points(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> Self {
        let mut ds = Self::new(xs.len().max(1));
        for (x, y) in xs.into_iter().zip(ys) {
            ds.push(x, y);
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends an observation, evicting the oldest beyond capacity. The mean
    /// cache is invalidated.
    pub fn push(&mut self, x: Vec<f64>, y: f64) {
        self.xs.push_back(x);
        self.ys.push_back(y);
        while self.xs.len() > self.capacity {
            self.xs.pop_front();
            self.ys.pop_front();
        }
        self.means.clear();
    }

    pub fn xs(&self) -> Vec<Vec<f64>> {
        self.xs.iter().cloned().collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.ys.iter().copied().collect()
    }

    /// Recomputes `m(X)` for every retained point.
    pub fn refresh_means(&mut self, mean: &dyn MeanFn) {
        self.means = self.xs.iter().map(|x| mean.value(x)).collect();
    }

    /// Installs precomputed `m(X)` values (one per retained point).
    pub fn set_means(&mut self, means: Vec<f64>) {
        assert_eq!(means.len(), self.xs.len());
        self.means = means;
    }

    /// Cached `m(X)`; empty when stale.
    pub fn cached_means(&self) -> &[f64] {
        &self.means
    }

    /// `Y − m(X)` using the cache when fresh.
    pub fn residuals(&self, mean: &dyn MeanFn) -> Vec<f64> {
        if self.means.len() == self.ys.len() {
            self.ys.iter().zip(&self.means).map(|(y, m)| y - m).collect()
        } else {
            self.xs
                .iter()
                .zip(&self.ys)
                .map(|(x, y)| y - mean.value(x))
                .collect()
        }
    }
}

/// Gaussian posterior of `∇J(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// A GP conditioned on fixed inputs and residuals `Y − m(X)`.
#[derive(Clone, Debug)]
pub struct GpModel {
    hyper: KernelHyper,
    xs: Vec<Vec<f64>>,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn condition(xs: Vec<Vec<f64>>, residuals: &[f64], hyper: &KernelHyper) -> Result<Self> {
        if xs.len() != residuals.len() {
            return Err(Error::DimensionMismatch {
                what: "GP targets",
                expected: xs.len(),
                got: residuals.len(),
            });
        }
        if let Some(x) = xs.iter().find(|x| x.len() != hyper.dim()) {
            return Err(Error::DimensionMismatch {
                what: "GP input",
                expected: hyper.dim(),
                got: x.len(),
            });
        }
        if xs.is_empty() {
            return Ok(Self {
                hyper: hyper.clone(),
                xs,
                chol: None,
                alpha: DVector::zeros(0),
                jitter: 0.0,
            });
        }
        let k = gram(&xs, hyper);
        let (chol, jitter) = cholesky_with_jitter(&k, BASE_JITTER * hyper.signal_var)?;
        let alpha = chol.solve(&DVector::from_column_slice(residuals));
        Ok(Self {
            hyper: hyper.clone(),
            xs,
            chol: Some(chol),
            alpha,
            jitter,
        })
    }

    pub fn hyper(&self) -> &KernelHyper {
        &self.hyper
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Cholesky factor of `K(X, X) + jitter·I`, `None` for an empty dataset.
    pub fn cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.chol.as_ref()
    }

    /// Posterior mean and variance of the objective value at `x`.
    pub fn value_posterior(&self, x: &[f64], mean: &dyn MeanFn) -> (f64, f64) {
        let prior = self.hyper.signal_var;
        let Some(chol) = &self.chol else {
            return (mean.value(x), prior);
        };
        let kx = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| kernel_cov(x, xi, &self.hyper)),
        );
        let v = chol.l().solve_lower_triangular(&kx).expect("triangular solve");
        (mean.value(x) + kx.dot(&self.alpha), prior - v.dot(&v))
    }

    /// Posterior covariance of the gradient at `θ`; independent of the targets.
    pub fn gradient_covariance(&self, theta: &[f64]) -> DMatrix<f64> {
        let prior = kernel_hess_diag(&self.hyper);
        let Some(chol) = &self.chol else {
            return prior;
        };
        let g = kernel_grad(theta, &self.xs, &self.hyper);
        let v = chol
            .l()
            .solve_lower_triangular(&g.transpose())
            .expect("triangular solve");
        let mut cov = prior - v.transpose() * v;
        symmetrize(&mut cov);
        cov
    }

    /// `μ_θ = ∇m(θ) + ∇K(θ, X) K⁻¹ (Y − m(X))` and `Σ_θ`.
    pub fn gradient_posterior(&self, theta: &[f64], mean: &dyn MeanFn) -> GradientPosterior {
        let mut mu = DVector::from_vec(mean.gradient(theta));
        if self.chol.is_some() {
            mu += kernel_grad(theta, &self.xs, &self.hyper) * &self.alpha;
        }
        GradientPosterior {
            mean: mu,
            cov: self.gradient_covariance(theta),
        }
    }

    /// Data-correction part `∇K(θ, X) K⁻¹ (Y − m(X))` of the gradient mean.
    pub fn gradient_correction(&self, theta: &[f64]) -> DVector<f64> {
        if self.chol.is_none() {
            return DVector::zeros(self.hyper.dim());
        }
        kernel_grad(theta, &self.xs, &self.hyper) * &self.alpha
    }
}

/// Gradient posterior at `θ` for a dataset, mean function and hyperparameters.
pub fn posterior_gradient(
    theta: &[f64],
    dataset: &GpDataset,
    mean: &dyn MeanFn,
    hyper: &KernelHyper,
) -> Result<GradientPosterior> {
    let residuals = dataset.residuals(mean);
    let model = GpModel::condition(dataset.xs(), &residuals, hyper)?;
    Ok(model.gradient_posterior(theta, mean))
}

/// Log marginal likelihood of residuals under a zero-mean GP with `hyper`.
pub fn log_marginal_likelihood(
    xs: &[Vec<f64>],
    residuals: &[f64],
    hyper: &KernelHyper,
) -> Result<f64> {
    Ok(lml_and_grad(xs, residuals, &hyper.to_log(), false)?.0)
}

/// Value and gradient with respect to `[ln σ_f, ln σ_n, ln ℓ…]`. Jitter is
/// included in the value but not differentiated.
fn lml_and_grad(
    xs: &[Vec<f64>],
    residuals: &[f64],
    eta: &[f64],
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let hyper = KernelHyper::from_log(eta);
    let n = xs.len();
    let d = hyper.dim();
    let kf = DMatrix::from_fn(n, n, |i, j| kernel_cov(&xs[i], &xs[j], &hyper));
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += hyper.noise_var;
    }
    // No escalation here: a failing restart is simply discarded.
    let mut kj = k.clone();
    for i in 0..n {
        kj[(i, i)] += BASE_JITTER * hyper.signal_var;
    }
    let chol = Cholesky::new(kj).ok_or(Error::IllConditioned {
        jitter: BASE_JITTER * hyper.signal_var,
    })?;
    let r = DVector::from_column_slice(residuals);
    let alpha = chol.solve(&r);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    let value = -0.5 * r.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return Err(Error::IllConditioned { jitter: 0.0 });
    }
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let w = &alpha * alpha.transpose() - chol.inverse();
    let mut grad = vec![0.0; 2 + d];
    grad[0] = w.component_mul(&kf).sum();
    grad[1] = w.trace() * hyper.noise_var;
    for (dim, g) in grad[2..].iter_mut().enumerate() {
        let l2 = hyper.lengthscales[dim].powi(2);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let delta = xs[i][dim] - xs[j][dim];
                acc += w[(i, j)] * kf[(i, j)] * delta * delta / l2;
            }
        }
        *g = 0.5 * acc;
    }
    Ok((value, grad))
}

/// Result of hyperparameter fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub hyper: KernelHyper,
    pub log_likelihood: f64,
    /// True when every restart failed and the prior midpoint was returned.
    pub fell_back: bool,
}

const FIT_MAX_ITERS: usize = 150;
const STEP_INIT: f64 = 0.1;
const STEP_MIN: f64 = 1e-7;
const STEP_MAX: f64 = 1.0;

/// Projected sign-based ascent (Rprop) in log space from one start point.
/// Per-coordinate steps make it insensitive to the very different gradient
/// scales of the signal, noise and lengthscale coordinates. Returns the best
/// iterate visited.
fn ascend(
    xs: &[Vec<f64>],
    residuals: &[f64],
    start: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let p = start.len();
    let mut eta = start;
    let (mut value, mut grad) = lml_and_grad(xs, residuals, &eta, true)?;
    let mut best = (eta.clone(), value);
    let mut steps = vec![STEP_INIT; p];
    let mut prev_grad = vec![0.0; p];
    for _ in 0..FIT_MAX_ITERS {
        for i in 0..p {
            let agreement = grad[i] * prev_grad[i];
            if agreement > 0.0 {
                steps[i] = (steps[i] * 1.2).min(STEP_MAX);
            } else if agreement < 0.0 {
                steps[i] = (steps[i] * 0.5).max(STEP_MIN);
                grad[i] = 0.0;
            }
            if grad[i] != 0.0 {
                eta[i] = (eta[i] + grad[i].signum() * steps[i]).clamp(lo[i], hi[i]);
            }
        }
        prev_grad = grad;
        let pinned_or_small = (0..p).all(|i| {
            steps[i] <= STEP_MIN
                || (eta[i] <= lo[i] && prev_grad[i] < 0.0)
                || (eta[i] >= hi[i] && prev_grad[i] > 0.0)
        });
        match lml_and_grad(xs, residuals, &eta, true) {
            Ok((v, g)) => {
                value = v;
                grad = g;
            }
            // Step into a numerically bad region: back off to the best point.
            Err(_) => {
                eta = best.0.clone();
                steps.iter_mut().for_each(|s| *s = (*s * 0.5).max(STEP_MIN));
                prev_grad = vec![0.0; p];
                grad = lml_and_grad(xs, residuals, &eta, true)?.1;
                continue;
            }
        }
        if value > best.1 {
            best = (eta.clone(), value);
        }
        if pinned_or_small {
            break;
        }
    }
    Ok(best)
}

/// Maximizes the log marginal likelihood of `Y − m(X)` inside the hyperprior
/// boxes, keeping the best of `n_restarts` starts drawn uniformly in log space.
/// Ties go to the lowest restart index.
pub fn fit_hyperparameters<R: Rng + ?Sized>(
    xs: &[Vec<f64>],
    residuals: &[f64],
    priors: &HyperPriors,
    n_restarts: usize,
    rng: &mut R,
) -> Result<FitOutcome> {
    let dim = xs.first().map(|x| x.len()).unwrap_or(0);
    if xs.len() < 2 {
        return Err(Error::Config(
            "hyperparameter fitting needs at least two observations".into(),
        ));
    }
    let (lo, hi) = priors.log_box(dim);
    let starts: Vec<Vec<f64>> = (0..n_restarts.max(1))
        .map(|_| {
            lo.iter()
                .zip(&hi)
                .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
                .collect()
        })
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        if let Ok((eta, value)) = ascend(xs, residuals, start, &lo, &hi) {
            if best.as_ref().is_none_or(|(_, b)| value > *b) {
                best = Some((eta, value));
            }
        }
    }
    Ok(match best {
        Some((eta, value)) => FitOutcome {
            hyper: KernelHyper::from_log(&eta),
            log_likelihood: value,
            fell_back: false,
        },
        None => {
            log::warn!("all {n_restarts} GP restarts failed; using the hyperprior midpoint");
            let hyper = priors.midpoint(dim);
            let log_likelihood = log_marginal_likelihood(xs, residuals, &hyper).unwrap_or(f64::NAN);
            FitOutcome {
                hyper,
                log_likelihood,
                fell_back: true,
            }
        }
    })
}

/// Data-driven `σ_f` and `σ_n` hyperpriors `U[σ̂/3, 3σ̂]`.
///
/// `σ̂_n²` is the population variance of the repeated central returns and `σ̂_f²`
/// that of the mean-function residuals. Each estimate needs two samples; with
/// fewer, the corresponding box from `fallback` is kept. The lengthscale box is
/// always taken from `fallback`.
pub fn dynamic_hyperpriors(
    central_returns: &[f64],
    residuals: &[f64],
    fallback: &HyperPriors,
) -> HyperPriors {
    let sd = |xs: &[f64]| mean_var(xs).1.sqrt().max(SD_FLOOR);
    HyperPriors {
        signal_sd: if residuals.len() >= 2 {
            Interval::around(sd(residuals))
        } else {
            fallback.signal_sd
        },
        noise_sd: if central_returns.len() >= 2 {
            Interval::around(sd(central_returns))
        } else {
            fallback.noise_sd
        },
        lengthscale: fallback.lengthscale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn hyper(sf2: f64, sn2: f64, ls: &[f64]) -> KernelHyper {
        KernelHyper::new(sf2, sn2, ls.to_vec()).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
            .collect()
    }

    /// Simple quadratic mean with a known gradient.
    struct QuadMean(Vec<f64>);
    impl MeanFn for QuadMean {
        fn value(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.0).map(|(v, c)| c * v * v).sum()
        }
        fn gradient(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.0).map(|(v, c)| 2.0 * c * v).collect()
        }
    }

    #[test]
    fn kernel_examples() {
        let h = hyper(1.0, 0.1, &[1.0]);
        assert!((kernel_eval(&[0.3], &[0.3], &h, true) - 1.1).abs() < 1e-15);
        assert!(kernel_eval(&[0.0], &[1e3], &h, false) < 1e-300);
        let h2 = hyper(2.0, 0.1, &[1.0]);
        assert!((kernel_eval(&[0.0], &[1.0], &h2, false) - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel_eval(&[0.0], &[1.0], &h2, false) - 1.2131).abs() < 1e-4);
    }

    #[test]
    fn kernel_grad_examples() {
        let h = hyper(1.3, 0.1, &[0.7, 2.0]);
        let xs = vec![vec![0.2, -0.4], vec![1.0, 0.5]];
        let g = kernel_grad(&[0.2, -0.4], &xs, &h);
        assert_eq!(g.column(0).amax(), 0.0);
        let h1 = hyper(1.0, 0.0 + 1e-3, &[1.0]);
        assert!(kernel_grad(&[0.0], &[vec![1.0]], &h1)[(0, 0)] > 0.0);
    }

    #[test]
    fn kernel_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h = hyper(rng.random_range(0.5..2.0), 0.1, &[rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)]);
            let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xs = random_points(&mut rng, 3, 2, 1.0);
            let g = kernel_grad(&theta, &xs, &h);
            for (j, x) in xs.iter().enumerate() {
                for i in 0..2 {
                    let eps = 1e-6;
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    tp[i] += eps;
                    tm[i] -= eps;
                    let fd = (kernel_cov(&tp, x, &h) - kernel_cov(&tm, x, &h)) / (2.0 * eps);
                    assert!((fd - g[(i, j)]).abs() <= 1e-5 * fd.abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn kernel_hessian_examples() {
        assert_eq!(kernel_hess_diag(&hyper(1.0, 0.1, &[1.0, 1.0])), DMatrix::identity(2, 2));
        let a = kernel_hess_diag(&hyper(1.0, 0.1, &[0.5, 2.0]));
        let b = kernel_hess_diag(&hyper(3.0, 0.1, &[0.5, 2.0]));
        assert!((b - a * 3.0).amax() < 1e-12);
    }

    #[test]
    fn kernel_hessian_matches_second_differences() {
        let h = hyper(1.7, 0.1, &[0.6, 1.4]);
        let theta = [0.3, -0.2];
        let hess = kernel_hess_diag(&h);
        let eps = 1e-4;
        for i in 0..2 {
            for j in 0..2 {
                let shift = |v: &[f64], k: usize, d: f64| {
                    let mut w = v.to_vec();
                    w[k] += d;
                    w
                };
                // Mixed partial ∂²k(θ, θ')/∂θ_i ∂θ'_j at θ' = θ.
                let f = |di: f64, dj: f64| kernel_cov(&shift(&theta, i, di), &shift(&theta, j, dj), &h);
                let fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4.0 * eps * eps);
                let expected = hess[(i, j)];
                assert!((fd - expected).abs() <= 1e-3 * expected.abs().max(1e-2), "{i}{j}: {fd} vs {expected}");
            }
        }
    }

    #[test]
    fn empty_dataset_gives_prior_gradient() {
        let h = hyper(1.5, 0.1, &[0.5, 1.0]);
        let mean = QuadMean(vec![1.0, -2.0]);
        let post = posterior_gradient(&[0.3, 0.4], &GpDataset::new(5), &mean, &h).unwrap();
        assert_eq!(post.mean.as_slice(), mean.gradient(&[0.3, 0.4]).as_slice());
        assert_eq!(post.cov, kernel_hess_diag(&h));
    }

    #[test]
    fn zero_residual_gives_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = hyper(1.0, 0.05, &[0.8, 0.8]);
        let mean = QuadMean(vec![0.5, 1.5]);
        let xs = random_points(&mut rng, 6, 2, 1.0);
        let ys: Vec<f64> = xs.iter().map(|x| mean.value(x)).collect();
        let ds = GpDataset::from_points(xs, ys);
        let post = posterior_gradient(&[0.1, 0.2], &ds, &mean, &h).unwrap();
        let g = mean.gradient(&[0.1, 0.2]);
        assert!((post.mean[0] - g[0]).abs() < 1e-12 && (post.mean[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_one_point_posterior() {
        let h = hyper(1.0, 0.01, &[1.0]);
        let ds = GpDataset::from_points(vec![vec![1.0]], vec![1.0]);
        let post = posterior_gradient(&[0.0], &ds, &ConstantMean(0.0), &h).unwrap();
        let expected = (-0.5f64).exp() / 1.01;
        assert!((post.mean[0] - expected).abs() < 1e-6);
        assert!((post.mean[0] - 0.6005).abs() < 1e-4);
    }

    #[test]
    fn interpolation_with_tiny_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = hyper(1.0, 1e-10, &[0.5, 0.5]);
        let xs = random_points(&mut rng, 8, 2, 1.0);
        let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = GpModel::condition(xs.clone(), &ys, &h).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, _) = model.value_posterior(x, &ConstantMean(0.0));
            assert!((m - y).abs() < 1e-6);
        }
    }

    #[test]
    fn far_points_revert_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = hyper(2.0, 0.01, &[0.3, 0.2]);
        let xs = random_points(&mut rng, 8, 2, 1.0);
        let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mean = QuadMean(vec![1.0, 1.0]);
        let model = GpModel::condition(xs, &ys, &h).unwrap();
        let theta = [1.0 + 10.0 * 0.3 + 1.0, 0.0];
        let (m, _) = model.value_posterior(&theta, &mean);
        assert!((m - mean.value(&theta)).abs() < 1e-6 * 2f64.sqrt());
    }

    #[test]
    fn jitter_escalation_on_duplicates() {
        let h = hyper(1.0, 1e-30, &[1.0]);
        let xs = vec![vec![0.5]; 4];
        let model = GpModel::condition(xs, &[0.1, 0.2, 0.3, 0.4], &h).unwrap();
        assert!(model.jitter() >= BASE_JITTER);
    }

    #[test]
    fn fifo_retention() {
        let mut ds = GpDataset::new(3);
        for i in 0..5 {
            ds.push(vec![i as f64], i as f64);
        }
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.ys(), vec![2.0, 3.0, 4.0]);
        ds.refresh_means(&ConstantMean(1.0));
        assert_eq!(ds.cached_means(), &[1.0, 1.0, 1.0]);
        ds.push(vec![9.0], 9.0);
        assert!(ds.cached_means().is_empty());
    }

    #[test]
    fn dynamic_prior_examples() {
        let fallback = HyperPriors {
            signal_sd: Interval::new(0.1, 1.0),
            noise_sd: Interval::new(0.2, 2.0),
            lengthscale: Interval::new(0.05, 0.5),
        };
        let p = dynamic_hyperpriors(&[5.0, 5.0, 5.0], &[-1.0, 1.0], &fallback);
        assert!((p.noise_sd.lo - 1e-6 / 3.0).abs() < 1e-18);
        assert!((p.noise_sd.hi - 3e-6).abs() < 1e-18);
        assert!((p.signal_sd.lo - 1.0 / 3.0).abs() < 1e-15 && (p.signal_sd.hi - 3.0).abs() < 1e-15);
        let p = dynamic_hyperpriors(&[0.0, 2.0], &[0.5], &fallback);
        assert!((p.noise_sd.lo - 1.0 / 3.0).abs() < 1e-15 && (p.noise_sd.hi - 3.0).abs() < 1e-15);
        assert_eq!(p.signal_sd, fallback.signal_sd);
        assert_eq!(p.lengthscale, fallback.lengthscale);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = random_points(&mut rng, 10, 2, 1.0);
        let r: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eta = vec![0.1, -1.0, -0.5, 0.2];
        let (_, g) = lml_and_grad(&xs, &r, &eta, true).unwrap();
        for i in 0..eta.len() {
            let eps = 1e-6;
            let mut ep = eta.clone();
            let mut em = eta.clone();
            ep[i] += eps;
            em[i] -= eps;
            let fd = (lml_and_grad(&xs, &r, &ep, false).unwrap().0 - lml_and_grad(&xs, &r, &em, false).unwrap().0) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn fit_recovers_self_consistent_hyper() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = hyper(1.0, 0.01, &[0.4, 0.7]);
        let xs = random_points(&mut rng, 40, 2, 1.0);
        let k = gram(&xs, &truth);
        let (chol, _) = cholesky_with_jitter(&k, 1e-10).unwrap();
        let z = DVector::from_iterator(40, (0..40).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let ys = chol.l() * z;
        let priors = HyperPriors {
            signal_sd: Interval::new(0.3, 3.0),
            noise_sd: Interval::new(0.02, 0.5),
            lengthscale: Interval::new(0.1, 2.0),
        };
        let fit = fit_hyperparameters(&xs, ys.as_slice(), &priors, 32, &mut rng).unwrap();
        assert!(!fit.fell_back);
        assert!(priors.contains(&fit.hyper));
        let at_truth = log_marginal_likelihood(&xs, ys.as_slice(), &truth).unwrap();
        assert!(fit.log_likelihood >= at_truth - 1e-6, "{} < {}", fit.log_likelihood, at_truth);
    }

    #[test]
    fn pure_noise_pins_signal_to_box_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = random_points(&mut rng, 25, 2, 1.0);
        let ys: Vec<f64> = (0..25).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let priors = HyperPriors {
            signal_sd: Interval::new(1e-3, 2e-3),
            noise_sd: Interval::new(0.1, 10.0),
            lengthscale: Interval::new(0.1, 1.0),
        };
        let fit = fit_hyperparameters(&xs, &ys, &priors, 8, &mut rng).unwrap();
        let sf = fit.hyper.signal_var.sqrt();
        let at_edge = (sf - 1e-3).abs() < 1e-9 || (sf - 2e-3).abs() < 1e-9;
        assert!(at_edge, "σ_f = {sf}");
    }

    #[test]
    fn single_restart_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = random_points(&mut rng, 10, 2, 1.0);
        let ys: Vec<f64> = xs.iter().map(|x| x[0].sin()).collect();
        let priors = HyperPriors {
            signal_sd: Interval::new(0.1, 2.0),
            noise_sd: Interval::new(0.01, 0.5),
            lengthscale: Interval::new(0.1, 2.0),
        };
        let a = fit_hyperparameters(&xs, &ys, &priors, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = fit_hyperparameters(&xs, &ys, &priors, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_mean_matches_value_finite_differences(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(1..4usize);
            let n = rng.random_range(1..10usize);
            let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.5)).collect();
            let h = hyper(rng.random_range(0.3..3.0), rng.random_range(1e-3..0.3), &ls);
            let xs = random_points(&mut rng, n, d, 1.0);
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let coeffs: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean = QuadMean(coeffs);
            let model = GpModel::condition(xs, &ys, &h).unwrap();
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let post = model.gradient_posterior(&theta, &mean);
            for i in 0..d {
                let eps = 1e-5;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += eps;
                tm[i] -= eps;
                let fd = (model.value_posterior(&tp, &mean).0 - model.value_posterior(&tm, &mean).0) / (2.0 * eps);
                prop_assert!((fd - post.mean[i]).abs() <= 1e-4 * fd.abs().max(1e-2));
            }
            prop_assert!((&post.cov - post.cov.transpose()).amax() < 1e-10);
            prop_assert!(min_eigenvalue(&post.cov) >= -1e-8);
        }

        #[test]
        fn observations_shrink_gradient_covariance(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = hyper(1.0, rng.random_range(1e-3..0.2), &[0.5, 0.9]);
            let xs = random_points(&mut rng, 5, 2, 1.0);
            let extra = random_points(&mut rng, 1, 2, 1.0).remove(0);
            let theta = [0.1, -0.1];
            let before = GpModel::condition(xs.clone(), &[0.0; 5], &h).unwrap().gradient_covariance(&theta);
            let mut more = xs;
            more.push(extra);
            let after = GpModel::condition(more, &[0.0; 6], &h).unwrap().gradient_covariance(&theta);
            prop_assert!(min_eigenvalue(&(before - after)) >= -1e-8);
        }
    }
}
