//! Information acquisition for local gradient estimation.
//!
//! The objective is maximized, so the "descent" quantities of the MPD
//! vocabulary are computed in the ascent convention: `prob_descent` is the
//! probability that the directional derivative along `v` is positive and
//! `descent_direction` is the most probable ascent direction `Σ⁻¹μ / ‖Σ⁻¹μ‖`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::Result;
use crate::gpcore::{kernel_cov, kernel_grad, GpDataset, GpModel, GradientPosterior, KernelHyper, MeanFn};
use crate::linalg::{cholesky_with_jitter, spd_solve};

/// Added to the directional variance before normalizing.
pub const VARIANCE_EPS: f64 = 1e-12;

/// `Φ(vᵀμ / √(vᵀΣv + ε))`.
pub fn prob_descent(v: &DVector<f64>, post: &GradientPosterior) -> f64 {
    let mean = v.dot(&post.mean);
    let var = (v.transpose() * &post.cov * v)[0].max(0.0);
    Normal::standard().cdf(mean / (var + VARIANCE_EPS).sqrt())
}

/// Unit vector along `Σ⁻¹μ`; the zero vector when `‖μ‖ < 1e−12`.
pub fn descent_direction(post: &GradientPosterior) -> Result<DVector<f64>> {
    if post.mean.norm() < 1e-12 {
        return Ok(DVector::zeros(post.mean.len()));
    }
    let nu = spd_solve(&post.cov, &post.mean)?;
    let n = nu.norm();
    Ok(if n > 0.0 { nu / n } else { nu })
}

/// Gradient covariance at `θ` after adding `z` to the inputs (no target needed).
pub fn fantasy_gradient_cov(
    theta: &[f64],
    dataset: &GpDataset,
    z: &[f64],
    hyper: &KernelHyper,
) -> Result<DMatrix<f64>> {
    let mut xs = dataset.xs();
    xs.push(z.to_vec());
    let zeros = vec![0.0; xs.len()];
    Ok(GpModel::condition(xs, &zeros, hyper)?.gradient_covariance(theta))
}

/// `μ_θᵀ (Σ_θ^{fant(z)})⁻¹ μ_θ` by direct recomputation.
pub fn acquisition_value(
    z: &[f64],
    theta: &[f64],
    dataset: &GpDataset,
    mean: &dyn MeanFn,
    hyper: &KernelHyper,
) -> Result<f64> {
    let model = GpModel::condition(dataset.xs(), &dataset.residuals(mean), hyper)?;
    let mu = model.gradient_posterior(theta, mean).mean;
    let cov = fantasy_gradient_cov(theta, dataset, z, hyper)?;
    Ok(mu.dot(&spd_solve(&cov, &mu)?))
}

/// Precomputed state for evaluating the acquisition at many candidates.
///
/// Adding `z` changes the gradient covariance by a rank-one term,
/// `Σ_fant = Σ − c cᵀ / s`, with `c = ∇k(θ, z) − ∇K(θ, X) K⁻¹ k(X, z)` and
/// `s = k(z, z) + σ_n² − k(X, z)ᵀ K⁻¹ k(X, z)`; Sherman–Morrison then gives
/// `α(z) = μᵀΣ⁻¹μ + (cᵀΣ⁻¹μ)² / (s − cᵀΣ⁻¹c)`.
pub struct Acquirer<'a> {
    model: &'a GpModel,
    theta: Vec<f64>,
    mu: DVector<f64>,
    grad_kx: DMatrix<f64>,
    sigma_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    sigma_inv_mu: DVector<f64>,
    base: f64,
}

impl<'a> Acquirer<'a> {
    pub fn new(model: &'a GpModel, theta: &[f64], mean: &dyn MeanFn) -> Result<Self> {
        let post = model.gradient_posterior(theta, mean);
        let scale = post.cov.diagonal().amax().max(f64::MIN_POSITIVE);
        let (sigma_chol, _) = cholesky_with_jitter(&post.cov, 1e-12 * scale)?;
        let sigma_inv_mu = sigma_chol.solve(&post.mean);
        Ok(Self {
            model,
            theta: theta.to_vec(),
            base: post.mean.dot(&sigma_inv_mu),
            grad_kx: kernel_grad(theta, model.inputs(), model.hyper()),
            mu: post.mean,
            sigma_chol,
            sigma_inv_mu,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn gradient_mean(&self) -> &DVector<f64> {
        &self.mu
    }

    /// `μᵀΣ⁻¹μ` without any fantasy point.
    pub fn base_value(&self) -> f64 {
        self.base
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let hyper = self.model.hyper();
        let mut c = kernel_grad(&self.theta, &[z.to_vec()], hyper).column(0).into_owned();
        let mut s = hyper.signal_var + hyper.noise_var + self.model.jitter();
        if let Some(chol) = self.model.cholesky() {
            let kxz = DVector::from_iterator(
                self.model.inputs().len(),
                self.model.inputs().iter().map(|x| kernel_cov(x, z, hyper)),
            );
            let kinv_k = chol.solve(&kxz);
            c -= &self.grad_kx * &kinv_k;
            s -= kxz.dot(&kinv_k);
        }
        let sigma_inv_c = self.sigma_chol.solve(&c);
        let denom = s - c.dot(&sigma_inv_c);
        let num = c.dot(&self.sigma_inv_mu).powi(2);
        if num == 0.0 {
            return self.base;
        }
        self.base + num / denom.max(f64::MIN_POSITIVE)
    }
}

/// Multi-start compass search for `argmax α(z)` in the box `θ ± radius`.
///
/// Every start is polled along ± each coordinate, halving the step on failure.
/// Each local result is at least as good as its start; the best one wins with
/// ties resolved toward the lowest start index.
pub fn maximize_acquisition<R: Rng + ?Sized>(
    acq: &Acquirer<'_>,
    radius: f64,
    n_starts: usize,
    rng: &mut R,
) -> Vec<f64> {
    let theta = acq.theta();
    let d = theta.len();
    let lo: Vec<f64> = theta.iter().map(|t| t - radius).collect();
    let hi: Vec<f64> = theta.iter().map(|t| t + radius).collect();
    let starts: Vec<Vec<f64>> = (0..n_starts.max(1))
        .map(|_| (0..d).map(|i| rng.random_range(lo[i]..=hi[i])).collect())
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let (z, v) = compass_search(acq, start, &lo, &hi, radius);
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((z, v));
        }
    }
    best.expect("at least one start").0
}

const COMPASS_MAX_POLLS: usize = 200;

fn compass_search(
    acq: &Acquirer<'_>,
    mut z: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    radius: f64,
) -> (Vec<f64>, f64) {
    let mut value = acq.value(&z);
    let mut step = 0.25 * radius;
    let min_step = 1e-4 * radius;
    for _ in 0..COMPASS_MAX_POLLS {
        if step < min_step {
            break;
        }
        let mut improved = false;
        for i in 0..z.len() {
            for sign in [1.0, -1.0] {
                let mut cand = z.clone();
                cand[i] = (cand[i] + sign * step).clamp(lo[i], hi[i]);
                let v = acq.value(&cand);
                if v > value {
                    z = cand;
                    value = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (z, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpcore::ConstantMean;
    use crate::linalg::min_eigenvalue;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper(d: usize) -> KernelHyper {
        KernelHyper::new(1.0, 0.05, vec![0.5; d]).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GpDataset {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ys = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        GpDataset::from_points(xs, ys)
    }

    fn random_posterior(rng: &mut ChaCha8Rng, d: usize) -> GradientPosterior {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        GradientPosterior {
            mean: DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
            cov: &a * a.transpose() + DMatrix::identity(d, d) * 0.1,
        }
    }

    #[test]
    fn prob_descent_examples() {
        let post = GradientPosterior {
            mean: DVector::from_vec(vec![0.6, 0.8]),
            cov: DMatrix::identity(2, 2),
        };
        let v = post.mean.normalize();
        let expected = Normal::standard().cdf(1.0 / (1.0 + VARIANCE_EPS).sqrt());
        assert!((prob_descent(&v, &post) - expected).abs() < 1e-15);
        assert!((prob_descent(&v, &post) + prob_descent(&-v, &post) - 1.0).abs() < 1e-12);
        let zero = GradientPosterior {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        assert_eq!(prob_descent(&DVector::from_vec(vec![1.0, 3.0]), &zero), 0.5);
    }

    #[test]
    fn direction_examples() {
        let post = GradientPosterior {
            mean: DVector::from_vec(vec![1.0, 1.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 100.0])),
        };
        let nu = descent_direction(&post).unwrap();
        let n = (1.0f64 + 1e-4).sqrt();
        assert!((nu[0] - 1.0 / n).abs() < 1e-9 && (nu[1] - 0.01 / n).abs() < 1e-9);
        assert!((nu[0] - 0.99995).abs() < 1e-5 && (nu[1] - 0.0099995).abs() < 1e-7);
        let iso = GradientPosterior {
            mean: DVector::from_vec(vec![3.0, -4.0]),
            cov: DMatrix::identity(2, 2),
        };
        let nu = descent_direction(&iso).unwrap();
        assert!((nu - DVector::from_vec(vec![0.6, -0.8])).amax() < 1e-9);
        let flat = GradientPosterior {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        assert_eq!(descent_direction(&flat).unwrap(), DVector::zeros(2));
    }

    #[test]
    fn direction_beats_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = rng.random_range(1..6);
            let post = random_posterior(&mut rng, d);
            let nu = descent_direction(&post).unwrap();
            let best = prob_descent(&nu, &post);
            for _ in 0..1000 {
                let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)).normalize();
                assert!(prob_descent(&u, &post) <= best + 1e-12);
            }
        }
    }

    #[test]
    fn fantasy_covariance_is_target_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_dataset(&mut rng, 6, 2);
        let h = hyper(2);
        let theta = [0.1, 0.2];
        let z = [0.3, -0.4];
        let fant = fantasy_gradient_cov(&theta, &ds, &z, &h).unwrap();
        let mut xs = ds.xs();
        xs.push(z.to_vec());
        let mut ys = ds.ys();
        ys.push(12.5);
        let real = crate::gpcore::posterior_gradient(&theta, &GpDataset::from_points(xs, ys), &ConstantMean(0.3), &h)
            .unwrap()
            .cov;
        assert!((fant - real).amax() < 1e-10);
    }

    #[test]
    fn fantasy_information_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_dataset(&mut rng, 5, 2);
        let h = hyper(2);
        let theta = [0.0, 0.0];
        let before = GpModel::condition(ds.xs(), &ds.ys(), &h).unwrap().gradient_covariance(&theta);
        for _ in 0..50 {
            let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let after = fantasy_gradient_cov(&theta, &ds, &z, &h).unwrap();
            assert!(min_eigenvalue(&(&before - after)) >= -1e-8);
        }
        // Duplicate of an existing input.
        let dup = ds.xs()[0].clone();
        let after = fantasy_gradient_cov(&theta, &ds, &dup, &h).unwrap();
        assert!(min_eigenvalue(&(&before - after)) >= -1e-8);
        // Far away: nothing changes.
        let far = fantasy_gradient_cov(&theta, &ds, &[100.0, 100.0], &h).unwrap();
        assert!((far - before).amax() < 1e-10);
    }

    #[test]
    fn rank_one_update_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let d = rng.random_range(1..4);
            let n = rng.random_range(1..8);
            let ds = random_dataset(&mut rng, n, d);
            let h = KernelHyper::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.01..0.2),
                (0..d).map(|_| rng.random_range(0.3..1.0)).collect(),
            )
            .unwrap();
            let mean = ConstantMean(0.1);
            let model = GpModel::condition(ds.xs(), &ds.residuals(&mean), &h).unwrap();
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let acq = Acquirer::new(&model, &theta, &mean).unwrap();
            for _ in 0..5 {
                let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let fast = acq.value(&z);
                let slow = acquisition_value(&z, &theta, &ds, &mean, &h).unwrap();
                assert!((fast - slow).abs() <= 1e-8 * slow.abs().max(1.0), "{fast} vs {slow}");
                assert!(fast >= acq.base_value() - 1e-10);
            }
            let far: Vec<f64> = theta.iter().map(|t| t + 1e3).collect();
            assert!((acq.value(&far) - acq.base_value()).abs() < 1e-8);
        }
    }

    #[test]
    fn symmetric_data_gives_symmetric_field() {
        let h = hyper(1);
        let ds = GpDataset::from_points(vec![vec![-0.4], vec![0.4]], vec![0.3, 0.3]);
        let model = GpModel::condition(ds.xs(), &ds.ys(), &h).unwrap();
        let mean = ConstantMean(0.0);
        let acq = Acquirer::new(&model, &[0.0], &mean).unwrap();
        for t in [0.05, 0.2, 0.7, 1.3] {
            assert!((acq.value(&[t]) - acq.value(&[-t])).abs() < 1e-10 * acq.value(&[t]).abs().max(1.0));
        }
    }

    #[test]
    fn maximizer_matches_grid_oracle() {
        let h = hyper(1);
        let ds = GpDataset::from_points(vec![vec![0.3]], vec![1.0]);
        let model = GpModel::condition(ds.xs(), &ds.ys(), &h).unwrap();
        let mean = ConstantMean(0.0);
        let acq = Acquirer::new(&model, &[0.0], &mean).unwrap();
        let radius = 1.0;
        let grid: Vec<f64> = (0..=2000).map(|i| -radius + 2.0 * radius * i as f64 / 2000.0).collect();
        let (zg, _) = grid
            .iter()
            .map(|&z| (z, acq.value(&[z])))
            .fold((f64::NAN, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        let z = maximize_acquisition(&acq, radius, 32, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((z[0] - zg).abs() <= 2.0 * radius / 2000.0 + 1e-9, "{} vs {zg}", z[0]);
        // Not on top of the existing observation.
        assert!((zg - 0.3).abs() > 0.05);
        let again = maximize_acquisition(&acq, radius, 32, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(z, again);
    }

    #[test]
    fn constant_field_returns_first_start() {
        // Zero gradient mean: α ≡ 0 everywhere.
        let h = hyper(2);
        let ds = GpDataset::from_points(vec![vec![0.2, 0.1]], vec![0.0]);
        let model = GpModel::condition(ds.xs(), &ds.ys(), &h).unwrap();
        let acq = Acquirer::new(&model, &[0.0, 0.0], &ConstantMean(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let first: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let z = maximize_acquisition(&acq, 0.5, 8, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(z, first);
    }

    #[test]
    fn maximizer_never_loses_to_its_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ds = random_dataset(&mut rng, 7, 3);
        let h = hyper(3);
        let mean = ConstantMean(-0.2);
        let model = GpModel::condition(ds.xs(), &ds.residuals(&mean), &h).unwrap();
        let theta = [0.1, -0.1, 0.0];
        let acq = Acquirer::new(&model, &theta, &mean).unwrap();
        let mut srng = ChaCha8Rng::seed_from_u64(2);
        let starts: Vec<Vec<f64>> = (0..16)
            .map(|_| theta.iter().map(|t| srng.random_range(t - 1.0..=t + 1.0)).collect())
            .collect();
        let z = maximize_acquisition(&acq, 1.0, 16, &mut ChaCha8Rng::seed_from_u64(2));
        let best = acq.value(&z);
        assert!(starts.iter().all(|s| acq.value(s) <= best));
        assert!(z.iter().zip(&theta).all(|(a, t)| (a - t).abs() <= 1.0 + 1e-12));
    }
}
