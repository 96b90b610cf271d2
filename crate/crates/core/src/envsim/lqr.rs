//! Linear-quadratic environments and their closed-form discounted oracles.

use nalgebra::{DMatrix, DVector};

use super::{EnvSpec, Environment, InitialDist, StateBounds};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, spectral_radius};

const LYAPUNOV_TOL: f64 = 1e-12;
const LYAPUNOV_MAX_ITERS: usize = 100_000;

/// `s' = A s + B a`, `r = −(sᵀ Qc s + aᵀ Rc a)`.
#[derive(Clone, Debug)]
pub struct LqrEnv {
    name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub rc: DMatrix<f64>,
    spec: EnvSpec,
}

impl LqrEnv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        qc: DMatrix<f64>,
        rc: DMatrix<f64>,
        gamma: f64,
        horizon: usize,
        init: InitialDist,
        bounds: StateBounds,
    ) -> Result<Self> {
        let m = a.nrows();
        let d = b.ncols();
        let check = |what: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                })
            }
        };
        check("A columns", m, a.ncols())?;
        check("B rows", m, b.nrows())?;
        check("Qc", m, qc.nrows())?;
        check("Qc", m, qc.ncols())?;
        check("Rc", d, rc.nrows())?;
        check("Rc", d, rc.ncols())?;
        check("initial distribution", m, init.dim())?;
        check("state bounds", m, bounds.lo.len())?;
        if (&qc - qc.transpose()).amax() > 1e-12 || min_eigenvalue(&qc) < -1e-12 {
            return Err(Error::Config("Qc must be symmetric PSD".into()));
        }
        if (&rc - rc.transpose()).amax() > 1e-12 || min_eigenvalue(&rc) <= 0.0 {
            return Err(Error::Config("Rc must be symmetric PD".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        Ok(Self {
            name: format!("lqr{m}"),
            a,
            b,
            qc,
            rc,
            spec: EnvSpec {
                state_dim: m,
                action_dim: d,
                horizon,
                gamma,
                init,
                bounds,
            },
        })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub(crate) fn spec_mut(&mut self) -> &mut EnvSpec {
        &mut self.spec
    }

    fn closed_loop(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a + &self.b * gain
    }

    fn check_stable(&self, gain: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
        if gain.shape() != (self.spec.action_dim, self.spec.state_dim) {
            return Err(Error::DimensionMismatch {
                what: "gain",
                expected: self.spec.action_dim * self.spec.state_dim,
                got: gain.len(),
            });
        }
        let f = self.closed_loop(gain);
        let radius = spectral_radius(&f) * gamma.sqrt();
        if radius >= 1.0 {
            return Err(Error::UnstableGain { radius });
        }
        Ok(f)
    }
}

impl Environment for LqrEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let m = self.spec.state_dim;
        let d = self.spec.action_dim;
        (0..m)
            .map(|i| {
                (0..m).map(|j| self.a[(i, j)] * s[j]).sum::<f64>()
                    + (0..d).map(|j| self.b[(i, j)] * a[j]).sum::<f64>()
            })
            .collect()
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        let sv = DVector::from_column_slice(s);
        let av = DVector::from_column_slice(a);
        -(sv.dot(&(&self.qc * &sv)) + av.dot(&(&self.rc * &av)))
    }

    fn as_lqr(&self) -> Option<&LqrEnv> {
        Some(self)
    }
}

/// Fixed point of `P = W + γ Fᵀ P F`.
fn discounted_lyapunov(f: &DMatrix<f64>, w: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    let ft = f.transpose();
    let mut p = w.clone();
    for _ in 0..LYAPUNOV_MAX_ITERS {
        let next = w + (&ft * &p * f) * gamma;
        let diff = (&next - &p).amax();
        p = next;
        if diff <= LYAPUNOV_TOL * (1.0 + p.amax()) {
            return Ok(p);
        }
    }
    Err(Error::LyapunovNonConvergence {
        iterations: LYAPUNOV_MAX_ITERS,
    })
}

/// Discounted state second moment `Σ = S₀ + γ F Σ Fᵀ`, i.e. `Σ_t γᵗ E[s_t s_tᵀ]`.
pub fn discounted_state_covariance(
    f: &DMatrix<f64>,
    s0: &DMatrix<f64>,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    discounted_lyapunov(&f.transpose(), s0, gamma)
}

/// Exact infinite-horizon discounted return of `a = K s` (state clipping ignored).
pub fn lqr_exact_return(
    lqr: &LqrEnv,
    gain: &DMatrix<f64>,
    gamma: f64,
    init: &InitialDist,
) -> Result<f64> {
    let f = lqr.check_stable(gain, gamma)?;
    let w = &lqr.qc + gain.transpose() * &lqr.rc * gain;
    let p = discounted_lyapunov(&f, &w, gamma)?;
    Ok(-(p.component_mul(&init.second_moment())).sum())
}

/// Exact discounted return of the affine policy `a = K s + c`, evaluated on the
/// augmented state `[s; 1]`.
pub fn lqr_exact_return_affine(
    lqr: &LqrEnv,
    gain: &DMatrix<f64>,
    offset: &DVector<f64>,
    gamma: f64,
    init: &InitialDist,
) -> Result<f64> {
    let f = lqr.check_stable(gain, gamma)?;
    let m = lqr.spec.state_dim;
    let mut fz = DMatrix::zeros(m + 1, m + 1);
    fz.view_mut((0, 0), (m, m)).copy_from(&f);
    fz.view_mut((0, m), (m, 1)).copy_from(&(&lqr.b * offset));
    fz[(m, m)] = 1.0;

    let rk = &lqr.rc * gain;
    let mut wz = DMatrix::zeros(m + 1, m + 1);
    wz.view_mut((0, 0), (m, m))
        .copy_from(&(&lqr.qc + gain.transpose() * &rk));
    let cross = rk.transpose() * offset;
    wz.view_mut((0, m), (m, 1)).copy_from(&cross);
    wz.view_mut((m, 0), (1, m)).copy_from(&cross.transpose());
    wz[(m, m)] = offset.dot(&(&lqr.rc * offset));

    let pz = discounted_lyapunov(&fz, &wz, gamma)?;
    let mean = DVector::from_vec(init.mean());
    let mut mz = DMatrix::zeros(m + 1, m + 1);
    mz.view_mut((0, 0), (m, m)).copy_from(&init.second_moment());
    mz.view_mut((0, m), (m, 1)).copy_from(&mean);
    mz.view_mut((m, 0), (1, m)).copy_from(&mean.transpose());
    mz[(m, m)] = 1.0;
    Ok(-(pz.component_mul(&mz)).sum())
}

/// Optimal discounted gain and value matrix from the discounted Riccati recursion.
pub fn riccati_gain(lqr: &LqrEnv, gamma: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (a, b) = (&lqr.a, &lqr.b);
    let mut p = lqr.qc.clone();
    for _ in 0..LYAPUNOV_MAX_ITERS {
        let btp = b.transpose() * &p;
        let h = &lqr.rc + &btp * b * gamma;
        let hinv = h
            .try_inverse()
            .ok_or(Error::IllConditioned { jitter: 0.0 })?;
        let gain = -(hinv * &btp * a) * gamma;
        let f = a + b * &gain;
        let next = &lqr.qc + gain.transpose() * &lqr.rc * &gain + f.transpose() * &p * &f * gamma;
        let diff = (&next - &p).amax();
        p = next;
        if diff <= LYAPUNOV_TOL * (1.0 + p.amax()) {
            return Ok((gain, p));
        }
    }
    Err(Error::LyapunovNonConvergence {
        iterations: LYAPUNOV_MAX_ITERS,
    })
}

/// Exact action-value function of a linear gain,
/// `Q(s, a) = −(sᵀ Qss s + aᵀ Qaa a + 2 sᵀ Qsa a)`.
#[derive(Clone, Debug)]
pub struct QuadraticQ {
    pub gain: DMatrix<f64>,
    /// Value matrix: `V(s) = −sᵀ P s`.
    pub p: DMatrix<f64>,
    pub qss: DMatrix<f64>,
    pub qaa: DMatrix<f64>,
    pub qsa: DMatrix<f64>,
}

impl QuadraticQ {
    pub fn value(&self, s: &[f64]) -> f64 {
        let sv = DVector::from_column_slice(s);
        -sv.dot(&(&self.p * &sv))
    }

    pub fn q(&self, s: &[f64], a: &[f64]) -> f64 {
        let sv = DVector::from_column_slice(s);
        let av = DVector::from_column_slice(a);
        -(sv.dot(&(&self.qss * &sv)) + av.dot(&(&self.qaa * &av)) + 2.0 * sv.dot(&(&self.qsa * &av)))
    }

    pub fn grad_action(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let sv = DVector::from_column_slice(s);
        let av = DVector::from_column_slice(a);
        let g = -((&self.qaa * &av) + self.qsa.transpose() * &sv) * 2.0;
        g.as_slice().to_vec()
    }

    pub fn advantage(&self, s: &[f64], a: &[f64]) -> f64 {
        let own = (&self.gain * DVector::from_column_slice(s)).as_slice().to_vec();
        self.q(s, a) - self.q(s, &own)
    }
}

pub fn lqr_exact_q(lqr: &LqrEnv, gain: &DMatrix<f64>, gamma: f64) -> Result<QuadraticQ> {
    let f = lqr.check_stable(gain, gamma)?;
    let w = &lqr.qc + gain.transpose() * &lqr.rc * gain;
    let p = discounted_lyapunov(&f, &w, gamma)?;
    let (a, b) = (&lqr.a, &lqr.b);
    Ok(QuadraticQ {
        gain: gain.clone(),
        qss: &lqr.qc + a.transpose() * &p * a * gamma,
        qaa: &lqr.rc + b.transpose() * &p * b * gamma,
        qsa: a.transpose() * &p * b * gamma,
        p,
    })
}
