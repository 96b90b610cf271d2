use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{EnvSpec, Environment, InitialDist, LqrEnv, StateBounds};
use crate::error::{Error, Result};

pub const ENV_NAMES: [&str; 4] = ["lqr2", "lqr4", "nav2", "finite-grid"];

/// Per-run overrides of an environment's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Start every episode from a fixed state (noiseless returns).
    #[serde(default)]
    pub deterministic_init: bool,
}

impl EnvOverrides {
    fn apply(&self, spec: &mut EnvSpec, fixed_start: Vec<f64>) -> Result<()> {
        if let Some(h) = self.horizon {
            if h == 0 {
                return Err(Error::Config("horizon must be positive".into()));
            }
            spec.horizon = h;
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::Config(format!("gamma must lie in (0, 1), got {g}")));
            }
            spec.gamma = g;
        }
        if self.deterministic_init {
            spec.init = InitialDist::Fixed(fixed_start);
        }
        Ok(())
    }
}

/// Builds a named environment.
pub fn make_env(name: &str, overrides: &EnvOverrides) -> Result<Box<dyn Environment>> {
    match name {
        "lqr2" => {
            let mut env = LqrEnv::new(
                DMatrix::from_row_slice(2, 2, &[0.9, -0.2, 0.2, 0.9]),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
                DMatrix::identity(2, 2),
                DMatrix::from_element(1, 1, 0.1),
                0.99,
                100,
                InitialDist::UniformBox {
                    lo: vec![-1.0; 2],
                    hi: vec![1.0; 2],
                },
                StateBounds::symmetric(2, 10.0),
            )?
            .with_name("lqr2");
            overrides.apply(env.spec_mut(), vec![1.0, 1.0])?;
            Ok(Box::new(env))
        }
        "lqr4" => {
            let mut a = DMatrix::identity(4, 4) * 0.9;
            for i in 0..3 {
                a[(i, i + 1)] = 0.1;
            }
            let mut b = DMatrix::zeros(4, 2);
            b[(1, 0)] = 1.0;
            b[(3, 1)] = 1.0;
            let mut env = LqrEnv::new(
                a,
                b,
                DMatrix::identity(4, 4),
                DMatrix::identity(2, 2) * 0.1,
                0.99,
                100,
                InitialDist::UniformBox {
                    lo: vec![-1.0; 4],
                    hi: vec![1.0; 4],
                },
                StateBounds::symmetric(4, 10.0),
            )?
            .with_name("lqr4");
            overrides.apply(env.spec_mut(), vec![1.0; 4])?;
            Ok(Box::new(env))
        }
        "nav2" => {
            let mut env = NavEnv::default();
            overrides.apply(&mut env.spec, vec![1.5, -1.0])?;
            Ok(Box::new(env))
        }
        "finite-grid" => {
            let mut env = FiniteGridEnv::default();
            overrides.apply(&mut env.spec, vec![1.0])?;
            Ok(Box::new(env))
        }
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}

/// Planar point mass steered toward the origin: `s' = s + dt · clamp(a, −1, 1)`,
/// `r = −‖s‖² − c‖a‖²`, states clipped to `[−2, 2]²`.
#[derive(Clone, Debug)]
pub struct NavEnv {
    pub dt: f64,
    pub action_cost: f64,
    spec: EnvSpec,
}

impl Default for NavEnv {
    fn default() -> Self {
        Self {
            dt: 0.1,
            action_cost: 0.01,
            spec: EnvSpec {
                state_dim: 2,
                action_dim: 2,
                horizon: 100,
                gamma: 0.99,
                init: InitialDist::UniformBox {
                    lo: vec![-1.5; 2],
                    hi: vec![1.5; 2],
                },
                bounds: StateBounds::symmetric(2, 2.0),
            },
        }
    }
}

impl Environment for NavEnv {
    fn name(&self) -> &str {
        "nav2"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(a)
            .map(|(x, u)| x + self.dt * u.clamp(-1.0, 1.0))
            .collect()
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        -(crate::linalg::dot(s, s) + self.action_cost * crate::linalg::dot(a, a))
    }
}

/// One-dimensional lattice on `[−1, 1]`: the state is snapped to the nearest of
/// `points` grid nodes after `s' = 0.9 s + 0.25 a`.
#[derive(Clone, Debug)]
pub struct FiniteGridEnv {
    pub points: usize,
    spec: EnvSpec,
}

impl Default for FiniteGridEnv {
    fn default() -> Self {
        Self {
            points: 9,
            spec: EnvSpec {
                state_dim: 1,
                action_dim: 1,
                horizon: 50,
                gamma: 0.95,
                init: InitialDist::UniformBox {
                    lo: vec![-1.0],
                    hi: vec![1.0],
                },
                bounds: StateBounds::symmetric(1, 1.0),
            },
        }
    }
}

impl FiniteGridEnv {
    pub fn grid(&self) -> Vec<f64> {
        let n = self.points - 1;
        (0..=n)
            .map(|i| -1.0 + 2.0 * i as f64 / n as f64)
            .collect()
    }

    pub fn snap(&self, x: f64) -> f64 {
        let n = (self.points - 1) as f64;
        let idx = ((x.clamp(-1.0, 1.0) + 1.0) * n / 2.0).round();
        -1.0 + 2.0 * idx / n
    }
}

impl Environment for FiniteGridEnv {
    fn name(&self) -> &str {
        "finite-grid"
    }

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        vec![self.snap(0.9 * s[0] + 0.25 * a[0])]
    }

    fn reward(&self, s: &[f64], a: &[f64]) -> f64 {
        -(s[0] * s[0] + 0.1 * a[0] * a[0])
    }

    fn initial_state(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let raw = self.spec.init.sample(rng);
        vec![self.snap(raw[0])]
    }
}
