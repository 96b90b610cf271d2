//! Deterministic continuous-control environments, rollouts and state normalization.
//!
//! Every environment is a pure function of `(state, action)`; the only source of
//! randomness in a rollout is the initial state drawn from the environment's
//! initial distribution. Emitted states are clipped to the environment's box.

mod envs;
mod lqr;
mod normalizer;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub use envs::{make_env, EnvOverrides, FiniteGridEnv, NavEnv, ENV_NAMES};
pub use lqr::{
    discounted_state_covariance, lqr_exact_q, lqr_exact_return, lqr_exact_return_affine,
    riccati_gain, LqrEnv, QuadraticQ,
};
pub use normalizer::{StateNormalizer, VARIANCE_FLOOR};

/// Pre-clip state norm above which a rollout is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialDist {
    Fixed(Vec<f64>),
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialDist {
    pub fn dim(&self) -> usize {
        match self {
            InitialDist::Fixed(s) => s.len(),
            InitialDist::UniformBox { lo, .. } => lo.len(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            InitialDist::Fixed(s) => s.clone(),
            InitialDist::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
                .collect(),
        }
    }

    /// `E[s sᵀ]` under the distribution.
    pub fn second_moment(&self) -> DMatrix<f64> {
        match self {
            InitialDist::Fixed(s) => {
                let v = nalgebra::DVector::from_column_slice(s);
                &v * v.transpose()
            }
            InitialDist::UniformBox { lo, hi } => {
                let n = lo.len();
                let mean = nalgebra::DVector::from_iterator(
                    n,
                    lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)),
                );
                let mut m = &mean * mean.transpose();
                for i in 0..n {
                    m[(i, i)] += (hi[i] - lo[i]).powi(2) / 12.0;
                }
                m
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            InitialDist::Fixed(s) => s.clone(),
            InitialDist::UniformBox { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()
            }
        }
    }
}

/// Axis-aligned bounding box of the state space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBounds {
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn clip(&self, s: &mut [f64]) {
        for ((x, &l), &h) in s.iter_mut().zip(&self.lo).zip(&self.hi) {
            *x = x.clamp(l, h);
        }
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        s.iter()
            .zip(&self.lo)
            .zip(&self.hi)
            .all(|((x, l), h)| x >= l && x <= h)
    }

    /// `sup ‖s‖` over the box.
    pub fn sup_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub init: InitialDist,
    pub bounds: StateBounds,
}

impl EnvSpec {
    pub fn policy_dim(&self) -> usize {
        self.state_dim * self.action_dim
    }

    /// Truncation error budget `γ^H · R_max / (1 − γ)` for a reward bound `r_max`.
    pub fn truncation_budget(&self, r_max: f64) -> f64 {
        self.gamma.powi(self.horizon as i32) * r_max / (1.0 - self.gamma)
    }
}

pub trait Environment: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &str;
    fn spec(&self) -> &EnvSpec;
    /// Next state before clipping to the state box.
    fn dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64>;
    fn reward(&self, s: &[f64], a: &[f64]) -> f64;

    fn initial_state(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.spec().init.sample(rng)
    }

    fn as_lqr(&self) -> Option<&LqrEnv> {
        None
    }
}

/// A deterministic policy over policy-input states.
pub trait Policy {
    fn act(&self, s: &[f64]) -> Vec<f64>;

    /// Actions for a batch of states stored as columns.
    fn act_batch(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<_> = states
            .column_iter()
            .map(|c| nalgebra::DVector::from_vec(self.act(c.as_slice())))
            .collect();
        DMatrix::from_columns(&cols)
    }
}

/// Deterministic linear policy `a = x · s` with `x` a `d × m` matrix, flattened
/// row-major (`x[i * m + j]`) when used as a GP input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    action_dim: usize,
    state_dim: usize,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(action_dim: usize, state_dim: usize) -> Self {
        Self {
            action_dim,
            state_dim,
            values: vec![0.0; action_dim * state_dim],
        }
    }

    pub fn from_flat(action_dim: usize, state_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != action_dim * state_dim {
            return Err(Error::DimensionMismatch {
                what: "policy parameters",
                expected: action_dim * state_dim,
                got: values.len(),
            });
        }
        Ok(Self {
            action_dim,
            state_dim,
            values,
        })
    }

    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let (d, m) = x.shape();
        let values = (0..d)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| x[(i, j)])
            .collect();
        Self {
            action_dim: d,
            state_dim: m,
            values,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.action_dim, self.state_dim, &self.values)
    }

    pub fn act(&self, s: &[f64]) -> Vec<f64> {
        self.values
            .chunks(self.state_dim)
            .map(|row| crate::linalg::dot(row, s))
            .collect()
    }

    /// Writes `x · s` into `out` without allocating.
    pub fn act_into(&self, s: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.values.chunks(self.state_dim)) {
            *o = crate::linalg::dot(row, s);
        }
    }

    /// Lipschitz constant of the policy: the operator 2-norm of `x`.
    pub fn lipschitz(&self) -> f64 {
        self.matrix().singular_values().max()
    }

    /// `self + step · direction` (direction flattened row-major).
    pub fn stepped(&self, direction: &[f64], step: f64) -> Self {
        let values = self
            .values
            .iter()
            .zip(direction)
            .map(|(v, d)| v + step * d)
            .collect();
        Self { values, ..*self }
    }
}

impl Policy for PolicyParams {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        PolicyParams::act(self, s)
    }

    fn act_batch(&self, states: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix() * states
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// A visited (raw) state with its discount weight; together these form the
/// empirical improper discounted visitation measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitedState {
    pub state: Vec<f64>,
    pub weight: f64,
}

/// One policy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub params: PolicyParams,
    /// Discounted return `Σ γᵗ r_t`.
    pub return_hat: f64,
    pub visitation: Vec<VisitedState>,
    pub transitions: Vec<Transition>,
    pub is_central: bool,
    /// Set when the rollout stopped early because the state diverged.
    pub truncated: bool,
}

impl RolloutRecord {
    pub fn visitation_mass(&self) -> f64 {
        self.visitation.iter().map(|v| v.weight).sum()
    }

    /// `Σ weight_t · r_t` over the record's own transitions.
    pub fn recomputed_return(&self) -> f64 {
        self.visitation
            .iter()
            .zip(&self.transitions)
            .map(|(v, t)| v.weight * t.reward)
            .sum()
    }

    /// Pools repeated rollouts of the same policy: the return is averaged and the
    /// visitation samples are concatenated with weights divided by the count.
    pub fn pool(records: &[RolloutRecord]) -> Option<RolloutRecord> {
        let first = records.first()?;
        let n = records.len() as f64;
        let return_hat = records.iter().map(|r| r.return_hat).sum::<f64>() / n;
        let visitation = records
            .iter()
            .flat_map(|r| r.visitation.iter())
            .map(|v| VisitedState {
                state: v.state.clone(),
                weight: v.weight / n,
            })
            .collect();
        let transitions = records
            .iter()
            .flat_map(|r| r.transitions.iter().cloned())
            .collect();
        Some(RolloutRecord {
            params: first.params.clone(),
            return_hat,
            visitation,
            transitions,
            is_central: first.is_central,
            truncated: records.iter().any(|r| r.truncated),
        })
    }
}

/// Advances the environment one step; the next state is clipped to the state box.
pub fn step(env: &dyn Environment, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, f64)> {
    ensure_finite("state", s)?;
    ensure_finite("action", a)?;
    let spec = env.spec();
    if s.len() != spec.state_dim {
        return Err(Error::DimensionMismatch {
            what: "state",
            expected: spec.state_dim,
            got: s.len(),
        });
    }
    if a.len() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "action",
            expected: spec.action_dim,
            got: a.len(),
        });
    }
    let reward = env.reward(s, a);
    let mut next = env.dynamics(s, a);
    spec.bounds.clip(&mut next);
    Ok((next, reward))
}

/// Runs one episode of `a = x · normalize(s)` for the environment horizon.
///
/// The initial state is the only random draw. Every visited state is fed to the
/// normalizer after its action has been computed.
pub fn rollout(
    env: &dyn Environment,
    params: &PolicyParams,
    normalizer: &mut StateNormalizer,
    rng: &mut dyn rand::RngCore,
) -> Result<RolloutRecord> {
    episode(env, params, rng, |s| {
        let action = params.act(&normalizer.apply(s));
        normalizer.observe(s);
        action
    })
}

/// Like [`rollout`] but with normalizer statistics held fixed for the whole
/// episode. The visited states are left for the caller to fold in.
pub fn rollout_frozen(
    env: &dyn Environment,
    params: &PolicyParams,
    normalizer: &StateNormalizer,
    rng: &mut dyn rand::RngCore,
) -> Result<RolloutRecord> {
    episode(env, params, rng, |s| params.act(&normalizer.apply(s)))
}

fn episode(
    env: &dyn Environment,
    params: &PolicyParams,
    rng: &mut dyn rand::RngCore,
    mut policy: impl FnMut(&[f64]) -> Vec<f64>,
) -> Result<RolloutRecord> {
    let spec = env.spec();
    if params.state_dim() != spec.state_dim || params.action_dim() != spec.action_dim {
        return Err(Error::DimensionMismatch {
            what: "policy parameters",
            expected: spec.policy_dim(),
            got: params.dim(),
        });
    }
    ensure_finite("policy parameters", params.as_slice())?;
    let mut s = env.initial_state(rng);
    spec.bounds.clip(&mut s);

    let mut visitation = Vec::with_capacity(spec.horizon);
    let mut transitions = Vec::with_capacity(spec.horizon);
    let mut return_hat = 0.0;
    let mut discount = 1.0;
    let mut truncated = false;
    for _ in 0..spec.horizon {
        let action = policy(&s);
        let reward = env.reward(&s, &action);
        let mut next = env.dynamics(&s, &action);
        if !next.iter().all(|v| v.is_finite()) || crate::linalg::norm(&next) > DIVERGENCE_NORM {
            truncated = true;
            break;
        }
        spec.bounds.clip(&mut next);
        return_hat += discount * reward;
        visitation.push(VisitedState {
            state: s.clone(),
            weight: discount,
        });
        transitions.push(Transition {
            state: std::mem::replace(&mut s, next.clone()),
            action,
            reward,
            next_state: next,
        });
        discount *= spec.gamma;
    }
    Ok(RolloutRecord {
        params: params.clone(),
        return_hat,
        visitation,
        transitions,
        is_central: false,
        truncated,
    })
}
