//! Critic ensemble and the advantage mean function.
//!
//! Critics approximate `Q^{π_θ}` of the *central* policy on a normalized return
//! scale (outputs bounded by `tanh`). They are trained by TD on a replay buffer,
//! scored by how well the performance-difference predictor built from each of
//! them explains observed returns, and aggregated with a softmax of the scores.
//!
//! States passed to critics and policies are policy-input states, i.e. already
//! mapped through the state normalizer.

pub mod nn;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{Policy, PolicyParams, QuadraticQ, StateNormalizer, Transition, VisitedState};
use crate::error::{Error, Result};
use crate::gpcore::MeanFn;
use nn::{Adam, Dropout, MlpShape};

/// Action-value function evaluated on batches stored as columns.
pub trait QFunction {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64>;
    /// `∇_a Q(s, a)` for every column, as an `action_dim × batch` matrix.
    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64>;

    fn q(&self, s: &[f64], a: &[f64]) -> f64 {
        self.q_batch(
            &DMatrix::from_column_slice(s.len(), 1, s),
            &DMatrix::from_column_slice(a.len(), 1, a),
        )[0]
    }
}

impl QFunction for QuadraticQ {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            states.ncols(),
            states
                .column_iter()
                .zip(actions.column_iter())
                .map(|(s, a)| QuadraticQ::q(self, s.as_slice(), a.as_slice())),
        )
    }

    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<_> = states
            .column_iter()
            .zip(actions.column_iter())
            .map(|(s, a)| DVector::from_vec(self.grad_action(s.as_slice(), a.as_slice())))
            .collect();
        DMatrix::from_columns(&cols)
    }
}

/// Running min/max of observed returns, mapped affinely onto `[−1, 1]`.
///
/// A degenerate range maps its single value to 0 with unit slope.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnScaler {
    range: Option<(f64, f64)>,
}

impl ReturnScaler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_range(min: f64, max: f64) -> Self {
        Self {
            range: Some((min.min(max), max.max(min))),
        }
    }

    pub fn observe(&mut self, v: f64) {
        if !v.is_finite() {
            return;
        }
        self.range = Some(match self.range {
            None => (v, v),
            Some((lo, hi)) => (lo.min(v), hi.max(v)),
        });
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        self.range
    }

    /// Slope and offset `(a, b)` of `v ↦ a·v + b`.
    pub fn affine(&self) -> (f64, f64) {
        match self.range {
            None => (1.0, 0.0),
            Some((lo, hi)) if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) => {
                (1.0, -lo)
            }
            Some((lo, hi)) => (2.0 / (hi - lo), -(hi + lo) / (hi - lo)),
        }
    }

    pub fn scale(&self, v: f64) -> f64 {
        let (a, b) = self.affine();
        a * v + b
    }

    pub fn unscale(&self, v: f64) -> f64 {
        let (a, b) = self.affine();
        (v - b) / a
    }

    /// Per-step reward map under which discounted sums transform like
    /// [`scale`](Self::scale): `a·r + b·(1 − γ)`.
    pub fn scale_reward(&self, r: f64, gamma: f64) -> f64 {
        let (a, b) = self.affine();
        a * r + b * (1.0 - gamma)
    }
}

/// Exposes a normalized-scale Q function on the return scale.
pub struct ScaledQ<'a> {
    pub inner: &'a dyn QFunction,
    pub scaler: ReturnScaler,
}

impl QFunction for ScaledQ<'_> {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        let (a, b) = self.scaler.affine();
        self.inner.q_batch(states, actions).map(|v| (v - b) / a)
    }

    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, _) = self.scaler.affine();
        self.inner.grad_action_batch(states, actions) / a
    }
}

/// Weighted states of an empirical visitation measure, stored as columns.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitationBatch {
    pub states: DMatrix<f64>,
    pub weights: DVector<f64>,
}

impl VisitationBatch {
    /// Maps raw visited states through the normalizer.
    pub fn from_samples(samples: &[VisitedState], normalizer: &StateNormalizer) -> Self {
        let dim = normalizer.dim();
        let mut states = DMatrix::zeros(dim, samples.len());
        for (j, v) in samples.iter().enumerate() {
            states.set_column(j, &DVector::from_vec(normalizer.apply(&v.state)));
        }
        Self {
            states,
            weights: DVector::from_iterator(samples.len(), samples.iter().map(|v| v.weight)),
        }
    }

    /// States used as-is.
    pub fn from_raw(states: Vec<Vec<f64>>, weights: Vec<f64>) -> Self {
        let dim = states.first().map_or(0, |s| s.len());
        let cols: Vec<_> = states.into_iter().map(DVector::from_vec).collect();
        Self {
            states: if cols.is_empty() {
                DMatrix::zeros(dim, 0)
            } else {
                DMatrix::from_columns(&cols)
            },
            weights: DVector::from_vec(weights),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `Σ_s w_s · [Q(s, π_x(s)) − Q(s, π_θ(s))]` over a visitation batch.
pub fn expected_advantage(
    q: &dyn QFunction,
    central: &dyn Policy,
    x: &dyn Policy,
    batch: &VisitationBatch,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len();
    let ax = x.act_batch(&batch.states);
    let at = central.act_batch(&batch.states);
    let states = DMatrix::from_fn(batch.states.nrows(), 2 * n, |i, j| batch.states[(i, j % n)]);
    let actions = DMatrix::from_fn(ax.nrows(), 2 * n, |i, j| {
        if j < n {
            ax[(i, j)]
        } else {
            at[(i, j - n)]
        }
    });
    let qs = q.q_batch(&states, &actions);
    (0..n).map(|j| batch.weights[j] * (qs[j] - qs[j + n])).sum()
}

/// Performance-difference predictor `Ĵ(π_θ) + Σ_s w_s · A(s, π_x(s))`.
///
/// With the central visitation this is the advantage mean function; with the
/// candidate's own visitation it is the validation predictor.
pub fn pdl_estimate(
    q: &dyn QFunction,
    central_return: f64,
    central: &dyn Policy,
    x: &dyn Policy,
    batch: &VisitationBatch,
) -> f64 {
    central_return + expected_advantage(q, central, x, batch)
}

/// `∇_x Σ_s w_s Q(s, x·s) = Σ_s w_s ∇_a Q(s, x·s) sᵀ`, flattened row-major.
pub fn pdl_gradient(q: &dyn QFunction, x: &PolicyParams, batch: &VisitationBatch) -> Vec<f64> {
    if batch.is_empty() {
        return vec![0.0; x.dim()];
    }
    let actions = x.act_batch(&batch.states);
    let mut g = q.grad_action_batch(&batch.states, &actions);
    for (j, mut col) in g.column_iter_mut().enumerate() {
        col *= batch.weights[j];
    }
    PolicyParams::from_matrix(&(g * batch.states.transpose()))
        .as_slice()
        .to_vec()
}

/// GP mean `m̂(x) = Ĵ(π_θ) + Σ_s w_s [Q̂(s, x·s) − Q̂(s, θ·s)]` over the central
/// visitation, with the analytic gradient `Σ_s w_s ∇_a Q̂(s, x·s) ⊗ s`.
pub struct AdvantageMean<'a> {
    q: &'a dyn QFunction,
    central: PolicyParams,
    central_return: f64,
    batch: VisitationBatch,
    baseline: f64,
}

impl<'a> AdvantageMean<'a> {
    pub fn new(
        q: &'a dyn QFunction,
        central: PolicyParams,
        central_return: f64,
        batch: VisitationBatch,
    ) -> Self {
        let baseline = weighted_q(q, &central, &batch);
        Self {
            q,
            central,
            central_return,
            batch,
            baseline,
        }
    }

    pub fn central(&self) -> &PolicyParams {
        &self.central
    }

    pub fn central_return(&self) -> f64 {
        self.central_return
    }

    fn params(&self, x: &[f64]) -> PolicyParams {
        PolicyParams::from_flat(self.central.action_dim(), self.central.state_dim(), x.to_vec())
            .expect("mean function input has the policy dimension")
    }
}

fn weighted_q(q: &dyn QFunction, policy: &PolicyParams, batch: &VisitationBatch) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    q.q_batch(&batch.states, &policy.act_batch(&batch.states))
        .dot(&batch.weights)
}

impl MeanFn for AdvantageMean<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.central_return + weighted_q(self.q, &self.params(x), &self.batch) - self.baseline
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        pdl_gradient(self.q, &self.params(x), &self.batch)
    }
}

/// Coefficient of determination with a flag for a zero-variance target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    pub value: f64,
    pub degenerate: bool,
}

/// `1 − Σ(pred − y)² / Σ(ȳ − y)²`; returns 0 with the flag set when the
/// targets have no variance (or fewer than two points).
pub fn r2_score(predictions: &[f64], targets: &[f64]) -> R2 {
    let n = targets.len();
    if n < 2 {
        return R2 {
            value: 0.0,
            degenerate: true,
        };
    }
    let mean = targets.iter().sum::<f64>() / n as f64;
    let sst: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if sst == 0.0 {
        return R2 {
            value: 0.0,
            degenerate: true,
        };
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y).powi(2))
        .sum();
    R2 {
        value: 1.0 - sse / sst,
        degenerate: false,
    }
}

/// Softmax of scores clipped to `[−1, 1]`.
pub fn aggregate_weights(scores: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = scores
        .iter()
        .map(|s| if s.is_nan() { -1.0 } else { s.clamp(-1.0, 1.0) })
        .collect();
    let max = clipped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = clipped.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// One observed policy: its parameters, return and visitation sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub params: PolicyParams,
    pub return_hat: f64,
    pub visitation: Vec<VisitedState>,
    pub is_central: bool,
}

/// Observations retained alongside the GP dataset (same FIFO capacity).
#[derive(Clone, Debug, Default)]
pub struct ObservationDataset {
    capacity: usize,
    entries: VecDeque<Observation>,
}

impl ObservationDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, obs: Observation) {
        self.entries.push_back(obs);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.entries.iter().map(|o| o.return_hat).collect()
    }
}

/// Validation predictor `m̃(x) = Ĵ(π_θ) + Σ_{s∼d̂^{π_x}} w_s A(s, x·s)`.
pub fn validation_predictor(
    q: &dyn QFunction,
    obs: &Observation,
    central: &PolicyParams,
    central_return: f64,
    normalizer: &StateNormalizer,
) -> f64 {
    let batch = VisitationBatch::from_samples(&obs.visitation, normalizer);
    pdl_estimate(q, central_return, central, &obs.params, &batch)
}

/// R̃² of the validation predictor over every retained observation.
pub fn r2_validation(
    q: &dyn QFunction,
    central: &PolicyParams,
    central_return: f64,
    dataset: &ObservationDataset,
    normalizer: &StateNormalizer,
) -> R2 {
    let preds: Vec<f64> = dataset
        .iter()
        .map(|o| validation_predictor(q, o, central, central_return, normalizer))
        .collect();
    r2_score(&preds, &dataset.returns())
}

/// R̂² of the advantage mean over a set of acquisition observations.
pub fn r2_test(mean: &AdvantageMean<'_>, records: &[Observation]) -> R2 {
    let preds: Vec<f64> = records.iter().map(|o| mean.value(o.params.as_slice())).collect();
    let targets: Vec<f64> = records.iter().map(|o| o.return_hat).collect();
    r2_score(&preds, &targets)
}

/// Uniform replay buffer over raw transitions.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            ..Default::default()
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<usize> {
        (0..k).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub polyak: f64,
    pub batch_size: usize,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            dropout: 0.01,
            learning_rate: 3e-4,
            polyak: 0.005,
            batch_size: 64,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("critic hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("critic dropout must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(Error::Config(
                "critic learning rate must be positive and polyak in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("critic batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One Q approximator with its target network, optimizer and private RNG
/// (minibatch sampling and dropout masks).
#[derive(Clone, Debug)]
pub struct QCritic {
    state_dim: usize,
    action_dim: usize,
    shape: MlpShape,
    params: Vec<f64>,
    target: Vec<f64>,
    adam: Adam,
    rng: ChaCha8Rng,
    config: CriticConfig,
}

impl QCritic {
    pub fn new(state_dim: usize, action_dim: usize, config: &CriticConfig, seed: u64) -> Self {
        let shape = MlpShape {
            input: state_dim + action_dim,
            hidden: config.hidden.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shape.init(&mut rng);
        Self {
            state_dim,
            action_dim,
            adam: Adam::new(params.len(), config.learning_rate),
            target: params.clone(),
            params,
            shape,
            rng,
            config: config.clone(),
        }
    }

    /// Re-draws parameters from the initial distribution with a new seed.
    pub fn reinitialize(&mut self, seed: u64) {
        *self = Self::new(self.state_dim, self.action_dim, &self.config, seed);
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn target_params(&self) -> &[f64] {
        &self.target
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn reset_optimizer(&mut self) {
        self.adam.reset();
    }

    fn inputs(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let n = states.ncols();
        let mut x = DMatrix::zeros(self.state_dim + self.action_dim, n);
        x.rows_mut(0, self.state_dim).copy_from(states);
        x.rows_mut(self.state_dim, self.action_dim).copy_from(actions);
        x
    }

    fn target_q(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        nn::predict(&self.shape, &self.target, &self.inputs(states, actions))
    }

    /// One TD step on a prepared minibatch; returns the mean squared TD error.
    fn td_step(
        &mut self,
        states: &DMatrix<f64>,
        actions: &DMatrix<f64>,
        rewards: &DVector<f64>,
        next_states: &DMatrix<f64>,
        next_actions: &DMatrix<f64>,
        gamma: f64,
    ) -> f64 {
        let y = rewards + self.target_q(next_states, next_actions) * gamma;
        let x = self.inputs(states, actions);
        let cache = nn::forward(
            &self.shape,
            &self.params,
            &x,
            Some(Dropout {
                rate: self.config.dropout,
                rng: &mut self.rng,
            }),
        );
        let n = y.len() as f64;
        let err = &cache.output - &y;
        let (grad, _) = nn::backward(&self.shape, &self.params, &cache, &(&err / n));
        self.adam.step(&mut self.params, &grad);
        let tau = self.config.polyak;
        for (t, p) in self.target.iter_mut().zip(&self.params) {
            *t += tau * (p - *t);
        }
        err.norm_squared() / n
    }

    pub fn to_checkpoint(&self) -> CriticCheckpoint {
        CriticCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            config: self.config.clone(),
            params: self.params.clone(),
            target_params: self.target.clone(),
        }
    }

    /// Restores parameters from a checkpoint; optimizer state starts zeroed.
    pub fn from_checkpoint(ck: &CriticCheckpoint, seed: u64) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        ck.config.validate()?;
        let mut critic = Self::new(ck.state_dim, ck.action_dim, &ck.config, seed);
        let n = critic.shape.n_params();
        if ck.params.len() != n || ck.target_params.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} parameters, got {} and {}",
                ck.params.len(),
                ck.target_params.len()
            )));
        }
        critic.params = ck.params.clone();
        critic.target = ck.target_params.clone();
        Ok(critic)
    }
}

impl QFunction for QCritic {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        nn::predict(&self.shape, &self.params, &self.inputs(states, actions))
    }

    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let x = self.inputs(states, actions);
        let cache = nn::forward::<ChaCha8Rng>(&self.shape, &self.params, &x, None);
        let ones = DVector::from_element(x.ncols(), 1.0);
        let (_, dx) = nn::backward(&self.shape, &self.params, &cache, &ones);
        dx.rows(self.state_dim, self.action_dim).into_owned()
    }
}

pub const CHECKPOINT_FORMAT: &str = "abs-critic/1";

/// Serialized critic: architecture header plus flat parameter arrays in the
/// layout documented in [`nn`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticCheckpoint {
    pub format: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub config: CriticConfig,
    pub params: Vec<f64>,
    pub target_params: Vec<f64>,
}

fn derive_seed(base: u64, k: u64) -> u64 {
    base ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `n` critics with validation scores and softmax weights.
#[derive(Clone, Debug)]
pub struct CriticEnsemble {
    critics: Vec<QCritic>,
    scores: Vec<f64>,
    weights: Vec<f64>,
    seed: u64,
    reinits: u64,
}

impl CriticEnsemble {
    pub fn new(n: usize, state_dim: usize, action_dim: usize, config: &CriticConfig, seed: u64) -> Self {
        let n = n.max(1);
        let critics = (0..n as u64)
            .map(|k| QCritic::new(state_dim, action_dim, config, derive_seed(seed, k)))
            .collect();
        Self {
            critics,
            scores: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
            seed,
            reinits: n as u64,
        }
    }

    pub fn len(&self) -> usize {
        self.critics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.critics.is_empty()
    }

    pub fn critics(&self) -> &[QCritic] {
        &self.critics
    }

    pub fn critic_mut(&mut self, k: usize) -> &mut QCritic {
        &mut self.critics[k]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_scores(&mut self, scores: Vec<f64>) {
        assert_eq!(scores.len(), self.critics.len());
        self.weights = aggregate_weights(&scores);
        self.scores = scores;
    }

    /// Overrides the aggregation weights directly (they must form a simplex).
    pub fn set_weights(&mut self, weights: Vec<f64>) {
        assert_eq!(weights.len(), self.critics.len());
        self.weights = weights;
    }

    /// New central point: zero every optimizer and re-initialize the critic with
    /// the lowest score (lowest index on ties). It inherits the minimum score.
    /// Returns the index of the reset critic.
    pub fn on_central_change(&mut self) -> usize {
        for c in &mut self.critics {
            c.reset_optimizer();
        }
        let worst = self
            .scores
            .iter()
            .enumerate()
            .fold(0, |best, (k, s)| if *s < self.scores[best] { k } else { best });
        let seed = derive_seed(self.seed, self.reinits);
        self.reinits += 1;
        self.critics[worst].reinitialize(seed);
        // Its score is already the minimum; scores and weights stay as they are.
        worst
    }
}

impl QFunction for CriticEnsemble {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(states.ncols());
        for (c, w) in self.critics.iter().zip(&self.weights) {
            if *w != 0.0 {
                acc += c.q_batch(states, actions) * *w;
            }
        }
        acc
    }

    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(actions.nrows(), states.ncols());
        for (c, w) in self.critics.iter().zip(&self.weights) {
            if *w != 0.0 {
                acc += c.grad_action_batch(states, actions) * *w;
            }
        }
        acc
    }
}

/// Runs `n_steps` TD updates on every critic. Targets use the central policy at
/// the next state, `y = scaled(r) + γ·Q_target(s', θ·s')`; episodes cut by the
/// horizon are bootstrapped. Returns the last mean squared TD error per critic.
#[allow(clippy::too_many_arguments)]
pub fn train_critics(
    ensemble: &mut CriticEnsemble,
    buffer: &ReplayBuffer,
    central: &PolicyParams,
    normalizer: &StateNormalizer,
    scaler: &ReturnScaler,
    gamma: f64,
    n_steps: usize,
) -> Vec<f64> {
    if buffer.is_empty() {
        log::warn!("critic training skipped: replay buffer is empty");
        return vec![f64::NAN; ensemble.len()];
    }
    let m = central.state_dim();
    let d = central.action_dim();
    let mut losses = vec![f64::NAN; ensemble.len()];
    for (critic, loss) in ensemble.critics.iter_mut().zip(&mut losses) {
        let k = critic.config.batch_size;
        for _ in 0..n_steps {
            let idx = buffer.sample_indices(&mut critic.rng, k);
            let mut s = DMatrix::zeros(m, k);
            let mut a = DMatrix::zeros(d, k);
            let mut s2 = DMatrix::zeros(m, k);
            let mut r = DVector::zeros(k);
            for (j, &i) in idx.iter().enumerate() {
                let t = buffer.get(i);
                s.set_column(j, &DVector::from_vec(normalizer.apply(&t.state)));
                s2.set_column(j, &DVector::from_vec(normalizer.apply(&t.next_state)));
                a.set_column(j, &DVector::from_column_slice(&t.action));
                r[j] = scaler.scale_reward(t.reward, gamma);
            }
            let a2 = central.act_batch(&s2);
            *loss = critic.td_step(&s, &a, &r, &s2, &a2, gamma);
        }
    }
    losses
}

/// Validation predictions `m̃_φ(x)` of every critic for every retained
/// observation (outer index: critic), on the return scale.
pub fn critic_validation_predictions(
    ensemble: &CriticEnsemble,
    dataset: &ObservationDataset,
    central: &PolicyParams,
    central_return: f64,
    normalizer: &StateNormalizer,
    scaler: &ReturnScaler,
) -> Vec<Vec<f64>> {
    let batches: Vec<_> = dataset
        .iter()
        .map(|o| VisitationBatch::from_samples(&o.visitation, normalizer))
        .collect();
    ensemble
        .critics
        .iter()
        .map(|c| {
            let q = ScaledQ {
                inner: c,
                scaler: *scaler,
            };
            dataset
                .iter()
                .zip(&batches)
                .map(|(o, b)| pdl_estimate(&q, central_return, central, &o.params, b))
                .collect()
        })
        .collect()
}

/// Scores every critic with R̃² on the retained dataset and refreshes the
/// softmax weights. Returns the per-critic predictions for reuse.
pub fn score_critics(
    ensemble: &mut CriticEnsemble,
    dataset: &ObservationDataset,
    central: &PolicyParams,
    central_return: f64,
    normalizer: &StateNormalizer,
    scaler: &ReturnScaler,
) -> Vec<Vec<f64>> {
    let preds = critic_validation_predictions(ensemble, dataset, central, central_return, normalizer, scaler);
    let targets = dataset.returns();
    let scores = preds.iter().map(|p| r2_score(p, &targets).value).collect();
    ensemble.set_scores(scores);
    preds
}
