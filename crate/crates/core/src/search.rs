//! The policy-search loops: ABS (advantage-mean GP with a critic ensemble),
//! the constant-mean MPD baseline and the ARS baseline.
//!
//! Every loop emits one [`HistoryRow`] per episode through a caller-supplied
//! sink so that results can be persisted while the run is still going.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{descent_direction, maximize_acquisition, Acquirer};
use crate::critic::{
    r2_score, score_critics, train_critics, AdvantageMean, CriticConfig,
    CriticEnsemble, Observation, ObservationDataset, ReplayBuffer, ScaledQ, VisitationBatch,
};
use crate::envsim::{
    make_env, rollout, rollout_frozen, EnvOverrides, Environment, PolicyParams, RolloutRecord,
    StateNormalizer, VisitedState,
};
use crate::error::{Error, Result};
use crate::gpcore::{
    dynamic_hyperpriors, fit_hyperparameters, ConstantMean, GpDataset, GpModel, HyperPriors,
    Interval, KernelHyper, MeanFn,
};

pub use crate::critic::ReturnScaler;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Abs,
    Mpd,
    Ars,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Abs => "abs",
            Algorithm::Mpd => "mpd",
            Algorithm::Ars => "ars",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Algorithm::Abs),
            "mpd" => Ok(Algorithm::Mpd),
            "ars" => Ok(Algorithm::Ars),
            other => Err(Error::Config(format!(
                "unknown algorithm `{other}` (expected abs, mpd or ars)"
            ))),
        }
    }
}

/// Everything that determines a run. Two runs with equal configs produce
/// identical histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub env: String,
    pub algorithm: Algorithm,
    /// Outer iterations (ARS: update iterations).
    pub iterations: usize,
    /// Acquisition points per outer iteration (`M`).
    pub acquisitions: usize,
    /// Repeated rollouts of every central point (`N_c`).
    pub central_rollouts: usize,
    /// ABS step length along the normalized ascent direction.
    pub step_size: f64,
    pub mpd_learning_rate: f64,
    /// MPD descent steps per outer iteration.
    pub mpd_substeps: usize,
    /// GP retention `N_max`; `3·(1 + M)` when unset.
    pub max_points: Option<usize>,
    pub lengthscale_prior: Interval,
    /// Static `σ_f` box, used until two residuals exist or when dynamic
    /// hyperpriors are off.
    pub signal_prior: Interval,
    /// Static `σ_n` box, used until two central returns exist or when dynamic
    /// hyperpriors are off.
    pub noise_prior: Interval,
    pub dynamic_hyperpriors: bool,
    pub gp_restarts: usize,
    pub acquisition_restarts: usize,
    /// Half-width of the acquisition box; twice the median lengthscale when unset.
    pub search_radius: Option<f64>,
    pub ensemble_size: usize,
    /// TD steps per critic after every rollout.
    pub critic_steps: usize,
    pub critic: CriticConfig,
    pub replay_capacity: usize,
    pub horizon: Option<usize>,
    pub gamma: Option<f64>,
    pub deterministic_init: bool,
    pub ars_directions: usize,
    pub ars_top: usize,
    pub ars_step: f64,
    pub ars_noise: f64,
    pub seed: u64,
    /// Fill the `wall_ms` column (otherwise 0, keeping histories reproducible).
    pub record_wall_time: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            env: "lqr2".into(),
            algorithm: Algorithm::Abs,
            iterations: 10,
            acquisitions: 6,
            central_rollouts: 2,
            step_size: 0.05,
            mpd_learning_rate: 0.01,
            mpd_substeps: 1,
            max_points: None,
            lengthscale_prior: Interval::new(0.05, 1.0),
            signal_prior: Interval::new(0.1, 10.0),
            noise_prior: Interval::new(0.01, 1.0),
            dynamic_hyperpriors: true,
            gp_restarts: 32,
            acquisition_restarts: 32,
            search_radius: None,
            ensemble_size: 5,
            critic_steps: 500,
            critic: CriticConfig::default(),
            replay_capacity: 100_000,
            horizon: None,
            gamma: None,
            deterministic_init: false,
            ars_directions: 8,
            ars_top: 4,
            ars_step: 0.02,
            ars_noise: 0.03,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl SearchConfig {
    pub fn n_max(&self) -> usize {
        self.max_points.unwrap_or(3 * (1 + self.acquisitions))
    }

    pub fn env_overrides(&self) -> EnvOverrides {
        EnvOverrides {
            horizon: self.horizon,
            gamma: self.gamma,
            deterministic_init: self.deterministic_init,
        }
    }

    pub fn static_priors(&self) -> HyperPriors {
        HyperPriors {
            signal_sd: self.signal_prior,
            noise_sd: self.noise_prior,
            lengthscale: self.lengthscale_prior,
        }
    }

    pub fn ars(&self) -> ArsConfig {
        ArsConfig {
            directions: self.ars_directions,
            top: self.ars_top,
            step: self.ars_step,
            noise: self.ars_noise,
        }
    }

    /// Episodes a complete run will produce.
    pub fn total_episodes(&self) -> usize {
        match self.algorithm {
            Algorithm::Ars => self.iterations * 2 * self.ars_directions,
            _ => self.iterations * (self.central_rollouts + self.acquisitions),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{what} must be positive")))
            } else {
                Ok(())
            }
        };
        let positive_f = |what: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{what} must be positive and finite, got {v}")))
            }
        };
        positive("iterations", self.iterations)?;
        positive("central_rollouts", self.central_rollouts)?;
        positive("mpd_substeps", self.mpd_substeps)?;
        positive("gp_restarts", self.gp_restarts)?;
        positive("acquisition_restarts", self.acquisition_restarts)?;
        positive("ensemble_size", self.ensemble_size)?;
        positive("critic_steps", self.critic_steps)?;
        positive("replay_capacity", self.replay_capacity)?;
        positive("ars_directions", self.ars_directions)?;
        positive("ars_top", self.ars_top)?;
        if self.ars_top > self.ars_directions {
            return Err(Error::Config(format!(
                "ars_top ({}) cannot exceed ars_directions ({})",
                self.ars_top, self.ars_directions
            )));
        }
        if self.n_max() < 2 {
            return Err(Error::Config("max_points must be at least 2".into()));
        }
        positive_f("step_size", self.step_size)?;
        positive_f("mpd_learning_rate", self.mpd_learning_rate)?;
        positive_f("ars_step", self.ars_step)?;
        positive_f("ars_noise", self.ars_noise)?;
        if let Some(r) = self.search_radius {
            positive_f("search_radius", r)?;
        }
        self.static_priors().validate()?;
        self.critic.validate()?;
        make_env(&self.env, &self.env_overrides())?;
        Ok(())
    }
}

/// One episode of a run. Unavailable scores are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based episode counter.
    pub episode: u64,
    /// Cumulative environment transitions.
    pub env_steps: u64,
    #[serde(rename = "return")]
    pub return_hat: f64,
    pub best_return: f64,
    /// Validation R̃² of the aggregated critic over the retained observations.
    pub r2_val: f64,
    /// Test R̂² of the GP mean function on the current iteration's acquisition
    /// points, each predicted before it was observed.
    pub r2_test: f64,
    pub wall_ms: u64,
}

pub const HISTORY_HEADER: [&str; 7] = [
    "episode",
    "env_steps",
    "return",
    "best_return",
    "r2_val",
    "r2_test",
    "wall_ms",
];

/// The policy in force after `episodes` episodes, with the normalizer needed
/// to map it to raw states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub episodes: u64,
    pub params: PolicyParams,
    pub normalizer: StateNormalizer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub rows: Vec<HistoryRow>,
    /// Central points as they were rolled out, then the final policy.
    pub snapshots: Vec<Snapshot>,
}

impl RunHistory {
    pub fn best_return(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.best_return)
    }

    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

/// A run that stopped on an error, with everything recorded up to that point.
#[derive(Debug)]
pub struct RunAbort {
    pub error: Error,
    pub partial: RunHistory,
}

impl std::fmt::Display for RunAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} episodes: {}",
            self.partial.rows.len(),
            self.error
        )
    }
}

impl std::error::Error for RunAbort {}

/// Receives every row as soon as its episode is complete.
pub type RowSink<'a> = dyn FnMut(&HistoryRow) -> Result<()> + 'a;

/// Runs the configured algorithm, feeding rows to `sink`.
pub fn run(config: &SearchConfig, sink: &mut RowSink<'_>) -> std::result::Result<RunHistory, RunAbort> {
    match config.algorithm {
        Algorithm::Abs | Algorithm::Mpd => bo_run(config, sink),
        Algorithm::Ars => ars_run(config, sink),
    }
}

pub fn abs_run(config: &SearchConfig, sink: &mut RowSink<'_>) -> std::result::Result<RunHistory, RunAbort> {
    bo_run(
        &SearchConfig {
            algorithm: Algorithm::Abs,
            ..config.clone()
        },
        sink,
    )
}

pub fn mpd_run(config: &SearchConfig, sink: &mut RowSink<'_>) -> std::result::Result<RunHistory, RunAbort> {
    bo_run(
        &SearchConfig {
            algorithm: Algorithm::Mpd,
            ..config.clone()
        },
        sink,
    )
}

/// Independent random streams derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const ENV_STREAM: u64 = 1;
const GP_STREAM: u64 = 2;
const ACQUISITION_STREAM: u64 = 3;
const ARS_STREAM: u64 = 4;

/// Bookkeeping shared by every loop: episode counters, best-so-far and the
/// history under construction.
struct Recorder<'s, 'a> {
    history: RunHistory,
    episodes: u64,
    env_steps: u64,
    best: f64,
    start: Option<Instant>,
    sink: &'s mut RowSink<'a>,
}

impl<'s, 'a> Recorder<'s, 'a> {
    fn new(config: &SearchConfig, sink: &'s mut RowSink<'a>) -> Self {
        Self {
            history: RunHistory::default(),
            episodes: 0,
            env_steps: 0,
            best: f64::NEG_INFINITY,
            start: config.record_wall_time.then(Instant::now),
            sink,
        }
    }

    fn episode(&mut self, record: &RolloutRecord, r2_val: f64, r2_test: f64) -> Result<()> {
        self.episodes += 1;
        self.env_steps += record.transitions.len() as u64;
        self.best = self.best.max(record.return_hat);
        let row = HistoryRow {
            episode: self.episodes,
            env_steps: self.env_steps,
            return_hat: record.return_hat,
            best_return: self.best,
            r2_val,
            r2_test,
            wall_ms: self.start.map_or(0, |t| t.elapsed().as_millis() as u64),
        };
        self.history.rows.push(row);
        (self.sink)(&row)
    }

    fn snapshot(&mut self, iteration: usize, params: &PolicyParams, normalizer: &StateNormalizer) {
        self.history.snapshots.push(Snapshot {
            iteration,
            episodes: self.episodes,
            params: params.clone(),
            normalizer: normalizer.clone(),
        });
    }
}

/// Mutable state of the Bayesian-optimization loops (ABS and MPD).
pub struct BoState {
    algorithm: Algorithm,
    config: SearchConfig,
    env: Box<dyn Environment>,
    gamma: f64,
    pub normalizer: StateNormalizer,
    pub buffer: ReplayBuffer,
    pub observations: ObservationDataset,
    pub gp_data: GpDataset,
    pub ensemble: CriticEnsemble,
    pub scaler: ReturnScaler,
    central: PolicyParams,
    central_return: f64,
    central_returns: Vec<f64>,
    central_visitation: Vec<VisitedState>,
    hyper: Option<KernelHyper>,
    env_rng: ChaCha8Rng,
    gp_rng: ChaCha8Rng,
    acq_rng: ChaCha8Rng,
    /// Critic that was re-initialized by the latest central rollout.
    pub last_reset: Option<usize>,
}

/// What one call of [`BoState::rollout_point`] produced.
#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub records: Vec<RolloutRecord>,
    pub r2_val: f64,
    pub gp_fitted: bool,
}

impl BoState {
    pub fn new(config: &SearchConfig) -> Result<Self> {
        config.validate()?;
        let env = make_env(&config.env, &config.env_overrides())?;
        let spec = env.spec().clone();
        let algorithm = if config.algorithm == Algorithm::Ars {
            Algorithm::Abs
        } else {
            config.algorithm
        };
        Ok(Self {
            algorithm,
            gamma: spec.gamma,
            normalizer: StateNormalizer::new(spec.state_dim),
            buffer: ReplayBuffer::new(config.replay_capacity),
            observations: ObservationDataset::new(config.n_max()),
            gp_data: GpDataset::new(config.n_max()),
            ensemble: CriticEnsemble::new(
                config.ensemble_size,
                spec.state_dim,
                spec.action_dim,
                &config.critic,
                config.seed,
            ),
            scaler: ReturnScaler::new(),
            central: PolicyParams::zeros(spec.action_dim, spec.state_dim),
            central_return: 0.0,
            central_returns: Vec::new(),
            central_visitation: Vec::new(),
            hyper: None,
            env_rng: stream(config.seed, ENV_STREAM),
            gp_rng: stream(config.seed, GP_STREAM),
            acq_rng: stream(config.seed, ACQUISITION_STREAM),
            last_reset: None,
            config: config.clone(),
            env,
        })
    }

    pub fn env(&self) -> &dyn Environment {
        self.env.as_ref()
    }

    pub fn central(&self) -> &PolicyParams {
        &self.central
    }

    pub fn central_return(&self) -> f64 {
        self.central_return
    }

    pub fn hyper(&self) -> Option<&KernelHyper> {
        self.hyper.as_ref()
    }

    fn uses_critics(&self) -> bool {
        self.algorithm == Algorithm::Abs
    }

    /// Aggregated critic on the return scale.
    fn q(&self) -> ScaledQ<'_> {
        ScaledQ {
            inner: &self.ensemble,
            scaler: self.scaler,
        }
    }

    /// The GP prior mean: the advantage mean anchored at the current central
    /// point for ABS, the mean of the retained returns for MPD.
    pub fn with_mean<T>(&self, f: impl FnOnce(&dyn MeanFn) -> T) -> T {
        if self.uses_critics() {
            let q = self.q();
            let batch = VisitationBatch::from_samples(&self.central_visitation, &self.normalizer);
            let mean = AdvantageMean::new(&q, self.central.clone(), self.central_return, batch);
            f(&mean)
        } else {
            let ys = self.gp_data.ys();
            let c = if ys.is_empty() {
                0.0
            } else {
                ys.iter().sum::<f64>() / ys.len() as f64
            };
            f(&ConstantMean(c))
        }
    }

    /// Hyperparameters for conditioning: the fitted ones, or the midpoint of
    /// the current hyperprior boxes before the first fit.
    fn current_hyper(&self) -> KernelHyper {
        self.hyper
            .clone()
            .unwrap_or_else(|| self.priors().midpoint(self.central.dim()))
    }

    fn priors(&self) -> HyperPriors {
        let fallback = self.config.static_priors();
        if !self.config.dynamic_hyperpriors {
            return fallback;
        }
        let residuals = self.residuals();
        dynamic_hyperpriors(&self.central_returns, &residuals, &fallback)
    }

    pub fn model(&self) -> Result<GpModel> {
        let residuals = self.residuals();
        GpModel::condition(self.gp_data.xs(), &residuals, &self.current_hyper())
    }

    /// One pass of the per-point procedure: resets on a new central point,
    /// rollout(s), data and buffer updates, critic training and weighting,
    /// then the GP hyperparameter fit.
    pub fn rollout_point(&mut self, x: &PolicyParams, is_central: bool) -> Result<PointOutcome> {
        if is_central && self.uses_critics() {
            self.last_reset = Some(self.ensemble.on_central_change());
        }
        let n = if is_central {
            self.config.central_rollouts
        } else {
            1
        };
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let mut rec = rollout(self.env.as_ref(), x, &mut self.normalizer, &mut self.env_rng)?;
            rec.is_central = is_central;
            records.push(rec);
        }
        let pooled = RolloutRecord::pool(&records).expect("at least one rollout");
        if is_central {
            self.central = x.clone();
            self.central_return = pooled.return_hat;
            self.central_returns = records.iter().map(|r| r.return_hat).collect();
            self.central_visitation = pooled.visitation.clone();
        }
        for rec in &records {
            for g in returns_to_go(rec, self.gamma) {
                self.scaler.observe(g);
            }
        }
        self.gp_data.push(x.as_slice().to_vec(), pooled.return_hat);
        self.buffer.extend(pooled.transitions.iter().cloned());
        self.observations.push(Observation {
            params: x.clone(),
            return_hat: pooled.return_hat,
            visitation: pooled.visitation,
            is_central,
        });

        let mut r2_val = f64::NAN;
        if self.uses_critics() {
            train_critics(
                &mut self.ensemble,
                &self.buffer,
                &self.central,
                &self.normalizer,
                &self.scaler,
                self.gamma,
                self.config.critic_steps,
            );
            let preds = score_critics(
                &mut self.ensemble,
                &self.observations,
                &self.central,
                self.central_return,
                &self.normalizer,
                &self.scaler,
            );
            // The predictor is affine in Q with a shared offset, so the
            // aggregated critic's prediction is the weighted sum.
            let weights = self.ensemble.weights();
            let combined: Vec<f64> = (0..self.observations.len())
                .map(|i| preds.iter().zip(weights).map(|(p, w)| w * p[i]).sum())
                .collect();
            let r2 = r2_score(&combined, &self.observations.returns());
            if !r2.degenerate {
                r2_val = r2.value;
            }
        }
        self.refresh_means();

        let gp_fitted = self.gp_data.len() >= 2;
        if gp_fitted {
            let priors = self.priors();
            let residuals = self.residuals();
            let fit = fit_hyperparameters(
                &self.gp_data.xs(),
                &residuals,
                &priors,
                self.config.gp_restarts,
                &mut self.gp_rng,
            )?;
            self.hyper = Some(fit.hyper);
        }
        Ok(PointOutcome {
            records,
            r2_val,
            gp_fitted,
        })
    }

    /// Caches `m(X)`; valid until the next rollout changes the critics, the
    /// scaler or the normalizer.
    fn refresh_means(&mut self) {
        let means = self.with_mean(|m| self.gp_data.xs().iter().map(|x| m.value(x)).collect::<Vec<_>>());
        self.gp_data.set_means(means);
    }

    fn residuals(&self) -> Vec<f64> {
        self.with_mean(|m| self.gp_data.residuals(m))
    }

    fn search_radius(&self) -> f64 {
        self.config
            .search_radius
            .unwrap_or_else(|| 2.0 * self.current_hyper().median_lengthscale())
    }

    /// `argmax_z α(z | θ, D)` inside the box around the central point.
    pub fn acquire(&mut self) -> Result<PolicyParams> {
        let model = self.model()?;
        let theta = self.central.as_slice().to_vec();
        let radius = self.search_radius();
        let z = {
            let acq = self.with_mean(|m| Acquirer::new(&model, &theta, m))?;
            maximize_acquisition(&acq, radius, self.config.acquisition_restarts, &mut self.acq_rng)
        };
        PolicyParams::from_flat(self.central.action_dim(), self.central.state_dim(), z)
    }

    /// Normalized most probable ascent direction at the central point.
    pub fn ascent_direction(&self) -> Result<DVector<f64>> {
        let model = self.model()?;
        let theta = self.central.as_slice();
        let post = self.with_mean(|m| model.gradient_posterior(theta, m));
        descent_direction(&post)
    }

    /// Prediction of the current mean function at `x`.
    pub fn predict(&self, x: &PolicyParams) -> f64 {
        self.with_mean(|m| m.value(x.as_slice()))
    }
}

/// `G_t = Σ_{k≥t} γ^{k−t} r_k` along one episode.
fn returns_to_go(record: &RolloutRecord, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; record.transitions.len()];
    let mut acc = 0.0;
    for (t, tr) in record.transitions.iter().enumerate().rev() {
        acc = tr.reward + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `θ ← θ + lr·ν` repeated `substeps` times, re-evaluating the direction of a
/// fixed GP at every intermediate point.
pub fn mpd_steps(
    theta: &[f64],
    model: &GpModel,
    mean: &dyn MeanFn,
    learning_rate: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    let mut theta = DVector::from_column_slice(theta);
    for _ in 0..substeps {
        let nu = descent_direction(&model.gradient_posterior(theta.as_slice(), mean))?;
        theta += nu * learning_rate;
    }
    Ok(theta.as_slice().to_vec())
}

fn bo_run(config: &SearchConfig, sink: &mut RowSink<'_>) -> std::result::Result<RunHistory, RunAbort> {
    let mut state = BoState::new(config).map_err(|error| RunAbort {
        error,
        partial: RunHistory::default(),
    })?;
    let mut rec = Recorder::new(config, sink);
    match bo_loop(config, &mut state, &mut rec) {
        Ok(()) => Ok(rec.history),
        Err(error) => {
            log::error!("{} run stopped: {error}", config.algorithm.name());
            Err(RunAbort {
                error,
                partial: rec.history,
            })
        }
    }
}

fn bo_loop(config: &SearchConfig, state: &mut BoState, rec: &mut Recorder<'_, '_>) -> Result<()> {
    let spec = state.env().spec().clone();
    let mut theta = PolicyParams::zeros(spec.action_dim, spec.state_dim);
    for it in 0..config.iterations {
        let out = state.rollout_point(&theta, true)?;
        for r in &out.records {
            rec.episode(r, out.r2_val, f64::NAN)?;
        }
        rec.snapshot(it, &theta, &state.normalizer);

        let mut predictions = Vec::with_capacity(config.acquisitions);
        let mut observed = Vec::with_capacity(config.acquisitions);
        for _ in 0..config.acquisitions {
            let z = state.acquire()?;
            predictions.push(state.predict(&z));
            let out = state.rollout_point(&z, false)?;
            observed.push(out.records[0].return_hat);
            let r2 = r2_score(&predictions, &observed);
            let r2_test = if r2.degenerate { f64::NAN } else { r2.value };
            rec.episode(&out.records[0], out.r2_val, r2_test)?;
        }

        let next = match state.algorithm {
            Algorithm::Mpd => {
                let model = state.model()?;
                state.with_mean(|m| {
                    mpd_steps(
                        theta.as_slice(),
                        &model,
                        m,
                        config.mpd_learning_rate,
                        config.mpd_substeps,
                    )
                })?
            }
            _ => {
                let nu = state.ascent_direction()?;
                theta.stepped(nu.as_slice(), config.step_size).as_slice().to_vec()
            }
        };
        theta = PolicyParams::from_flat(spec.action_dim, spec.state_dim, next)?;
        log::debug!(
            "iteration {it}: best {:.6}, θ = {:?}",
            rec.best,
            theta.as_slice()
        );
    }
    rec.snapshot(config.iterations, &theta, &state.normalizer);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArsConfig {
    pub directions: usize,
    /// Directions kept after ranking by `max(r⁺, r⁻)`.
    pub top: usize,
    pub step: f64,
    pub noise: f64,
}

impl Default for ArsConfig {
    fn default() -> Self {
        Self {
            directions: 8,
            top: 4,
            step: 0.02,
            noise: 0.03,
        }
    }
}

/// The ARS-V2-t update `α/(b·σ_R) Σ_{top b} (r⁺ − r⁻) δ`, or `None` when the
/// used returns have (numerically) no spread. Ties in the ranking keep the
/// lower direction index first.
pub fn ars_update(
    directions: &[Vec<f64>],
    r_plus: &[f64],
    r_minus: &[f64],
    top: usize,
    step: f64,
) -> Option<Vec<f64>> {
    let dim = directions.first()?.len();
    let mut order: Vec<usize> = (0..directions.len()).collect();
    order.sort_by(|&i, &j| {
        let a = r_plus[i].max(r_minus[i]);
        let b = r_plus[j].max(r_minus[j]);
        b.total_cmp(&a)
    });
    let kept = &order[..top.min(order.len())];
    let used: Vec<f64> = kept
        .iter()
        .flat_map(|&i| [r_plus[i], r_minus[i]])
        .collect();
    let sd = crate::linalg::mean_var(&used).1.sqrt();
    if !(sd >= 1e-8) {
        return None;
    }
    let scale = step / (kept.len() as f64 * sd);
    let mut update = vec![0.0; dim];
    for &i in kept {
        let diff = r_plus[i] - r_minus[i];
        for (u, d) in update.iter_mut().zip(&directions[i]) {
            *u += scale * diff * d;
        }
    }
    Some(update)
}

pub fn sample_directions<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// One ARS iteration against an arbitrary objective; returns the update
/// (zero when skipped).
pub fn ars_step<R: Rng + ?Sized>(
    x: &[f64],
    objective: &mut dyn FnMut(&[f64]) -> f64,
    config: &ArsConfig,
    rng: &mut R,
) -> Vec<f64> {
    let dirs = sample_directions(rng, config.directions, x.len());
    let perturbed = |sign: f64, d: &[f64]| -> Vec<f64> {
        x.iter().zip(d).map(|(v, e)| v + sign * config.noise * e).collect()
    };
    let mut r_plus = Vec::with_capacity(dirs.len());
    let mut r_minus = Vec::with_capacity(dirs.len());
    for d in &dirs {
        r_plus.push(objective(&perturbed(1.0, d)));
        r_minus.push(objective(&perturbed(-1.0, d)));
    }
    ars_update(&dirs, &r_plus, &r_minus, config.top, config.step).unwrap_or_else(|| vec![0.0; x.len()])
}

pub fn ars_run(config: &SearchConfig, sink: &mut RowSink<'_>) -> std::result::Result<RunHistory, RunAbort> {
    if let Err(error) = config.validate() {
        return Err(RunAbort {
            error,
            partial: RunHistory::default(),
        });
    }
    let mut rec = Recorder::new(config, sink);
    match ars_loop(config, &mut rec) {
        Ok(()) => Ok(rec.history),
        Err(error) => {
            log::error!("ars run stopped: {error}");
            Err(RunAbort {
                error,
                partial: rec.history,
            })
        }
    }
}

/// Rollouts of one iteration share frozen normalizer statistics; the visited
/// states are folded in afterwards, in rollout order.
fn ars_loop(config: &SearchConfig, rec: &mut Recorder<'_, '_>) -> Result<()> {
    let env = make_env(&config.env, &config.env_overrides())?;
    let spec = env.spec().clone();
    let ars = config.ars();
    let mut env_rng = stream(config.seed, ENV_STREAM);
    let mut dir_rng = stream(config.seed, ARS_STREAM);
    let mut normalizer = StateNormalizer::new(spec.state_dim);
    let mut x = PolicyParams::zeros(spec.action_dim, spec.state_dim);
    for it in 0..config.iterations {
        rec.snapshot(it, &x, &normalizer);
        let dirs = sample_directions(&mut dir_rng, ars.directions, x.dim());
        let frozen = normalizer.clone();
        let mut r_plus = Vec::with_capacity(dirs.len());
        let mut r_minus = Vec::with_capacity(dirs.len());
        for d in &dirs {
            for (sign, out) in [(1.0, &mut r_plus), (-1.0, &mut r_minus)] {
                let p = x.stepped(d, sign * ars.noise);
                let record = rollout_frozen(env.as_ref(), &p, &frozen, &mut env_rng)?;
                for v in &record.visitation {
                    normalizer.observe(&v.state);
                }
                rec.episode(&record, f64::NAN, f64::NAN)?;
                out.push(record.return_hat);
            }
        }
        match ars_update(&dirs, &r_plus, &r_minus, ars.top, ars.step) {
            Some(u) => x = x.stepped(&u, 1.0),
            None => log::debug!("iteration {it}: returns have no spread, update skipped"),
        }
    }
    rec.snapshot(config.iterations, &x, &normalizer);
    Ok(())
}
