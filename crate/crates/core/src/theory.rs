//! Exact finite-MDP oracles and numeric checks of the return-difference
//! identities and Lipschitz bounds used to justify the advantage mean.
//!
//! States of a [`FiniteMdp`] are points on the real line so that Wasserstein
//! distances between discrete distributions have a closed form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::critic::{pdl_estimate, r2_score, QFunction, VisitationBatch, R2};
use crate::envsim::{
    discounted_state_covariance, lqr_exact_q, lqr_exact_return, InitialDist, LqrEnv, Policy,
};
use crate::error::{Error, Result};

/// Contract tolerance for identities evaluated with exact linear algebra.
pub const EXACT_TOL: f64 = 1e-9;

/// Deterministic MDP on a finite set of states embedded in ℝ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// `next[s][a]` is a state index.
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub init: Vec<f64>,
}

/// Action index per state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TablePolicy(pub Vec<usize>);

impl FiniteMdp {
    pub fn new(
        states: Vec<f64>,
        actions: Vec<f64>,
        next: Vec<Vec<usize>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
        init: Vec<f64>,
    ) -> Result<Self> {
        let n = states.len();
        let k = actions.len();
        let bad = |msg: &str| Err(Error::Config(format!("finite MDP: {msg}")));
        if n == 0 || k == 0 {
            return bad("needs at least one state and one action");
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return bad("γ must lie in (0, 1)");
        }
        if next.len() != n || reward.len() != n || init.len() != n {
            return bad("table sizes must match the number of states");
        }
        if next.iter().any(|row| row.len() != k || row.iter().any(|&s| s >= n))
            || reward.iter().any(|row| row.len() != k)
        {
            return bad("transition targets must be valid states");
        }
        if init.iter().any(|&p| p < 0.0) || (init.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return bad("initial distribution must be a probability vector");
        }
        Ok(Self {
            states,
            actions,
            next,
            reward,
            gamma,
            init,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// `P_π[s, s'] = 1` when `π` moves `s` to `s'`.
    pub fn transition_matrix(&self, pi: &TablePolicy) -> DMatrix<f64> {
        let n = self.n_states();
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            p[(s, self.next[s][pi.0[s]])] += 1.0;
        }
        p
    }

    pub fn policy_reward(&self, pi: &TablePolicy) -> DVector<f64> {
        DVector::from_fn(self.n_states(), |s, _| self.reward[s][pi.0[s]])
    }

    pub fn state_index(&self, s: f64) -> Option<usize> {
        self.states.iter().position(|&x| x == s)
    }

    pub fn action_index(&self, a: f64) -> Option<usize> {
        self.actions.iter().position(|&x| x == a)
    }

    /// Borrowed view implementing [`Policy`] on state coordinates.
    pub fn policy<'a>(&'a self, pi: &'a TablePolicy) -> BoundPolicy<'a> {
        BoundPolicy { mdp: self, pi }
    }
}

pub struct BoundPolicy<'a> {
    mdp: &'a FiniteMdp,
    pi: &'a TablePolicy,
}

impl Policy for BoundPolicy<'_> {
    fn act(&self, s: &[f64]) -> Vec<f64> {
        let i = self.mdp.state_index(s[0]).expect("state of the MDP");
        vec![self.mdp.actions[self.pi.0[i]]]
    }
}

/// Exact `Q^π` table exposed as a [`QFunction`] on coordinates. Tabular Q has
/// no action gradient, so `grad_action_batch` returns NaN.
pub struct ExactQTable<'a> {
    mdp: &'a FiniteMdp,
    q: DMatrix<f64>,
}

impl<'a> ExactQTable<'a> {
    pub fn new(mdp: &'a FiniteMdp, pi: &TablePolicy) -> Self {
        Self { mdp, q: exact_q(mdp, pi) }
    }
}

impl QFunction for ExactQTable<'_> {
    fn q_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_fn(states.ncols(), |j, _| {
            let s = self.mdp.state_index(states[(0, j)]).expect("state of the MDP");
            let a = self.mdp.action_index(actions[(0, j)]).expect("action of the MDP");
            self.q[(s, a)]
        })
    }

    fn grad_action_batch(&self, states: &DMatrix<f64>, actions: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_element(actions.nrows(), states.ncols(), f64::NAN)
    }
}

/// Improper discounted visitation `d = (I − γP_πᵀ)⁻¹ ι`, total mass `1/(1−γ)`.
pub fn exact_visitation(mdp: &FiniteMdp, pi: &TablePolicy) -> DVector<f64> {
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - mdp.transition_matrix(pi).transpose() * mdp.gamma;
    a.lu()
        .solve(&DVector::from_column_slice(&mdp.init))
        .expect("I − γPᵀ is invertible for γ < 1")
}

/// `Σ_{t≤T} γᵗ (P_πᵀ)ᵗ ι`.
pub fn truncated_visitation(mdp: &FiniteMdp, pi: &TablePolicy, horizon: usize) -> DVector<f64> {
    let pt = mdp.transition_matrix(pi).transpose();
    let mut term = DVector::from_column_slice(&mdp.init);
    let mut total = term.clone();
    for _ in 0..horizon {
        term = &pt * term * mdp.gamma;
        total += &term;
    }
    total
}

pub fn exact_value(mdp: &FiniteMdp, pi: &TablePolicy) -> DVector<f64> {
    let n = mdp.n_states();
    let a = DMatrix::identity(n, n) - mdp.transition_matrix(pi) * mdp.gamma;
    a.lu()
        .solve(&mdp.policy_reward(pi))
        .expect("I − γP is invertible for γ < 1")
}

/// `Q(s, a) = r(s, a) + γ V(next(s, a))` as a states × actions table.
pub fn exact_q(mdp: &FiniteMdp, pi: &TablePolicy) -> DMatrix<f64> {
    let v = exact_value(mdp, pi);
    DMatrix::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        mdp.reward[s][a] + mdp.gamma * v[mdp.next[s][a]]
    })
}

pub fn exact_return(mdp: &FiniteMdp, pi: &TablePolicy) -> f64 {
    exact_value(mdp, pi).dot(&DVector::from_column_slice(&mdp.init))
}

/// `A^{π_θ}(s, π_x(s))` for every state.
pub fn advantage_of(mdp: &FiniteMdp, theta: &TablePolicy, x: &TablePolicy) -> DVector<f64> {
    let q = exact_q(mdp, theta);
    DVector::from_fn(mdp.n_states(), |s, _| q[(s, x.0[s])] - q[(s, theta.0[s])])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdlCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// `J(π_x) − J(π_θ)` against `⟨d^{π_x}, A^{π_θ}(·, π_x(·))⟩`.
pub fn pdl_check(mdp: &FiniteMdp, theta: &TablePolicy, x: &TablePolicy) -> PdlCheck {
    let lhs = exact_return(mdp, x) - exact_return(mdp, theta);
    let rhs = exact_visitation(mdp, x).dot(&advantage_of(mdp, theta, x));
    PdlCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    }
}

/// Split of `J(π_x)` into the central-visitation estimate and the residual.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub estimate: f64,
    pub residual: f64,
    pub target: f64,
}

pub fn decomposition(mdp: &FiniteMdp, theta: &TablePolicy, x: &TablePolicy) -> Decomposition {
    let adv = advantage_of(mdp, theta, x);
    let d_theta = exact_visitation(mdp, theta);
    let d_x = exact_visitation(mdp, x);
    Decomposition {
        estimate: exact_return(mdp, theta) + d_theta.dot(&adv),
        residual: (d_x - d_theta).dot(&adv),
        target: exact_return(mdp, x),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub l_r: f64,
    pub l_p: f64,
    pub l_pi: f64,
}

impl LipschitzConstants {
    /// `γ L_p (1 + L_π)`.
    pub fn contraction(&self, gamma: f64) -> f64 {
        gamma * self.l_p * (1.0 + self.l_pi)
    }

    pub fn contracts(&self, gamma: f64) -> bool {
        self.contraction(gamma) < 1.0
    }
}

/// Exact `(L_r, L_p)` by enumerating all state-action pairs; pairs at zero
/// distance are skipped.
pub fn mdp_lipschitz(mdp: &FiniteMdp) -> (f64, f64) {
    let (mut l_r, mut l_p) = (0.0f64, 0.0f64);
    for (i, &s) in mdp.states.iter().enumerate() {
        for (a, &av) in mdp.actions.iter().enumerate() {
            for (j, &s2) in mdp.states.iter().enumerate() {
                for (b, &bv) in mdp.actions.iter().enumerate() {
                    let den = (s - s2).abs() + (av - bv).abs();
                    if den <= 0.0 {
                        continue;
                    }
                    l_r = l_r.max((mdp.reward[i][a] - mdp.reward[j][b]).abs() / den);
                    let w = (mdp.states[mdp.next[i][a]] - mdp.states[mdp.next[j][b]]).abs();
                    l_p = l_p.max(w / den);
                }
            }
        }
    }
    (l_r, l_p)
}

pub fn policy_lipschitz(mdp: &FiniteMdp, pi: &TablePolicy) -> f64 {
    let mut l = 0.0f64;
    for i in 0..mdp.n_states() {
        for j in (i + 1)..mdp.n_states() {
            let den = (mdp.states[i] - mdp.states[j]).abs();
            if den > 0.0 {
                l = l.max((mdp.actions[pi.0[i]] - mdp.actions[pi.0[j]]).abs() / den);
            }
        }
    }
    l
}

pub fn lipschitz_constants(mdp: &FiniteMdp, pi: &TablePolicy) -> LipschitzConstants {
    let (l_r, l_p) = mdp_lipschitz(mdp);
    LipschitzConstants {
        l_r,
        l_p,
        l_pi: policy_lipschitz(mdp, pi),
    }
}

fn contraction_guard(consts: &LipschitzConstants, gamma: f64) -> Result<f64> {
    let c = consts.contraction(gamma);
    if c < 1.0 {
        Ok(c)
    } else {
        Err(Error::ContractionViolated { value: c })
    }
}

/// `C = 2γ L_π L_r (1 + L_π) / (1 − γ L_p (1 + L_π))²`.
pub fn residual_constant(consts: &LipschitzConstants, gamma: f64) -> Result<f64> {
    let c = contraction_guard(consts, gamma)?;
    Ok(2.0 * gamma * consts.l_pi * consts.l_r * (1.0 + consts.l_pi) / (1.0 - c).powi(2))
}

/// Same constant with the `(1 + 2L_π)` factor that appears inside the proof.
pub fn residual_constant_proof_variant(consts: &LipschitzConstants, gamma: f64) -> Result<f64> {
    let c = contraction_guard(consts, gamma)?;
    Ok(2.0 * gamma * consts.l_pi * consts.l_r * (1.0 + 2.0 * consts.l_pi) / (1.0 - c).powi(2))
}

/// `C · sup_s ‖π_x(s) − π_θ(s)‖`.
pub fn residual_bound(consts: &LipschitzConstants, gamma: f64, sup_policy_gap: f64) -> Result<f64> {
    Ok(residual_constant(consts, gamma)? * sup_policy_gap)
}

/// Linear-policy form `C · sup_s ‖s‖ · ‖x − θ‖`.
pub fn linear_policy_bound(
    consts: &LipschitzConstants,
    gamma: f64,
    sup_state_norm: f64,
    param_distance: f64,
) -> Result<f64> {
    Ok(residual_constant(consts, gamma)? * sup_state_norm * param_distance)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub residual: f64,
    pub bound: f64,
    pub holds: bool,
    /// Bound with the proof-step `(1 + 2L_π)` factor.
    pub proof_variant_bound: f64,
    pub signed_residual: f64,
    pub l_pi: f64,
}

pub fn sup_policy_gap(mdp: &FiniteMdp, theta: &TablePolicy, x: &TablePolicy) -> f64 {
    (0..mdp.n_states())
        .map(|s| (mdp.actions[theta.0[s]] - mdp.actions[x.0[s]]).abs())
        .fold(0.0, f64::max)
}

/// Exact residual against the bound, with `L_π` the larger of the two
/// policies' constants. Errors when the contraction condition fails.
pub fn bound_check(mdp: &FiniteMdp, theta: &TablePolicy, x: &TablePolicy) -> Result<BoundCheck> {
    let (l_r, l_p) = mdp_lipschitz(mdp);
    let consts = LipschitzConstants {
        l_r,
        l_p,
        l_pi: policy_lipschitz(mdp, theta).max(policy_lipschitz(mdp, x)),
    };
    let gap = sup_policy_gap(mdp, theta, x);
    let bound = residual_bound(&consts, mdp.gamma, gap)?;
    let signed_residual = decomposition(mdp, theta, x).residual;
    let residual = signed_residual.abs();
    Ok(BoundCheck {
        residual,
        signed_residual,
        bound,
        holds: residual <= bound + EXACT_TOL,
        proof_variant_bound: residual_constant_proof_variant(&consts, mdp.gamma)? * gap,
        l_pi: consts.l_pi,
    })
}

/// `(L₁, L₂) = (L_π, L_p (1 + L_π))`.
pub fn equivalence_constants(consts: &LipschitzConstants) -> (f64, f64) {
    (consts.l_pi, consts.l_p * (1.0 + consts.l_pi))
}

/// 1-Wasserstein distance between two discrete distributions on ℝ, `∫|F − G|`.
pub fn wasserstein_1d(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    let mut events: Vec<(f64, f64)> = xa
        .iter()
        .zip(wa)
        .map(|(&x, &w)| (x, w))
        .chain(xb.iter().zip(wb).map(|(&x, &w)| (x, -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_diff = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        cdf_diff += pair[0].1;
        total += cdf_diff.abs() * (pair[1].0 - pair[0].0);
    }
    total
}

/// Distribution of the next state when `s ~ μ` and `a = π(s)`, as weights over states.
pub fn pushforward(mdp: &FiniteMdp, mu: &[f64], pi: &TablePolicy) -> Vec<f64> {
    let mut out = vec![0.0; mdp.n_states()];
    for (s, &m) in mu.iter().enumerate() {
        out[mdp.next[s][pi.0[s]]] += m;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceCheck {
    /// `W(P(μ, π₁), P(μ, π₂))` and `L₁ · sup_s |π₁(s) − π₂(s)|`.
    pub policy_lhs: f64,
    pub policy_rhs: f64,
    /// `W(P(μ₁, π), P(μ₂, π))` and `L₂ · W(μ₁, μ₂)`.
    pub state_lhs: f64,
    pub state_rhs: f64,
}

impl EquivalenceCheck {
    pub fn policy_holds(&self) -> bool {
        self.policy_lhs <= self.policy_rhs + EXACT_TOL
    }

    pub fn state_holds(&self) -> bool {
        self.state_lhs <= self.state_rhs + EXACT_TOL
    }
}

/// Both distributional inequalities for given measures and policies. `L₁` uses
/// the larger policy constant of `π₁, π₂`; `L₂` uses `π₁`'s.
pub fn equivalence_check(
    mdp: &FiniteMdp,
    mu: &[f64],
    mu2: &[f64],
    pi1: &TablePolicy,
    pi2: &TablePolicy,
) -> EquivalenceCheck {
    let (_, l_p) = mdp_lipschitz(mdp);
    let l_pi1 = policy_lipschitz(mdp, pi1);
    let l_pi = l_pi1.max(policy_lipschitz(mdp, pi2));
    let (l1, _) = equivalence_constants(&LipschitzConstants { l_r: 0.0, l_p, l_pi });
    let (_, l2) = equivalence_constants(&LipschitzConstants {
        l_r: 0.0,
        l_p,
        l_pi: l_pi1,
    });
    let xs = &mdp.states;
    EquivalenceCheck {
        policy_lhs: wasserstein_1d(xs, &pushforward(mdp, mu, pi1), xs, &pushforward(mdp, mu, pi2)),
        policy_rhs: l1 * sup_policy_gap(mdp, pi1, pi2),
        state_lhs: wasserstein_1d(xs, &pushforward(mdp, mu, pi1), xs, &pushforward(mdp, mu2, pi1)),
        state_rhs: l2 * wasserstein_1d(xs, mu, xs, mu2),
    }
}

/// R̃² of the performance-difference validation predictor built from exact
/// `Q^{π_θ}`, exact visitations and noiseless returns.
pub fn oracle_validation_r2(mdp: &FiniteMdp, central: &TablePolicy, policies: &[TablePolicy]) -> R2 {
    let q = ExactQTable::new(mdp, central);
    let j_theta = exact_return(mdp, central);
    let theta = mdp.policy(central);
    let coords: Vec<Vec<f64>> = mdp.states.iter().map(|&s| vec![s]).collect();
    let preds: Vec<f64> = policies
        .iter()
        .map(|pi| {
            let d = exact_visitation(mdp, pi);
            let batch = VisitationBatch::from_raw(coords.clone(), d.as_slice().to_vec());
            pdl_estimate(&q, j_theta, &theta, &mdp.policy(pi), &batch)
        })
        .collect();
    let targets: Vec<f64> = policies.iter().map(|pi| exact_return(mdp, pi)).collect();
    r2_score(&preds, &targets)
}

/// Central-visitation estimate `J(θ) + Σ_t γᵗ E[A^θ(s_t, x s_t)]` for linear
/// policies on an LQR, using that the advantage is a quadratic form in `s`.
pub fn lqr_estimate_term(
    lqr: &LqrEnv,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    gamma: f64,
    init: &InitialDist,
) -> Result<f64> {
    let q = lqr_exact_q(lqr, theta, gamma)?;
    let m = theta.ncols();
    let adv = |s: &DVector<f64>| q.advantage(s.as_slice(), (x * s).as_slice());
    let basis = |i: usize| DVector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 });
    let mut form = DMatrix::zeros(m, m);
    for i in 0..m {
        form[(i, i)] = adv(&basis(i));
        for j in 0..i {
            let v = 0.5 * (adv(&(basis(i) + basis(j))) - adv(&basis(i)) - adv(&basis(j)));
            form[(i, j)] = v;
            form[(j, i)] = v;
        }
    }
    let f = &lqr.a + &lqr.b * theta;
    let sigma = discounted_state_covariance(&f, &init.second_moment(), gamma)?;
    Ok(lqr_exact_return(lqr, theta, gamma, init)? + form.component_mul(&sigma).sum())
}

/// Shape of randomly generated finite MDPs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdpGenerator {
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    pub min_spacing: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl Default for MdpGenerator {
    fn default() -> Self {
        Self {
            min_states: 2,
            max_states: 8,
            min_actions: 2,
            max_actions: 4,
            min_spacing: 1e-3,
            gamma_lo: 0.1,
            gamma_hi: 0.95,
        }
    }
}

impl MdpGenerator {
    /// Smooth random MDP: states sorted in `[0, 1]`, actions in `[−2, 2]`,
    /// next state the grid point nearest to a low-order polynomial of `(s, a)`,
    /// quadratic reward, Dirichlet initial distribution. Lipschitz constants are
    /// computed afterwards, not imposed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FiniteMdp {
        loop {
            let n = rng.random_range(self.min_states..=self.max_states);
            let k = rng.random_range(self.min_actions..=self.max_actions);
            let mut states: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            states.sort_by(f64::total_cmp);
            if states.windows(2).any(|w| w[1] - w[0] < self.min_spacing) {
                continue;
            }
            let mut actions: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            actions.sort_by(f64::total_cmp);
            if actions.windows(2).any(|w| w[1] == w[0]) {
                continue;
            }
            let gamma = rng.random_range(self.gamma_lo..self.gamma_hi);
            let scales = [0.5, 0.3, 0.3, 0.2];
            let c: Vec<f64> = scales
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let cr: Vec<f64> = (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nearest = |v: f64| {
                states
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
                    .map(|(i, _)| i)
                    .unwrap()
            };
            let next = states
                .iter()
                .map(|&s| {
                    actions
                        .iter()
                        .map(|&a| {
                            let d = s - 0.5;
                            nearest(0.5 + c[0] + c[1] * d + 0.3 * c[2] * a + c[3] * d * d)
                        })
                        .collect()
                })
                .collect();
            let reward = states
                .iter()
                .map(|&s| {
                    actions
                        .iter()
                        .map(|&a| cr[0] + cr[1] * s + cr[2] * a + cr[3] * s * a + cr[4] * s * s)
                        .collect()
                })
                .collect();
            let init = random_distribution(n, rng);
            if let Ok(mdp) = FiniteMdp::new(states, actions, next, reward, gamma, init) {
                return mdp;
            }
        }
    }
}

pub fn random_policy<R: Rng + ?Sized>(mdp: &FiniteMdp, rng: &mut R) -> TablePolicy {
    TablePolicy((0..mdp.n_states()).map(|_| rng.random_range(0..mdp.n_actions())).collect())
}

/// Flat Dirichlet draw: normalized standard exponentials.
fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|p| p / total).collect()
}

/// Quartiles (linear interpolation) of a sample; `None` when empty.
pub fn quartiles(values: &[f64]) -> Option<[f64; 3]> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([q(0.25), q(0.5), q(0.75)])
}

/// Campaign sizes, seed and the reporting tolerance (the contract tolerance is
/// fixed at [`EXACT_TOL`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub pdl_mdps: usize,
    pub pdl_pairs_per_mdp: usize,
    pub bound_pairs: usize,
    pub bound_max_tries: usize,
    pub equivalence_checks: usize,
    pub report_tolerance: f64,
    pub seed: u64,
    pub generator: MdpGenerator,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            pdl_mdps: 20,
            pdl_pairs_per_mdp: 100,
            bound_pairs: 200,
            bound_max_tries: 1_000_000,
            equivalence_checks: 100,
            report_tolerance: EXACT_TOL,
            seed: 0,
            generator: MdpGenerator::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdlReport {
    pub instances: usize,
    pub max_gap: f64,
    pub max_decomposition_gap: f64,
    pub violations: usize,
    pub above_report_tolerance: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub residual: f64,
    pub bound: f64,
    pub l_pi: f64,
    pub mdp: FiniteMdp,
    pub theta: TablePolicy,
    pub x: TablePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub eligible: usize,
    pub skipped_non_contracting: usize,
    pub violations: usize,
    pub above_report_tolerance: usize,
    /// Violations among pairs of constant policies (`L_π = 0`, hence a zero bound).
    pub violations_constant_policies: usize,
    pub proof_variant_violations: usize,
    /// Violations of the one-sided form (signed residual above the bound).
    pub signed_violations: usize,
    /// Eligible pairs whose residual is not exactly zero.
    pub nonzero_residual: usize,
    pub max_excess: f64,
    /// Quartiles of residual / bound over pairs with a positive bound.
    pub ratio_quartiles: Option<[f64; 3]>,
    pub first_violation: Option<BoundViolation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub checks: usize,
    pub policy_violations: usize,
    pub state_violations: usize,
    pub above_report_tolerance: usize,
    pub max_policy_excess: f64,
    pub max_state_excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub contract_tolerance: f64,
    pub report_tolerance: f64,
    pub pdl: PdlReport,
    pub bound: BoundReport,
    pub equivalence: EquivalenceReport,
}

impl CampaignReport {
    pub fn total_violations(&self) -> usize {
        self.pdl.violations
            + self.bound.violations
            + self.equivalence.policy_violations
            + self.equivalence.state_violations
    }
}

fn campaign_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn pdl_campaign(cfg: &CampaignConfig) -> PdlReport {
    let mut rng = campaign_rng(cfg.seed, 1);
    let mut report = PdlReport {
        instances: 0,
        max_gap: 0.0,
        max_decomposition_gap: 0.0,
        violations: 0,
        above_report_tolerance: 0,
    };
    for _ in 0..cfg.pdl_mdps {
        let mdp = cfg.generator.sample(&mut rng);
        for _ in 0..cfg.pdl_pairs_per_mdp {
            let theta = random_policy(&mdp, &mut rng);
            let x = random_policy(&mdp, &mut rng);
            let check = pdl_check(&mdp, &theta, &x);
            let dec = decomposition(&mdp, &theta, &x);
            let dec_gap = (dec.estimate + dec.residual - dec.target).abs();
            report.instances += 1;
            report.max_gap = report.max_gap.max(check.gap);
            report.max_decomposition_gap = report.max_decomposition_gap.max(dec_gap);
            let worst = check.gap.max(dec_gap);
            report.violations += (worst >= EXACT_TOL) as usize;
            report.above_report_tolerance += (worst >= cfg.report_tolerance) as usize;
        }
    }
    report
}

pub fn bound_campaign(cfg: &CampaignConfig) -> BoundReport {
    let mut rng = campaign_rng(cfg.seed, 2);
    let mut report = BoundReport {
        eligible: 0,
        skipped_non_contracting: 0,
        violations: 0,
        above_report_tolerance: 0,
        violations_constant_policies: 0,
        proof_variant_violations: 0,
        signed_violations: 0,
        nonzero_residual: 0,
        max_excess: 0.0,
        ratio_quartiles: None,
        first_violation: None,
    };
    let mut ratios = Vec::new();
    let mut tries = 0;
    while report.eligible < cfg.bound_pairs && tries < cfg.bound_max_tries {
        tries += 1;
        let mdp = cfg.generator.sample(&mut rng);
        let theta = random_policy(&mdp, &mut rng);
        let x = random_policy(&mdp, &mut rng);
        let Ok(check) = bound_check(&mdp, &theta, &x) else {
            report.skipped_non_contracting += 1;
            continue;
        };
        report.eligible += 1;
        let excess = check.residual - check.bound;
        report.max_excess = report.max_excess.max(excess);
        if !check.holds {
            report.violations += 1;
            if check.l_pi == 0.0 {
                report.violations_constant_policies += 1;
            }
            if report.first_violation.is_none() {
                report.first_violation = Some(BoundViolation {
                    residual: check.residual,
                    bound: check.bound,
                    l_pi: check.l_pi,
                    mdp: mdp.clone(),
                    theta: theta.clone(),
                    x: x.clone(),
                });
            }
        }
        report.above_report_tolerance += (excess > cfg.report_tolerance) as usize;
        report.proof_variant_violations +=
            (check.residual > check.proof_variant_bound + EXACT_TOL) as usize;
        report.signed_violations += (check.signed_residual > check.bound + EXACT_TOL) as usize;
        report.nonzero_residual += (check.residual != 0.0) as usize;
        if check.bound > 0.0 {
            ratios.push(check.residual / check.bound);
        }
    }
    report.ratio_quartiles = quartiles(&ratios);
    report
}

pub fn equivalence_campaign(cfg: &CampaignConfig) -> EquivalenceReport {
    let mut rng = campaign_rng(cfg.seed, 3);
    let mut report = EquivalenceReport {
        checks: 0,
        policy_violations: 0,
        state_violations: 0,
        above_report_tolerance: 0,
        max_policy_excess: 0.0,
        max_state_excess: 0.0,
    };
    for _ in 0..cfg.equivalence_checks {
        let mdp = cfg.generator.sample(&mut rng);
        let n = mdp.n_states();
        let mu = random_distribution(n, &mut rng);
        let mu2 = random_distribution(n, &mut rng);
        let pi1 = random_policy(&mdp, &mut rng);
        let pi2 = random_policy(&mdp, &mut rng);
        let check = equivalence_check(&mdp, &mu, &mu2, &pi1, &pi2);
        report.checks += 1;
        let pe = check.policy_lhs - check.policy_rhs;
        let se = check.state_lhs - check.state_rhs;
        report.max_policy_excess = report.max_policy_excess.max(pe);
        report.max_state_excess = report.max_state_excess.max(se);
        report.policy_violations += (!check.policy_holds()) as usize;
        report.state_violations += (!check.state_holds()) as usize;
        report.above_report_tolerance += (pe.max(se) > cfg.report_tolerance) as usize;
    }
    report
}

pub fn run_campaigns(cfg: &CampaignConfig) -> CampaignReport {
    CampaignReport {
        contract_tolerance: EXACT_TOL,
        report_tolerance: cfg.report_tolerance,
        pdl: pdl_campaign(cfg),
        bound: bound_campaign(cfg),
        equivalence: equivalence_campaign(cfg),
    }
}
