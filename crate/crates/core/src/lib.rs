//! Augmented Bayesian Search: local Bayesian optimization of linear policies
//! with a Gaussian process whose prior mean is an advantage estimate from a
//! critic ensemble, together with MPD and ARS baselines and exact oracles for
//! the underlying return-difference identities.

pub mod acquisition;
pub mod critic;
pub mod envsim;
pub mod error;
pub mod gpcore;
pub mod linalg;
pub mod search;
pub mod theory;

pub use nalgebra;

pub use critic::{CriticConfig, CriticEnsemble, QFunction, ReturnScaler};
pub use envsim::{make_env, Environment, PolicyParams, StateNormalizer};
pub use error::{Error, Result};
pub use gpcore::{GpModel, HyperPriors, Interval, KernelHyper, MeanFn};
pub use search::{Algorithm, HistoryRow, RunHistory, SearchConfig};
pub use theory::{CampaignConfig, CampaignReport};
