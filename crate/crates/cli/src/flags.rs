//! Command-line flags. Every configuration field has a `--kebab-case` flag;
//! a flag that is given overrides the value from the configuration file.

use std::path::PathBuf;

use abs_core::search::{Algorithm, SearchConfig};
use abs_core::theory::CampaignConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "abs", version, about = "Augmented Bayesian Search experiments")]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one policy search and write its history.
    Run(RunArgs),
    /// Run the theory verification campaigns and print a JSON report.
    Verify(VerifyArgs),
    /// Run a grid of environments and seeds, one process per run.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML or JSON experiment configuration (`.json` selects JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "ABS_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[command(flatten)]
    pub search: SearchFlags,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub campaign: CampaignFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root directory; each run writes to `<out-dir>/<env>/seed-<seed>`.
    #[arg(long, env = "ABS_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Seeds as a list and/or ranges, e.g. `0..5`, `0..=4`, `1,3,7`.
    #[arg(long, default_value = "0..5")]
    pub seeds: String,
    /// Comma-separated environment names (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    pub envs: Vec<String>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[command(flatten)]
    pub search: SearchFlags,
}

#[derive(Debug, Default, Args)]
pub struct SearchFlags {
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, alias = "algo")]
    pub algorithm: Option<Algorithm>,
    #[arg(long, alias = "iters")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub acquisitions: Option<usize>,
    #[arg(long)]
    pub central_rollouts: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub mpd_learning_rate: Option<f64>,
    #[arg(long)]
    pub mpd_substeps: Option<usize>,
    #[arg(long)]
    pub max_points: Option<usize>,
    #[arg(long)]
    pub lengthscale_prior_lo: Option<f64>,
    #[arg(long)]
    pub lengthscale_prior_hi: Option<f64>,
    #[arg(long)]
    pub signal_prior_lo: Option<f64>,
    #[arg(long)]
    pub signal_prior_hi: Option<f64>,
    #[arg(long)]
    pub noise_prior_lo: Option<f64>,
    #[arg(long)]
    pub noise_prior_hi: Option<f64>,
    #[arg(long)]
    pub dynamic_hyperpriors: Option<bool>,
    #[arg(long)]
    pub gp_restarts: Option<usize>,
    #[arg(long)]
    pub acquisition_restarts: Option<usize>,
    #[arg(long)]
    pub search_radius: Option<f64>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
    #[arg(long)]
    pub critic_steps: Option<usize>,
    /// Hidden widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub critic_hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub critic_dropout: Option<f64>,
    #[arg(long)]
    pub critic_learning_rate: Option<f64>,
    #[arg(long)]
    pub critic_polyak: Option<f64>,
    #[arg(long)]
    pub critic_batch_size: Option<usize>,
    #[arg(long)]
    pub replay_capacity: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub deterministic_init: Option<bool>,
    #[arg(long)]
    pub ars_directions: Option<usize>,
    #[arg(long)]
    pub ars_top: Option<usize>,
    #[arg(long)]
    pub ars_step: Option<f64>,
    #[arg(long)]
    pub ars_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub record_wall_time: Option<bool>,
}

fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *dst = v.clone();
    }
}

impl SearchFlags {
    pub fn apply(&self, c: &mut SearchConfig) {
        set(&mut c.env, &self.env);
        set(&mut c.algorithm, &self.algorithm);
        set(&mut c.iterations, &self.iterations);
        set(&mut c.acquisitions, &self.acquisitions);
        set(&mut c.central_rollouts, &self.central_rollouts);
        set(&mut c.step_size, &self.step_size);
        set(&mut c.mpd_learning_rate, &self.mpd_learning_rate);
        set(&mut c.mpd_substeps, &self.mpd_substeps);
        if self.max_points.is_some() {
            c.max_points = self.max_points;
        }
        set(&mut c.lengthscale_prior.lo, &self.lengthscale_prior_lo);
        set(&mut c.lengthscale_prior.hi, &self.lengthscale_prior_hi);
        set(&mut c.signal_prior.lo, &self.signal_prior_lo);
        set(&mut c.signal_prior.hi, &self.signal_prior_hi);
        set(&mut c.noise_prior.lo, &self.noise_prior_lo);
        set(&mut c.noise_prior.hi, &self.noise_prior_hi);
        set(&mut c.dynamic_hyperpriors, &self.dynamic_hyperpriors);
        set(&mut c.gp_restarts, &self.gp_restarts);
        set(&mut c.acquisition_restarts, &self.acquisition_restarts);
        if self.search_radius.is_some() {
            c.search_radius = self.search_radius;
        }
        set(&mut c.ensemble_size, &self.ensemble_size);
        set(&mut c.critic_steps, &self.critic_steps);
        set(&mut c.critic.hidden, &self.critic_hidden);
        set(&mut c.critic.dropout, &self.critic_dropout);
        set(&mut c.critic.learning_rate, &self.critic_learning_rate);
        set(&mut c.critic.polyak, &self.critic_polyak);
        set(&mut c.critic.batch_size, &self.critic_batch_size);
        set(&mut c.replay_capacity, &self.replay_capacity);
        if self.horizon.is_some() {
            c.horizon = self.horizon;
        }
        if self.gamma.is_some() {
            c.gamma = self.gamma;
        }
        set(&mut c.deterministic_init, &self.deterministic_init);
        set(&mut c.ars_directions, &self.ars_directions);
        set(&mut c.ars_top, &self.ars_top);
        set(&mut c.ars_step, &self.ars_step);
        set(&mut c.ars_noise, &self.ars_noise);
        set(&mut c.seed, &self.seed);
        set(&mut c.record_wall_time, &self.record_wall_time);
    }
}

#[derive(Debug, Default, Args)]
pub struct CampaignFlags {
    #[arg(long)]
    pub pdl_mdps: Option<usize>,
    #[arg(long)]
    pub pdl_pairs_per_mdp: Option<usize>,
    #[arg(long)]
    pub bound_pairs: Option<usize>,
    #[arg(long)]
    pub bound_max_tries: Option<usize>,
    #[arg(long)]
    pub equivalence_checks: Option<usize>,
    /// Gaps above this are counted separately from contract violations.
    #[arg(long)]
    pub report_tolerance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_states: Option<usize>,
    #[arg(long)]
    pub max_states: Option<usize>,
    #[arg(long)]
    pub min_actions: Option<usize>,
    #[arg(long)]
    pub max_actions: Option<usize>,
    #[arg(long)]
    pub min_spacing: Option<f64>,
    #[arg(long)]
    pub gamma_lo: Option<f64>,
    #[arg(long)]
    pub gamma_hi: Option<f64>,
}

impl CampaignFlags {
    pub fn apply(&self, c: &mut CampaignConfig) {
        set(&mut c.pdl_mdps, &self.pdl_mdps);
        set(&mut c.pdl_pairs_per_mdp, &self.pdl_pairs_per_mdp);
        set(&mut c.bound_pairs, &self.bound_pairs);
        set(&mut c.bound_max_tries, &self.bound_max_tries);
        set(&mut c.equivalence_checks, &self.equivalence_checks);
        set(&mut c.report_tolerance, &self.report_tolerance);
        set(&mut c.seed, &self.seed);
        let g = &mut c.generator;
        set(&mut g.min_states, &self.min_states);
        set(&mut g.max_states, &self.max_states);
        set(&mut g.min_actions, &self.min_actions);
        set(&mut g.max_actions, &self.max_actions);
        set(&mut g.min_spacing, &self.min_spacing);
        set(&mut g.gamma_lo, &self.gamma_lo);
        set(&mut g.gamma_hi, &self.gamma_hi);
    }
}

/// Parses `0..5`, `0..=4`, `7` and comma-separated mixtures of them.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed `{s}` in `{spec}`: {e}"))
        };
        if let Some((a, b)) = part.split_once("..=") {
            out.extend(num(a)?..=num(b)?);
        } else if let Some((a, b)) = part.split_once("..") {
            out.extend(num(a)?..num(b)?);
        } else {
            out.push(num(part)?);
        }
    }
    if out.is_empty() {
        return Err(format!("no seeds in `{spec}`"));
    }
    Ok(out)
}
