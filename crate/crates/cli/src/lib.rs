//! The `abs` experiment runner.
//!
//! Exit codes: 0 success, 1 runtime failure (partial history kept),
//! 2 invalid configuration or usage, 3 verification violations.

pub mod config;
pub mod flags;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use abs_core::search::{self, HistoryRow, RunHistory, SearchConfig, HISTORY_HEADER};
use abs_core::theory::run_campaigns;
use serde::Serialize;

use config::{ConfigError, ExperimentConfig};
use flags::{Command, RunArgs, SweepArgs, VerifyArgs};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(String),
    Violations(usize),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Violations(_) => 3,
        })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "invalid configuration: {e}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Violations(n) => write!(f, "{n} verification violation(s)"),
        }
    }
}

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => run_command(&args),
        Command::Verify(args) => verify_command(&args),
        Command::Sweep(args) => sweep_command(&args),
    }
}

/// Reads the optional configuration file; returns the parsed config and its
/// source text for located validation errors.
fn read_config(path: Option<&Path>) -> Result<(ExperimentConfig, Option<(PathBuf, String)>), CliError> {
    match path {
        None => Ok((ExperimentConfig::default(), None)),
        Some(p) => {
            let cfg = config::load(p).map_err(CliError::Config)?;
            let text = fs::read_to_string(p).unwrap_or_default();
            Ok((cfg, Some((p.to_path_buf(), text))))
        }
    }
}

fn check(cfg: &ExperimentConfig, source: &Option<(PathBuf, String)>) -> Result<(), CliError> {
    let src = source.as_ref().map(|(p, t)| (p.as_path(), t.as_str()));
    config::validate(cfg, src).map_err(CliError::Config)
}

/// Applies file, flags and the output-directory override, then validates.
pub fn resolve_run(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let (mut cfg, source) = read_config(args.config.as_deref())?;
    args.search.apply(&mut cfg.search);
    if let Some(d) = &args.out_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(n) = args.log_every {
        cfg.log_every = n;
    }
    check(&cfg, &source)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct FinalPolicy<'a> {
    algorithm: &'a str,
    env: &'a str,
    seed: u64,
    episodes: u64,
    action_dim: usize,
    state_dim: usize,
    /// Rows of the policy matrix acting on normalized states.
    theta: Vec<Vec<f64>>,
    normalizer_mean: &'a [f64],
    normalizer_variance: Vec<f64>,
    /// The same policy on raw states: `a = raw_gain · s + raw_offset`.
    raw_gain: Vec<Vec<f64>>,
    raw_offset: Vec<f64>,
}

fn matrix_rows(m: &abs_core::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn write_final_policy(path: &Path, cfg: &SearchConfig, history: &RunHistory) -> Result<(), CliError> {
    let snap = history
        .final_snapshot()
        .ok_or_else(|| CliError::Runtime("run produced no policy".into()))?;
    let (gain, offset) = snap.normalizer.affine_policy(&snap.params);
    let doc = FinalPolicy {
        algorithm: cfg.algorithm.name(),
        env: &cfg.env,
        seed: cfg.seed,
        episodes: snap.episodes,
        action_dim: snap.params.action_dim(),
        state_dim: snap.params.state_dim(),
        theta: matrix_rows(&snap.params.matrix()),
        normalizer_mean: snap.normalizer.mean(),
        normalizer_variance: snap.normalizer.variance(),
        raw_gain: matrix_rows(&gain),
        raw_offset: offset.iter().copied().collect(),
    };
    write_json(path, &doc)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

/// Runs one search into `cfg.output_dir`.
pub fn execute_run(cfg: &ExperimentConfig) -> Result<RunHistory, CliError> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    write_json(&dir.join("config.resolved.json"), cfg)?;

    let history_path = dir.join("history.csv");
    let file = File::create(&history_path).map_err(|e| io_err("cannot create", &history_path, e))?;
    // The header goes out (and is flushed) before the first episode runs.
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| abs_core::Error::Output(format!("history.csv: {e}"));
    writer.write_record(HISTORY_HEADER).map_err(|e| CliError::Runtime(e.to_string()))?;
    writer.flush().map_err(|e| io_err("cannot write", &history_path, e))?;

    let total = cfg.search.total_episodes();
    let log_every = cfg.log_every as u64;
    let mut sink = |row: &HistoryRow| -> abs_core::Result<()> {
        writer.serialize(row).map_err(csv_err)?;
        writer
            .flush()
            .map_err(|e| abs_core::Error::Output(format!("history.csv: {e}")))?;
        if log_every > 0 && row.episode.is_multiple_of(log_every) {
            log::info!(
                "episode {}/{total}: return {:.6}, best {:.6}",
                row.episode,
                row.return_hat,
                row.best_return
            );
        }
        Ok(())
    };
    match search::run(&cfg.search, &mut sink) {
        Ok(history) => {
            write_final_policy(&dir.join("final_policy.json"), &cfg.search, &history)?;
            log::info!(
                "{} on {} finished: {} episodes, best return {:.6}",
                cfg.search.algorithm.name(),
                cfg.search.env,
                history.rows.len(),
                history.best_return()
            );
            Ok(history)
        }
        Err(abort) => Err(CliError::Runtime(format!(
            "{abort}; partial history in {}",
            history_path.display()
        ))),
    }
}

fn run_command(args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve_run(args)?;
    execute_run(&cfg).map(|_| ())
}

fn verify_command(args: &VerifyArgs) -> Result<(), CliError> {
    let (mut cfg, _) = read_config(args.config.as_deref())?;
    args.campaign.apply(&mut cfg.campaign);
    let c = &cfg.campaign;
    let g = &c.generator;
    if g.min_states == 0
        || g.min_states > g.max_states
        || g.min_actions == 0
        || g.min_actions > g.max_actions
        || !(g.gamma_lo > 0.0 && g.gamma_lo <= g.gamma_hi && g.gamma_hi < 1.0)
        || !(c.report_tolerance >= 0.0)
    {
        return Err(CliError::Config(ConfigError::new(format!(
            "campaign generator or tolerance out of range: {c:?}"
        ))));
    }
    let report = run_campaigns(c);
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    print!("{text}");
    std::io::stdout().flush().ok();
    if let Some(path) = &args.report {
        fs::write(path, &text).map_err(|e| io_err("cannot write", path, e))?;
    }
    match report.total_violations() {
        0 => Ok(()),
        n => Err(CliError::Violations(n)),
    }
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    env: String,
    seed: u64,
    exit_code: i32,
    episodes: usize,
    best_return: f64,
    output_dir: String,
}

fn last_best(history: &Path) -> (usize, f64) {
    let Ok(mut reader) = csv::Reader::from_path(history) else {
        return (0, f64::NAN);
    };
    let rows: Vec<HistoryRow> = reader.deserialize().filter_map(|r| r.ok()).collect();
    (rows.len(), rows.last().map_or(f64::NAN, |r| r.best_return))
}

fn sweep_command(args: &SweepArgs) -> Result<(), CliError> {
    let (mut base, source) = read_config(args.config.as_deref())?;
    args.search.apply(&mut base.search);
    if let Some(n) = args.log_every {
        base.log_every = n;
    }
    let root = args.out_dir.clone().unwrap_or_else(|| base.output_dir.clone());
    let seeds = flags::parse_seeds(&args.seeds).map_err(|e| CliError::Config(ConfigError::new(e)))?;
    let envs = if args.envs.is_empty() {
        vec![base.search.env.clone()]
    } else {
        args.envs.clone()
    };
    let mut runs = Vec::new();
    for env in &envs {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.search.env = env.clone();
            cfg.search.seed = seed;
            cfg.output_dir = root.join(env).join(format!("seed-{seed}"));
            check(&cfg, &source)?;
            runs.push(cfg);
        }
    }

    let exe = std::env::current_exe().map_err(|e| CliError::Runtime(format!("cannot locate abs: {e}")))?;
    let verbosity = log::max_level() as usize;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; runs.len()]);
    let worker = || -> Result<(), CliError> {
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(cfg) = runs.get(i) else {
                return Ok(());
            };
            let dir = &cfg.output_dir;
            fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
            let input = dir.join("config.input.json");
            write_json(&input, cfg)?;
            let mut cmd = std::process::Command::new(&exe);
            if verbosity > log::LevelFilter::Warn as usize {
                cmd.arg(format!("-{}", "v".repeat(verbosity - log::LevelFilter::Warn as usize)));
            }
            let status = cmd
                .arg("run")
                .arg("--config")
                .arg(&input)
                .arg("--out-dir")
                .arg(dir)
                .env_remove("ABS_OUT_DIR")
                .status()
                .map_err(|e| CliError::Runtime(format!("cannot start run: {e}")))?;
            let (episodes, best_return) = last_best(&dir.join("history.csv"));
            let row = SweepRow {
                env: cfg.search.env.clone(),
                seed: cfg.search.seed,
                exit_code: status.code().unwrap_or(-1),
                episodes,
                best_return,
                output_dir: dir.display().to_string(),
            };
            log::info!("{} seed {}: exit {}", row.env, row.seed, row.exit_code);
            results.lock().expect("results lock")[i] = Some(row);
        }
    };
    let jobs = args.jobs.clamp(1, runs.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs).map(|_| s.spawn(worker)).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect::<Result<Vec<()>, CliError>>()
    })?;

    let rows: Vec<SweepRow> = results.into_inner().expect("results lock").into_iter().flatten().collect();
    fs::create_dir_all(&root).map_err(|e| io_err("cannot create", &root, e))?;
    let summary = root.join("sweep.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| io_err("cannot create", &summary, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| io_err("cannot write", &summary, e))?;
    }
    w.flush().map_err(|e| io_err("cannot write", &summary, e))?;
    let failed = rows.iter().filter(|r| r.exit_code != 0).count();
    if failed > 0 {
        return Err(CliError::Runtime(format!(
            "{failed} of {} runs failed; see {}",
            rows.len(),
            summary.display()
        )));
    }
    Ok(())
}
