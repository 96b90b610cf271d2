//! Experiment configuration files: TOML or JSON, unknown keys rejected,
//! diagnostics that point at the offending line.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use abs_core::search::SearchConfig;
use abs_core::theory::CampaignConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory receiving `history.csv`, `config.resolved.json` and
    /// `final_policy.json`.
    pub output_dir: PathBuf,
    /// Log progress every this many episodes (0 disables).
    pub log_every: usize,
    pub search: SearchConfig,
    pub campaign: CampaignConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/latest"),
            log_every: 10,
            search: SearchConfig::default(),
            campaign: CampaignConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

/// A configuration problem, located in its source file when possible.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub path: Option<PathBuf>,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        Self {
            path: None,
            line: None,
            column: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(p) = &self.path {
            write!(f, "{}", p.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
                if let Some(c) = self.column {
                    write!(f, ":{c}")?;
                }
            }
            write!(f, ": ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// 1-based line and column of a byte offset.
fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(source.len());
    let before = &source[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    (line, col)
}

pub fn parse(source: &str, format: Format) -> Result<ExperimentConfig, ConfigError> {
    match format {
        Format::Toml => toml::from_str(source).map_err(|e| {
            let (line, column) = match e.span() {
                Some(Range { start, .. }) => {
                    let (l, c) = line_col(source, start);
                    (Some(l), Some(c))
                }
                None => (None, None),
            };
            ConfigError {
                path: None,
                line,
                column,
                message: e.message().trim().to_string(),
            }
        }),
        Format::Json => serde_json::from_str(source).map_err(|e| ConfigError {
            path: None,
            line: Some(e.line()),
            column: Some(e.column()),
            message: strip_json_position(&e.to_string()),
        }),
    }
}

fn strip_json_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|e| ConfigError {
        path: Some(path.to_path_buf()),
        line: None,
        column: None,
        message: format!("cannot read configuration: {e}"),
    })?;
    let cfg = parse(&source, Format::of(path)).map_err(|mut e| {
        e.path = Some(path.to_path_buf());
        e
    })?;
    Ok(cfg)
}

/// Line on which `key` is assigned in a TOML or JSON source, if any.
pub fn locate_key(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|line| {
        let t = line.trim_start();
        let rest = t
            .strip_prefix(key)
            .or_else(|| t.strip_prefix(&format!("\"{key}\"")));
        rest.is_some_and(|r| {
            let r = r.trim_start();
            r.starts_with('=') || r.starts_with(':')
        })
    })
    .map(|i| i + 1)
}

/// Semantic validation of a parsed configuration. When the file is known the
/// diagnostic points at the line assigning the offending key.
pub fn validate(cfg: &ExperimentConfig, source: Option<(&Path, &str)>) -> Result<(), ConfigError> {
    let message = match cfg.search.validate() {
        Ok(()) => return Ok(()),
        Err(e) => e.to_string(),
    };
    let mut err = ConfigError::new(message.clone());
    if let Some((path, text)) = source {
        err.path = Some(path.to_path_buf());
        let detail = message
            .strip_prefix("invalid configuration: ")
            .unwrap_or(&message);
        let key: String = detail
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
            .collect();
        err.line = [key.clone(), format!("{key}_prior")]
            .iter()
            .filter(|k| !k.is_empty())
            .find_map(|k| locate_key(text, k));
    }
    Err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_both_formats() {
        let cfg = ExperimentConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse(&json, Format::Json).unwrap(), cfg);
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse(&toml_text, Format::Toml).unwrap(), cfg);
    }

    #[test]
    fn empty_file_means_defaults() {
        assert_eq!(parse("", Format::Toml).unwrap(), ExperimentConfig::default());
        assert_eq!(parse("{}", Format::Json).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_reported_with_its_line() {
        let src = "log_every = 5\n\n[search]\niterations = 3\nbogus_key = 1\n";
        let err = parse(src, Format::Toml).unwrap_err();
        assert_eq!(err.line, Some(5));
        assert!(err.message.contains("bogus_key"), "{}", err.message);

        let src = "{\n  \"search\": {\n    \"iterations\": 3,\n    \"nope\": true\n  }\n}";
        let err = parse(src, Format::Json).unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.message.contains("nope"));
    }

    #[test]
    fn type_errors_are_located() {
        let src = "[search]\nseed = \"zero\"\n";
        let err = parse(src, Format::Toml).unwrap_err();
        assert_eq!(err.line, Some(2));
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let src = "[search]\nalgorithm = \"ars\"\niterations = 0\n";
        let cfg = parse(src, Format::Toml).unwrap();
        let err = validate(&cfg, Some((Path::new("x.toml"), src))).unwrap_err();
        assert_eq!(err.line, Some(3));
        assert!(err.to_string().starts_with("x.toml:3: "), "{err}");
    }

    #[test]
    fn line_col_is_one_based() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
