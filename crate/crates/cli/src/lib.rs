//! Library backing the `si-agent` binary: config loading, report and
//! comparison generation, and the bootstrap significance test. Command
//! wiring lives in `main.rs`; everything here is directly testable.

pub mod compare;
pub mod report;
pub mod stats;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use si_agent_core::{Dataset, RunConfig, Weights};

/// A run config plus the dataset it applies to, as stored in config files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AppConfig {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(flatten)]
    pub run: RunConfig,
}

/// Loads a JSON config file. Unset keys take their defaults.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let config: AppConfig = serde_json::from_str(&raw)
        .with_context(|| format!("cannot parse config {}", path.display()))?;
    Ok(config)
}

/// Resolves the config's dataset path: as given when it exists from the
/// working directory, else relative to the config file's directory.
pub fn resolve_dataset_path(config_path: &Path, dataset: &str) -> PathBuf {
    let direct = PathBuf::from(dataset);
    if direct.exists() {
        return direct;
    }
    match config_path.parent() {
        Some(dir) => {
            let sibling = dir.join(dataset);
            if sibling.exists() {
                sibling
            } else {
                // also try one level up: configs typically sit in a subdir
                let up = dir.join("..").join(dataset);
                if up.exists() {
                    up
                } else {
                    direct
                }
            }
        }
        None => direct,
    }
}

/// Loads the dataset referenced by a config.
pub fn load_config_dataset(config_path: &Path, config: &AppConfig) -> Result<Dataset> {
    let dataset = config
        .dataset
        .as_deref()
        .context("config has no \"dataset\" path")?;
    let path = resolve_dataset_path(config_path, dataset);
    si_agent_core::load_dataset(&path)
        .with_context(|| format!("cannot load dataset {}", path.display()))
}

/// Parses the `--weights perf=X,read=Y` flag.
pub fn parse_weights(spec: &str) -> Result<Weights> {
    let mut performance = None;
    let mut readability = None;
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("bad weights component \"{part}\""))?;
        let value: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("bad weight value \"{value}\""))?;
        match key.trim() {
            "perf" | "performance" => performance = Some(value),
            "read" | "readability" => readability = Some(value),
            other => bail!("unknown weight key \"{other}\" (use perf=..,read=..)"),
        }
    }
    match (performance, readability) {
        (Some(p), Some(r)) => Ok(Weights::new(p, r)?),
        _ => bail!("weights need both perf= and read= components"),
    }
}

/// Outcome of one preference-labeling prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelChoice {
    /// Chosen id first, rejected second.
    Record {
        chosen: String,
        rejected: String,
    },
    Skip,
    Invalid,
}

/// Maps the operator's reply (1/2/skip) onto a preference record.
pub fn parse_label_choice(input: &str, id_a: &str, id_b: &str) -> LabelChoice {
    match input.trim() {
        "1" => LabelChoice::Record {
            chosen: id_a.to_string(),
            rejected: id_b.to_string(),
        },
        "2" => LabelChoice::Record {
            chosen: id_b.to_string(),
            rejected: id_a.to_string(),
        },
        "skip" => LabelChoice::Skip,
        _ => LabelChoice::Invalid,
    }
}

/// Formats a float for CSV/markdown output: six decimals, trailing zeros and
/// a trailing dot trimmed. Stable across platforms.
pub fn fmt_float(value: f64) -> String {
    let mut s = format!("{value:.6}");
    while s.contains('.') && s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}
