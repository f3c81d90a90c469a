//! Declarative run configuration with dot-path overrides.

use std::path::{Path, PathBuf};

use capsnet::data::{NoiseKind, NoiseSpec};
use capsnet::network::ArchitectureSpec;
use capsnet::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "CAPSNET_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory the file names below are resolved against; falls back to
    /// `$CAPSNET_DATA_DIR`, then the working directory.
    pub dir: Option<PathBuf>,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Samples held out of the training file for validation. With 0 the
    /// test split doubles as the validation set.
    pub n_val: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "test-images-idx3-ubyte".into(),
            test_labels: "test-labels-idx1-ubyte".into(),
            n_val: 5000,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, file: &Path) -> PathBuf {
        match &self.dir {
            Some(d) => d.join(file),
            None => file.to_path_buf(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Samples per class in reconstruction grids.
    pub per_class: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { per_class: 1 }
    }
}

/// The four corruptions at their documented default intensities.
pub fn default_noise() -> Vec<NoiseSpec> {
    vec![
        NoiseSpec::new(NoiseKind::Pepper, 0.05, 0),
        NoiseSpec::new(NoiseKind::Gaussian, 0.05, 0),
        NoiseSpec::new(NoiseKind::Speckle, 0.1, 0),
        NoiseSpec::new(NoiseKind::Blur, 0.8, 0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ArchitectureSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_noise")]
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub report: ReportConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            data: DataConfig::default(),
            model: ArchitectureSpec::default(),
            train: TrainConfig::default(),
            noise: default_noise(),
            report: ReportConfig::default(),
        }
    }
}

/// Parse an override value as a TOML scalar/array, falling back to a bare
/// string (so `data.dir=/tmp/x` needs no quoting).
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `a.b.c = value` inside `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key {key:?} is malformed")));
    }
    let mut table = root;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Which top-level sections were given explicitly (before defaults).
#[derive(Debug, Clone, Default)]
pub struct Explicit {
    pub model: bool,
}

/// Load the file (if any), apply overrides, then fill defaults. Unknown
/// keys anywhere are rejected.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<(AppConfig, Explicit), CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let explicit = Explicit {
        model: root.contains_key("model"),
    };
    let mut cfg: AppConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    if cfg.data.dir.is_none() {
        cfg.data.dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    cfg.model.validate().map_err(CliError::from_core)?;
    cfg.train.validate().map_err(CliError::from_core)?;
    for n in &cfg.noise {
        n.validate().map_err(CliError::from_core)?;
    }
    Ok((cfg, explicit))
}

pub fn to_toml(cfg: &AppConfig) -> String {
    toml::to_string(cfg).unwrap_or_else(|e| format!("# could not render config: {e}\n"))
}
