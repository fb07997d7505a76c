//! The `--config` file and the flags > file > defaults layering.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toprokit::calibrate::CalibrationConfig;
use toprokit::kernel::{Accumulation, Precision};
use toprokit::policy::PolicyConfig;
use toprokit::toy::ToyModelConfig;

use crate::error::{require, CliError};

/// Attention engine selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Dense reference that materializes the full score matrix.
    Naive,
    /// Blocked streaming attention, output only.
    Flash,
    /// Blocked streaming attention with entropy.
    Fae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSection {
    pub block_rows: Option<usize>,
    pub block_cols: Option<usize>,
    pub precision: Option<Precision>,
    pub accumulation: Option<Accumulation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropySection {
    pub engine: Option<Engine>,
    pub softmax_scale: Option<f64>,
    pub naive_guard: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub n: Option<Vec<usize>>,
    pub d: Option<usize>,
    pub blocks: Option<Vec<(usize, usize)>>,
    pub reps: Option<usize>,
    pub engines: Option<Vec<Engine>>,
    pub seed: Option<u64>,
    pub naive_guard: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub preset: Option<String>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub toy: ToyModelConfig,
    pub policy: PolicyConfig,
    pub block: BlockSection,
    pub entropy: EntropySection,
    pub calibration: CalibrationConfig,
    pub bench: BenchSection,
    pub bounds: BoundsSection,
    /// Whether the file set `policy.alpha_min` itself.
    #[serde(skip)]
    pub alpha_min_given: bool,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw: serde_json::Value = read_json(path)?;
        let alpha_min_given = raw
            .get("policy")
            .and_then(|p| p.get("alpha_min"))
            .is_some();
        let mut cfg: Self = serde_json::from_value(raw).map_err(|e| CliError::invalid_input(path, e))?;
        cfg.alpha_min_given = alpha_min_given;
        Ok(cfg)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| CliError::invalid_input(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid_input(path, e))
}

/// Parses a flag value through the type's serde names, so flags and config
/// files accept the same spellings.
pub fn parse_named<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Parses `ROWSxCOLS`.
pub fn parse_block(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(r)?, parse(c)?))
}
