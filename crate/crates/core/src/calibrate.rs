//! Choosing `tau` from several pre-sampled entropy maps.
//!
//! For each scale we collect `rho_s` across runs. The recommended `tau` is the
//! median `rho` at the first scale where the run-to-run spread (max - min)
//! drops below a band, i.e. where the profile has settled.

use serde::{Deserialize, Serialize};

use crate::policy::{scale_depth, DepthComparison, PolicyConfig, PolicyError};
use crate::stats::{self, EntropyMap, StatsError};

pub const REPORT_FORMAT: &str = "toprokit.calibration";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CalibrateError {
    #[error("no entropy maps given")]
    Empty,
    #[error("map {index} does not match the first map: {reason}")]
    Mismatch { index: usize, reason: String },
    #[error("invalid calibration config: {0}")]
    Config(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub tau_grid: Vec<f64>,
    /// Largest run-to-run spread of `rho_s` treated as stable.
    pub band: f64,
    /// Defaults to the last layer.
    pub reference_layer: Option<usize>,
    /// Scales with fewer tokens are reported but never recommended; a single
    /// token always has `rho = 0`.
    pub min_scale_tokens: usize,
    pub depth_comparison: DepthComparison,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tau_grid: (1..=19).map(|i| f64::from(i) / 20.0).collect(),
            band: 0.05,
            reference_layer: None,
            min_scale_tokens: 2,
            depth_comparison: DepthComparison::AtLeast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCurve {
    pub scale: usize,
    pub tokens: usize,
    /// One entry per run, in input order.
    pub mean_entropy: Vec<f64>,
    pub rho: Vec<f64>,
    pub rho_median: f64,
    pub rho_spread: f64,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub scale: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAtTau {
    pub tau: f64,
    /// Depth on the median `rho` curve.
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format: String,
    pub version: u32,
    pub config: CalibrationConfig,
    pub runs: usize,
    pub reference_layer: usize,
    pub scales: Vec<ScaleCurve>,
    pub recommended: Option<Recommendation>,
    pub depth_per_tau: Vec<DepthAtTau>,
}

/// Median of `v`; the mean of the middle pair for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn calibrate(maps: &[EntropyMap], cfg: &CalibrationConfig) -> Result<CalibrationReport, CalibrateError> {
    let first = maps.first().ok_or(CalibrateError::Empty)?;
    if !(cfg.band >= 0.0 && cfg.band.is_finite()) {
        return Err(CalibrateError::Config(format!("band {} must be nonnegative", cfg.band)));
    }
    if let Some(t) = cfg.tau_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CalibrateError::Config(format!("tau {t} outside [0, 1]")));
    }
    for (index, m) in maps.iter().enumerate().skip(1) {
        if m.schedule() != first.schedule() || m.layers() != first.layers() {
            return Err(CalibrateError::Mismatch {
                index,
                reason: "schedule or layer count differs".into(),
            });
        }
    }
    let reference_layer = cfg.reference_layer.unwrap_or(first.layers().saturating_sub(1));
    if reference_layer >= first.layers() {
        return Err(CalibrateError::Config(format!(
            "reference layer {reference_layer} outside {} layers",
            first.layers()
        )));
    }

    let profiles = maps
        .iter()
        .map(|m| stats::scale_profile(m, reference_layer))
        .collect::<Result<Vec<_>, _>>()?;
    let scales: Vec<ScaleCurve> = first
        .schedule()
        .scales()
        .map(|s| {
            let rho: Vec<f64> = profiles.iter().map(|p| p[s - 1].low_entropy_ratio).collect();
            let mean_entropy = profiles.iter().map(|p| p[s - 1].mean_entropy).collect();
            let lo = rho.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let tokens = first.schedule().tokens(s).expect("scale in range");
            ScaleCurve {
                scale: s,
                tokens,
                mean_entropy,
                rho_median: median(&rho),
                rho_spread: hi - lo,
                rho,
                eligible: tokens >= cfg.min_scale_tokens,
            }
        })
        .collect();

    let recommended = scales
        .iter()
        .find(|c| c.eligible && c.rho_spread <= cfg.band)
        .map(|c| Recommendation {
            scale: c.scale,
            tau: c.rho_median,
        });
    let medians: Vec<f64> = scales.iter().map(|c| c.rho_median).collect();
    let depth_per_tau = cfg
        .tau_grid
        .iter()
        .map(|&tau| {
            let policy = PolicyConfig {
                tau,
                depth_comparison: cfg.depth_comparison,
                ..PolicyConfig::default()
            };
            Ok(DepthAtTau {
                tau,
                depth: scale_depth(&medians, &policy)?.depth,
            })
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;

    Ok(CalibrationReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: cfg.clone(),
        runs: maps.len(),
        reference_layer,
        scales,
        recommended,
        depth_per_tau,
    })
}
