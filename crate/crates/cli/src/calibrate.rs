//! `toprokit calibrate`: `rho_s` curves across runs and a recommended `tau`.

use std::path::{Path, PathBuf};

use toprokit::calibrate::{calibrate, CalibrationReport};
use toprokit::policy::DepthComparison;
use toprokit::stats::EntropyMap;

use crate::config::{parse_named, FileConfig, Format};
use crate::error::{require, CliError};
use crate::output::{emit, to_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Entropy-map directories, trace directories, or `generate` output directories.
    #[arg(required = true)]
    pub maps: Vec<PathBuf>,
    /// Comma-separated candidate values of tau [default: 0.05, 0.10, ..., 0.95]
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    /// Largest run-to-run spread of rho_s treated as settled [default: 0.05]
    #[arg(long)]
    pub band: Option<f64>,
    /// Layer whose entropies define rho_s [default: last]
    #[arg(long)]
    pub reference_layer: Option<usize>,
    /// Scales with fewer tokens are never recommended [default: 2]
    #[arg(long)]
    pub min_scale_tokens: Option<usize>,
    /// at_least or at_most [default: at_least]
    #[arg(long, value_parser = parse_named::<DepthComparison>)]
    pub depth_comparison: Option<DepthComparison>,
    /// Report file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json (full report) or csv (per-run curves) [default: json]
    #[arg(long, value_parser = parse_named::<Format>)]
    pub format: Option<Format>,
}

pub fn load_map(path: &Path) -> Result<EntropyMap, CliError> {
    require(path)?;
    let dir = [path.join("entropy"), path.join("baseline/entropy")]
        .into_iter()
        .find(|d| d.is_dir())
        .unwrap_or_else(|| path.to_path_buf());
    EntropyMap::load(&dir).map_err(|e| CliError::invalid_input(path, e))
}

pub fn to_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("scale,tokens,run,mean_entropy,rho\n");
    for c in &report.scales {
        for (run, (h, r)) in c.mean_entropy.iter().zip(&c.rho).enumerate() {
            out.push_str(&format!("{},{},{},{},{}\n", c.scale, c.tokens, run, h, r));
        }
    }
    out
}

pub fn run(args: &Args, file: &FileConfig) -> Result<(), CliError> {
    let mut cfg = file.calibration.clone();
    if let Some(g) = &args.tau_grid {
        cfg.tau_grid = g.clone();
    }
    cfg.band = args.band.unwrap_or(cfg.band);
    cfg.reference_layer = args.reference_layer.or(cfg.reference_layer);
    cfg.min_scale_tokens = args.min_scale_tokens.unwrap_or(cfg.min_scale_tokens);
    cfg.depth_comparison = args.depth_comparison.unwrap_or(cfg.depth_comparison);

    let maps = args.maps.iter().map(|p| load_map(p)).collect::<Result<Vec<_>, _>>()?;
    let report = calibrate(&maps, &cfg).map_err(|e| match e {
        toprokit::calibrate::CalibrateError::Stats(_) => CliError::compute(e),
        _ => CliError::usage(e),
    })?;
    let text = match args.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => to_csv(&report),
    };
    emit(args.out.as_deref(), &text)
}
