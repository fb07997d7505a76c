//! `toprokit bounds`: Monte-Carlo check of the error bounds on a scenario.

use std::path::PathBuf;

use toprokit::bounds::{simulate_total_bound, BoundsScenario, TotalBoundReport};

use crate::config::{parse_named, read_json, FileConfig, Format};
use crate::error::CliError;
use crate::output::{emit, to_json};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// default, closed or correlated [default: default]
    #[arg(long, conflicts_with = "scenario")]
    pub preset: Option<String>,
    /// Scenario JSON; missing fields take the default scenario's values.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dimension of the simulated residual vectors.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Shared component of the per-scale and per-layer increments, in [0, 1).
    #[arg(long)]
    pub correlation: Option<f64>,
    /// Report file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// json (full report) or csv (one row per term) [default: json]
    #[arg(long, value_parser = parse_named::<Format>)]
    pub format: Option<Format>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(r: &TotalBoundReport) -> String {
    let mut out = String::from("term,measured,stderr,predicted,ratio,passed,assumptions_satisfied\n");
    let s = &r.scale;
    out.push_str(&format!(
        "scale,{},{},{},{},{},{}\n",
        s.mean_error,
        s.stderr,
        s.bound,
        opt((s.bound > 0.0).then(|| s.mean_error / s.bound)),
        s.bound_satisfied,
        s.assumptions_satisfied
    ));
    for l in &r.layers {
        out.push_str(&format!(
            "layer_s{},{},{},{},{},{},{}\n",
            l.scale,
            l.mean_error,
            l.stderr,
            l.prediction,
            opt(l.ratio),
            l.within_tolerance,
            l.assumptions_satisfied
        ));
    }
    let t = &r.token;
    out.push_str(&format!(
        "token,{},{},{},{},{},true\n",
        t.mean_error,
        t.stderr,
        t.bound,
        opt(t.ratio),
        t.within_tolerance
    ));
    out.push_str(&format!(
        "total,{},{},{},{},{},{}\n",
        r.measured_total,
        r.measured_total_stderr,
        r.bound_total,
        opt((r.bound_total > 0.0).then(|| r.measured_total / r.bound_total)),
        r.bound_satisfied,
        r.assumptions_satisfied
    ));
    out
}

pub fn resolve(args: &Args, file: &FileConfig) -> Result<BoundsScenario, CliError> {
    let f = &file.bounds;
    let mut sc = match &args.scenario {
        Some(p) => read_json::<BoundsScenario>(p)?,
        None => {
            let name = args.preset.clone().or(f.preset.clone()).unwrap_or("default".into());
            BoundsScenario::preset(&name)
                .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}; expected default, closed or correlated")))?
        }
    };
    sc.trials = args.trials.or(f.trials).unwrap_or(sc.trials);
    sc.seed = args.seed.or(f.seed).unwrap_or(sc.seed);
    sc.dim = args.dim.or(f.dim).unwrap_or(sc.dim);
    sc.correlation = args.correlation.or(f.correlation).unwrap_or(sc.correlation);
    sc.validate().map_err(CliError::usage)?;
    Ok(sc)
}

pub fn run(args: &Args, file: &FileConfig) -> Result<(), CliError> {
    let sc = resolve(args, file)?;
    let report = simulate_total_bound(&sc).map_err(CliError::compute)?;
    let text = match args.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&report),
        Format::Csv => to_csv(&report),
    };
    emit(args.out.as_deref(), &text)
}
