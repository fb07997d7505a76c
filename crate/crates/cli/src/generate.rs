//! `toprokit generate`: baseline and pruned toy-model runs plus their comparison.

use std::path::PathBuf;

use serde::Serialize;
use toprokit::classify::{classify_layers, default_rep_scale, LayerClassification};
use toprokit::policy::{build_plan, DepthComparison, PolicyConfig, PruneMode, PruningPlan};
use toprokit::toy::{compare_runs, generate, CompareReport, GenerationTrace, ToyModelConfig};
use toprokit::ScaleSchedule;

use crate::config::{parse_named, read_json, FileConfig};
use crate::error::{require, CliError};
use crate::output::{to_json, write_file};

pub const REPORT_FORMAT: &str = "toprokit.compare";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Only run and save the unpruned baseline.
    #[arg(long)]
    pub baseline_only: bool,
    /// Use a saved plan instead of deriving one from the baseline.
    #[arg(long, conflicts_with = "baseline_only")]
    pub plan: Option<PathBuf>,
    /// JSON policy file; same fields as the `policy` config section.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[command(flatten)]
    pub toy: ToyArgs,
    #[command(flatten)]
    pub policy_flags: PolicyArgs,
}

#[derive(Debug, Default, clap::Args)]
pub struct ToyArgs {
    /// Comma-separated side lengths of square scales [default: 1,2,4,8,16]
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<usize>>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub weight_seed: Option<u64>,
    #[arg(long)]
    pub prompt_seed: Option<u64>,
    /// Comma-separated per-layer query gains, cycled [default: 1,100]
    #[arg(long, value_delimiter = ',')]
    pub query_gain: Option<Vec<f64>>,
    /// Per-token innovation noise [default: 2]
    #[arg(long)]
    pub innovation: Option<f64>,
}

impl ToyArgs {
    pub fn apply(&self, mut cfg: ToyModelConfig) -> Result<ToyModelConfig, CliError> {
        if let Some(sides) = &self.schedule {
            cfg.schedule = ScaleSchedule::square(sides).map_err(CliError::usage)?;
        }
        cfg.layers = self.layers.unwrap_or(cfg.layers);
        cfg.heads = self.heads.unwrap_or(cfg.heads);
        cfg.d_model = self.d_model.unwrap_or(cfg.d_model);
        cfg.weight_seed = self.weight_seed.unwrap_or(cfg.weight_seed);
        cfg.prompt_seed = self.prompt_seed.unwrap_or(cfg.prompt_seed);
        if let Some(g) = &self.query_gain {
            cfg.query_gain = g.clone();
        }
        cfg.innovation = self.innovation.unwrap_or(cfg.innovation);
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, clap::Args)]
pub struct PolicyArgs {
    /// Threshold on rho_s that sets the pruning depth [default: 0.4]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Sharpness of the layer score [default: 1]
    #[arg(long)]
    pub beta: Option<f64>,
    /// [default: 0.3, or alpha-max if that is smaller]
    #[arg(long)]
    pub alpha_min: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub alpha_max: Option<f64>,
    /// Layers scoring at least this are Detail [default: 0.5]
    #[arg(long)]
    pub detail_threshold: Option<f64>,
    /// at_least or at_most [default: at_least]
    #[arg(long, value_parser = parse_named::<DepthComparison>)]
    pub depth_comparison: Option<DepthComparison>,
    /// deterministic or sampled [default: deterministic]
    #[arg(long, value_parser = parse_named::<PruneMode>)]
    pub prune_mode: Option<PruneMode>,
    /// Seed for sampled masks [default: 0]
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// [default: last layer]
    #[arg(long)]
    pub reference_layer: Option<usize>,
    /// Scale used to classify layers [default: ceil(S/2)]
    #[arg(long)]
    pub rep_scale: Option<usize>,
}

/// Flags over the policy file over the config file over defaults. An
/// `alpha_min` nobody set is lowered to `alpha_max` when it would exceed it.
pub fn resolve_policy(flags: &PolicyArgs, policy_file: Option<&PathBuf>, file: &FileConfig) -> Result<PolicyConfig, CliError> {
    let (mut cfg, mut alpha_min_given) = (file.policy.clone(), file.alpha_min_given);
    if let Some(p) = policy_file {
        let raw: serde_json::Value = read_json(p)?;
        alpha_min_given |= raw.get("alpha_min").is_some();
        let base = serde_json::to_value(&cfg).expect("policy serializes");
        let (serde_json::Value::Object(mut merged), serde_json::Value::Object(over)) = (base, raw) else {
            return Err(CliError::invalid_input(p, "policy file must hold a JSON object"));
        };
        merged.extend(over);
        cfg = serde_json::from_value(serde_json::Value::Object(merged)).map_err(|e| CliError::invalid_input(p, e))?;
    }
    cfg.tau = flags.tau.unwrap_or(cfg.tau);
    cfg.beta = flags.beta.unwrap_or(cfg.beta);
    cfg.alpha_max = flags.alpha_max.unwrap_or(cfg.alpha_max);
    match flags.alpha_min {
        Some(a) => cfg.alpha_min = a,
        None if !alpha_min_given => cfg.alpha_min = cfg.alpha_min.min(cfg.alpha_max),
        None => {}
    }
    cfg.detail_threshold = flags.detail_threshold.unwrap_or(cfg.detail_threshold);
    cfg.depth_comparison = flags.depth_comparison.unwrap_or(cfg.depth_comparison);
    cfg.prune_mode = flags.prune_mode.unwrap_or(cfg.prune_mode);
    cfg.rng_seed = flags.rng_seed.or(cfg.rng_seed);
    cfg.reference_layer = flags.reference_layer.or(cfg.reference_layer);
    cfg.rep_scale = flags.rep_scale.or(cfg.rep_scale);
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

/// Classifies layers on `map` and builds the plan.
pub fn plan_from_baseline(baseline: &GenerationTrace, policy: &PolicyConfig) -> Result<PruningPlan, CliError> {
    let map = &baseline.entropy_map;
    let scales = map.schedule().len();
    let rep = policy.rep_scale.unwrap_or(default_rep_scale(scales));
    if rep == 0 || rep > scales {
        return Err(CliError::Usage(format!("rep_scale {rep} outside 1..={scales}")));
    }
    let classes = classify_layers(map, rep, policy.beta, policy.detail_threshold).map_err(CliError::compute)?;
    build_plan(map, &classes, policy).map_err(CliError::compute)
}

#[derive(Debug, Serialize)]
struct EffectiveConfig<'a> {
    toy: &'a ToyModelConfig,
    policy: Option<&'a PolicyConfig>,
    plan_source: Option<&'a PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    format: &'static str,
    version: u32,
    config: EffectiveConfig<'a>,
    baseline_only: bool,
    baseline_tokens: usize,
}

#[derive(Debug, Serialize)]
struct PlanSummary<'a> {
    reference_layer: usize,
    rho_per_scale: &'a [f64],
    depth: Option<usize>,
    classifications: &'a [LayerClassification],
    total_tokens: usize,
    kept_tokens: usize,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    format: &'static str,
    version: u32,
    config: EffectiveConfig<'a>,
    plan: PlanSummary<'a>,
    /// Kept tokens in the plan equal the queries the pruned run processed.
    tokens_reconcile: bool,
    comparison: &'a CompareReport,
}

pub fn run(args: &Args, file: &FileConfig) -> Result<(), CliError> {
    let toy = args.toy.apply(file.toy.clone())?;
    let policy = if args.baseline_only || args.plan.is_some() {
        None
    } else {
        Some(resolve_policy(&args.policy_flags, args.policy.as_ref(), file)?)
    };
    let loaded_plan = match &args.plan {
        Some(p) => {
            require(p)?;
            let plan = PruningPlan::load(p).map_err(|e| CliError::invalid_input(p, e))?;
            plan.check_coverage(&toy.schedule, toy.layers)
                .map_err(|e| CliError::invalid_input(p, e))?;
            Some(plan)
        }
        None => None,
    };

    let effective_policy = policy.clone().or(loaded_plan.as_ref().map(|p| p.config.clone()));
    let out = &args.out;
    let baseline = generate(&toy, None).map_err(CliError::compute)?;
    baseline.save(out.join("baseline")).map_err(CliError::compute)?;
    let config = EffectiveConfig {
        toy: &toy,
        policy: effective_policy.as_ref(),
        plan_source: args.plan.as_ref(),
    };
    let manifest = RunManifest {
        format: "toprokit.run",
        version: REPORT_VERSION,
        config,
        baseline_only: args.baseline_only,
        baseline_tokens: baseline.total_processed(),
    };
    write_file(&out.join("run.json"), &to_json(&manifest))?;
    if args.baseline_only {
        return Ok(());
    }

    let plan = match loaded_plan {
        Some(p) => p,
        None => plan_from_baseline(&baseline, policy.as_ref().expect("policy resolved"))?,
    };
    plan.save(out.join("plan")).map_err(CliError::compute)?;
    let pruned = generate(&toy, Some(&plan)).map_err(CliError::compute)?;
    pruned.save(out.join("pruned")).map_err(CliError::compute)?;
    let comparison = compare_runs(&baseline, &pruned).map_err(CliError::compute)?;
    let tokens_reconcile = plan.kept_tokens() == pruned.total_processed();

    let report = Report {
        format: REPORT_FORMAT,
        version: REPORT_VERSION,
        config: manifest.config,
        plan: PlanSummary {
            reference_layer: plan.reference_layer,
            rho_per_scale: &plan.scale_decision.rho_per_scale,
            depth: plan.scale_decision.depth,
            classifications: &plan.classifications,
            total_tokens: plan.total_tokens(),
            kept_tokens: plan.kept_tokens(),
        },
        tokens_reconcile,
        comparison: &comparison,
    };
    write_file(&out.join("compare.json"), &to_json(&report))?;
    write_file(&out.join("compare.csv"), &comparison.to_csv())?;
    let base_time: f64 = baseline.wall_time.iter().sum();
    let pruned_time: f64 = pruned.wall_time.iter().sum();
    let timing = serde_json::json!({
        "baseline_seconds": base_time,
        "pruned_seconds": pruned_time,
        "wall_time_ratio": comparison.wall_time_ratio,
    });
    write_file(&out.join("timing.json"), &(timing.to_string() + "\n"))?;
    if !tokens_reconcile {
        return Err(CliError::Compute(format!(
            "plan keeps {} tokens but the pruned run processed {}",
            plan.kept_tokens(),
            pruned.total_processed()
        )));
    }
    Ok(())
}
