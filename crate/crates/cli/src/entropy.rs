//! `toprokit entropy`: attention output and per-query entropy for one head.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use toprokit::kernel::{
    flash_attention, flash_attention_entropy, naive_attention_entropy, Accumulation, AttentionInput, BlockConfig,
    Precision,
};
use toprokit::tprv::{self, Dtype};
use toprokit::Matrix2D;

use crate::config::{parse_named, Engine, FileConfig};
use crate::error::{require, CliError};
use crate::output::{to_json, write_file};

pub const SUMMARY_FORMAT: &str = "toprokit.entropy-summary";
pub const SUMMARY_VERSION: u32 = 1;
pub const DEFAULT_NAIVE_GUARD: usize = 8192;
/// Slack on the `ln N_k` upper bound.
const BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Queries, `N x d` TPRV matrix.
    #[arg(long)]
    pub q: PathBuf,
    /// Keys, `N_k x d` TPRV matrix.
    #[arg(long)]
    pub k: PathBuf,
    /// Values, `N_k x d_v` TPRV matrix.
    #[arg(long)]
    pub v: PathBuf,
    /// Directory for output.tprv, entropy.tprv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// naive, flash or fae [default: fae]
    #[arg(long, value_parser = parse_named::<Engine>)]
    pub engine: Option<Engine>,
    #[command(flatten)]
    pub block: BlockArgs,
    /// Score scale [default: 1/sqrt(d)]
    #[arg(long)]
    pub softmax_scale: Option<f64>,
    /// Largest N or N_k the naive engine accepts [default: 8192]
    #[arg(long)]
    pub naive_guard: Option<usize>,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct BlockArgs {
    /// Query rows per block [default: 64]
    #[arg(long)]
    pub block_rows: Option<usize>,
    /// Key columns per block [default: 64]
    #[arg(long)]
    pub block_cols: Option<usize>,
    /// f32 or f64 [default: f32]
    #[arg(long, value_parser = parse_named::<Precision>)]
    pub precision: Option<Precision>,
    /// wide or working [default: wide]
    #[arg(long, value_parser = parse_named::<Accumulation>)]
    pub accumulation: Option<Accumulation>,
}

impl BlockArgs {
    pub fn resolve(&self, file: &FileConfig) -> Result<BlockConfig, CliError> {
        let d = BlockConfig::default();
        let f = &file.block;
        let cfg = BlockConfig::new(
            self.block_rows.or(f.block_rows).unwrap_or(d.block_rows),
            self.block_cols.or(f.block_cols).unwrap_or(d.block_cols),
        )
        .with_precision(self.precision.or(f.precision).unwrap_or(d.precision))
        .with_accumulation(self.accumulation.or(f.accumulation).unwrap_or(d.accumulation));
        cfg.validate().map_err(CliError::usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct EffectiveConfig {
    engine: Engine,
    block: Option<BlockConfig>,
    softmax_scale: f64,
    naive_guard: usize,
}

#[derive(Debug, Serialize)]
struct EntropyStats {
    min: f64,
    max: f64,
    mean: f64,
}

#[derive(Debug, Serialize)]
struct BoundCheck {
    lower: f64,
    upper: f64,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct Summary {
    format: &'static str,
    version: u32,
    config: EffectiveConfig,
    inputs: serde_json::Value,
    queries: usize,
    keys: usize,
    head_dim: usize,
    value_dim: usize,
    ln_keys: f64,
    entropy: Option<EntropyStats>,
    bound_check: Option<BoundCheck>,
    outputs: serde_json::Value,
}

fn load(path: &Path) -> Result<Matrix2D, CliError> {
    require(path)?;
    tprv::matrix_from_file(path).map_err(|e| CliError::invalid_input(path, e))
}

pub fn run(args: &Args, file: &FileConfig) -> Result<(), CliError> {
    let engine = args.engine.or(file.entropy.engine).unwrap_or(Engine::Fae);
    let guard = args
        .naive_guard
        .or(file.entropy.naive_guard)
        .unwrap_or(DEFAULT_NAIVE_GUARD);
    let block = args.block.resolve(file)?;
    let (q, k, v) = (load(&args.q)?, load(&args.k)?, load(&args.v)?);
    let scale = args
        .softmax_scale
        .or(file.entropy.softmax_scale)
        .unwrap_or(1.0 / (q.cols().max(1) as f64).sqrt());
    let input = AttentionInput::with_scale(&q, &k, &v, scale).map_err(CliError::usage)?;
    if engine == Engine::Naive && (q.rows() > guard || k.rows() > guard) {
        return Err(CliError::Usage(format!(
            "naive engine refuses N = {}, N_k = {} above the guard of {guard}; use fae or raise --naive-guard",
            q.rows(),
            k.rows()
        )));
    }

    let result = match engine {
        Engine::Naive => naive_attention_entropy(&input),
        Engine::Flash => flash_attention(&input, &block),
        Engine::Fae => flash_attention_entropy(&input, &block),
    }
    .map_err(CliError::compute)?;

    let dir = &args.out;
    std::fs::create_dir_all(dir).map_err(CliError::compute)?;
    tprv::matrix_to_file(&result.output, dir.join("output.tprv")).map_err(CliError::compute)?;
    let has_entropy = engine != Engine::Flash;
    if has_entropy {
        tprv::vector_to_file(&result.entropy, dir.join("entropy.tprv"), Dtype::F64).map_err(CliError::compute)?;
    }

    let ln_keys = (k.rows() as f64).ln();
    let (entropy, bound_check) = if has_entropy {
        let e = &result.entropy;
        let min = e.iter().copied().fold(f64::INFINITY, f64::min);
        let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let upper = ln_keys + BOUND_SLACK;
        (
            Some(EntropyStats { min, max, mean }),
            Some(BoundCheck {
                lower: 0.0,
                upper,
                passed: min >= 0.0 && max <= upper,
            }),
        )
    } else {
        (None, None)
    };
    let summary = Summary {
        format: SUMMARY_FORMAT,
        version: SUMMARY_VERSION,
        config: EffectiveConfig {
            engine,
            block: (engine != Engine::Naive).then_some(block),
            softmax_scale: scale,
            naive_guard: guard,
        },
        inputs: json!({ "q": args.q, "k": args.k, "v": args.v }),
        queries: q.rows(),
        keys: k.rows(),
        head_dim: q.cols(),
        value_dim: v.cols(),
        ln_keys,
        entropy,
        bound_check,
        outputs: json!({
            "output": "output.tprv",
            "entropy": has_entropy.then_some("entropy.tprv"),
        }),
    };
    write_file(&dir.join("summary.json"), &to_json(&summary))
}
