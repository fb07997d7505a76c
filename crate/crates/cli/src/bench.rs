//! `toprokit bench`: wall-clock table of the three engines.

use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;
use toprokit::kernel::{flash_attention, flash_attention_entropy, naive_attention_entropy, AttentionInput, BlockConfig, Precision};
use toprokit::rng::derive_seed;
use toprokit::{Matrix2D, SeededRng};

use crate::config::{parse_block, parse_named, Engine, FileConfig, Format};
use crate::entropy::DEFAULT_NAIVE_GUARD;
use crate::error::CliError;
use crate::output::{emit, to_json};

pub const CSV_HEADER: &str = "engine,N,d,B_r,B_c,median_ms,reps";
pub const REPORT_FORMAT: &str = "toprokit.bench";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Comma-separated sequence lengths [default: 1,64,256,1024]
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Head dimension [default: 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Comma-separated ROWSxCOLS block shapes for flash and fae [default: 64x64]
    #[arg(long, value_delimiter = ',', value_parser = parse_block)]
    pub blocks: Option<Vec<(usize, usize)>>,
    /// Timed repetitions after one warm-up [default: 5]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated engines [default: naive,flash,fae]
    #[arg(long, value_delimiter = ',', value_parser = parse_named::<Engine>)]
    pub engines: Option<Vec<Engine>>,
    /// Seed for the random Q, K, V [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Naive rows above this N are skipped [default: 8192]
    #[arg(long)]
    pub naive_guard: Option<usize>,
    /// f32 or f64 for the blocked engines [default: f32]
    #[arg(long, value_parser = parse_named::<Precision>)]
    pub precision: Option<Precision>,
    /// Table file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// csv or json [default: csv]
    #[arg(long, value_parser = parse_named::<Format>)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub n: Vec<usize>,
    pub d: usize,
    pub blocks: Vec<(usize, usize)>,
    pub reps: usize,
    pub engines: Vec<Engine>,
    pub seed: u64,
    pub naive_guard: usize,
    pub precision: Precision,
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub engine: Engine,
    pub n: usize,
    pub d: usize,
    /// 0 for the naive engine, which has no blocks.
    pub block_rows: usize,
    pub block_cols: usize,
    pub median_ms: f64,
    pub reps: usize,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median wall time in milliseconds of `reps` calls after one warm-up.
pub fn time_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let samples = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median(samples)
}

fn resolve(args: &Args, file: &FileConfig) -> Result<BenchConfig, CliError> {
    let f = &file.bench;
    let cfg = BenchConfig {
        n: args.n.clone().or(f.n.clone()).unwrap_or(vec![1, 64, 256, 1024]),
        d: args.d.or(f.d).unwrap_or(64),
        blocks: args.blocks.clone().or(f.blocks.clone()).unwrap_or(vec![(64, 64)]),
        reps: args.reps.or(f.reps).unwrap_or(5),
        engines: args
            .engines
            .clone()
            .or(f.engines.clone())
            .unwrap_or(vec![Engine::Naive, Engine::Flash, Engine::Fae]),
        seed: args.seed.or(f.seed).unwrap_or(0),
        naive_guard: args.naive_guard.or(f.naive_guard).unwrap_or(DEFAULT_NAIVE_GUARD),
        precision: args.precision.or(file.block.precision).unwrap_or_default(),
    };
    if cfg.n.is_empty() || cfg.n.contains(&0) {
        return Err(CliError::usage("every N must be at least 1"));
    }
    if cfg.d == 0 || cfg.reps == 0 || cfg.engines.is_empty() || cfg.blocks.is_empty() {
        return Err(CliError::usage("d, reps, engines and blocks must be nonempty"));
    }
    for &(r, c) in &cfg.blocks {
        BlockConfig::new(r, c).validate().map_err(CliError::usage)?;
    }
    Ok(cfg)
}

pub fn bench(cfg: &BenchConfig) -> Result<Vec<Row>, CliError> {
    let mut rows = Vec::new();
    for &n in &cfg.n {
        let mut rng = SeededRng::new(derive_seed(cfg.seed, n as u64));
        let q = Matrix2D::random(&mut rng, n, cfg.d, 1.0);
        let k = Matrix2D::random(&mut rng, n, cfg.d, 1.0);
        let v = Matrix2D::random(&mut rng, n, cfg.d, 1.0);
        let input = AttentionInput::new(&q, &k, &v).map_err(CliError::compute)?;
        for &engine in &cfg.engines {
            let shapes: Vec<(usize, usize)> = match engine {
                Engine::Naive if n > cfg.naive_guard => continue,
                Engine::Naive => vec![(0, 0)],
                _ => cfg.blocks.clone(),
            };
            for (br, bc) in shapes {
                let block = BlockConfig::new(br.max(1), bc.max(1)).with_precision(cfg.precision);
                let mut failure = None;
                let median_ms = time_ms(cfg.reps, || {
                    let r = match engine {
                        Engine::Naive => naive_attention_entropy(&input),
                        Engine::Flash => flash_attention(&input, &block),
                        Engine::Fae => flash_attention_entropy(&input, &block),
                    };
                    if let Err(e) = r {
                        failure = Some(e);
                    }
                });
                if let Some(e) = failure {
                    return Err(CliError::compute(e));
                }
                rows.push(Row {
                    engine,
                    n,
                    d: cfg.d,
                    block_rows: br,
                    block_cols: bc,
                    median_ms,
                    reps: cfg.reps,
                });
            }
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let engine = serde_json::to_value(r.engine).expect("engine serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            engine.as_str().unwrap_or_default(),
            r.n,
            r.d,
            r.block_rows,
            r.block_cols,
            r.median_ms,
            r.reps
        ));
    }
    out
}

pub fn run(args: &Args, file: &FileConfig) -> Result<(), CliError> {
    let cfg = resolve(args, file)?;
    let rows = bench(&cfg)?;
    let text = match args.format.unwrap_or(Format::Csv) {
        Format::Csv => to_csv(&rows),
        Format::Json => to_json(&serde_json::json!({
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "config": cfg,
            "rows": rows,
        })),
    };
    emit(args.out.as_deref(), &text)
}
