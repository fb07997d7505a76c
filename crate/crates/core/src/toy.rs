//! A small coarse-to-fine generator with fixed random weights.
//!
//! Each scale starts from the previous token map upsampled by nearest-neighbor
//! replication, plus a 2D sinusoidal position code and a per-scale embedding.
//! It then runs through `layers` pre-norm blocks (multi-head attention and a
//! ReLU feedforward, both residual). Queries come from the current scale only;
//! keys and values span every scale generated so far. A pruning plan removes
//! tokens from the query side of a block, and removed tokens leave the block
//! exactly as they entered it.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::kernel::{
    flash_attention_entropy, AttentionInput, AttentionResult, BlockConfig, KernelError, Precision,
};
use crate::policy::{PolicyError, PruningPlan};
use crate::rng::{derive_seed, SeededRng};
use crate::stats::{EntropyMap, StatsError};
use crate::tensor::{Matrix2D, ScaleSchedule};
use crate::tprv::{self, TprvError};

pub const TRACE_FORMAT: &str = "toprokit.trace";
pub const TRACE_VERSION: u32 = 1;
pub const DEFAULT_SSIM_C1: f64 = 1e-4;
pub const DEFAULT_SSIM_C2: f64 = 1e-4;

const NORM_EPS: f64 = 1e-6;
const SCALE_EMBED_STREAM: u64 = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum ToyError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("plan does not match the model: {0}")]
    Plan(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("trace file: {0}")]
    Format(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TprvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PolicyError> for ToyError {
    fn from(e: PolicyError) -> Self {
        ToyError::Plan(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub schedule: ScaleSchedule,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub weight_seed: u64,
    /// Seeds the start token; varies the "prompt" under fixed weights.
    pub prompt_seed: u64,
    /// Multiplier on the queries of each layer, cycled if shorter than `layers`.
    /// Large gains give sharp, token-dependent attention.
    pub query_gain: Vec<f64>,
    /// Standard deviation of the seeded per-token innovation added at every
    /// scale; stands in for the sampling step of a real generator.
    pub innovation: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            schedule: ScaleSchedule::square(&[1, 2, 4, 8, 16]).expect("valid schedule"),
            layers: 4,
            heads: 2,
            d_model: 32,
            weight_seed: 0,
            prompt_seed: 0,
            query_gain: vec![1.0, 100.0],
            innovation: 2.0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 {
            return Err(ToyError::Config("layers, heads and d_model must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(ToyError::Config(format!(
                "d_model = {} is not divisible by heads = {}",
                self.d_model, self.heads
            )));
        }
        if self.query_gain.is_empty() || self.query_gain.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(ToyError::Config("query_gain must hold positive finite values".into()));
        }
        if !(self.innovation.is_finite() && self.innovation >= 0.0) {
            return Err(ToyError::Config("innovation must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn gain(&self, layer: usize) -> f64 {
        self.query_gain[layer % self.query_gain.len()]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

struct LayerWeights {
    wq: Matrix2D,
    wk: Matrix2D,
    wv: Matrix2D,
    wo: Matrix2D,
    w1: Matrix2D,
    w2: Matrix2D,
}

impl LayerWeights {
    fn new(seed: u64, d: usize) -> Self {
        let mut rng = SeededRng::new(seed);
        let hidden = 2 * d;
        let inv = 1.0 / (d as f64).sqrt();
        Self {
            wq: Matrix2D::random(&mut rng, d, d, inv),
            wk: Matrix2D::random(&mut rng, d, d, inv),
            wv: Matrix2D::random(&mut rng, d, d, inv),
            wo: Matrix2D::random(&mut rng, d, d, inv),
            w1: Matrix2D::random(&mut rng, d, hidden, inv),
            w2: Matrix2D::random(&mut rng, hidden, d, 1.0 / (hidden as f64).sqrt()),
        }
    }
}

/// Hooks into [`generate_observed`]. Both methods default to no-ops.
pub trait GenerationObserver {
    /// Called once per head with the gained queries of the kept tokens and the
    /// full key/value context.
    fn on_attention(
        &mut self,
        _scale: usize,
        _layer: usize,
        _head: usize,
        _input: &AttentionInput,
        _result: &AttentionResult,
    ) {
    }

    /// Called after each block with its input and output token maps.
    fn on_layer(
        &mut self,
        _scale: usize,
        _layer: usize,
        _input: &Matrix2D,
        _output: &Matrix2D,
        _mask: &[bool],
    ) {
    }
}

struct NoObserver;
impl GenerationObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub config: ToyModelConfig,
    /// Final-layer token map of every scale, `N_s x d_model`.
    pub token_maps: Vec<Matrix2D>,
    /// Per-token entropies; tokens that bypassed a block are recorded as 0.
    pub entropy_map: EntropyMap,
    /// `tokens_processed[s - 1][l]`: queries that went through block `l` at scale `s`.
    pub tokens_processed: Vec<Vec<usize>>,
    /// Seconds per scale. Not part of the deterministic output.
    pub wall_time: Vec<f64>,
}

impl GenerationTrace {
    /// Equality ignoring wall times.
    pub fn same_outputs(&self, other: &Self) -> bool {
        self.config == other.config
            && self.token_maps == other.token_maps
            && self.entropy_map == other.entropy_map
            && self.tokens_processed == other.tokens_processed
    }

    pub fn total_processed(&self) -> usize {
        self.tokens_processed.iter().flatten().sum()
    }

    /// Writes `trace.json`, `timing.json`, `tokens/s{scale}.tprv` and the entropy map
    /// under `entropy/`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ToyError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("tokens"))?;
        for (i, m) in self.token_maps.iter().enumerate() {
            tprv::matrix_to_file(m, dir.join(format!("tokens/s{}.tprv", i + 1)))?;
        }
        self.entropy_map.save(dir.join("entropy"))?;
        let manifest = TraceManifest {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            config: self.config.clone(),
            tokens_processed: self.tokens_processed.clone(),
            total_processed: self.total_processed(),
        };
        fs::write(
            dir.join("trace.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        )?;
        let timing = serde_json::json!({ "wall_time_seconds": self.wall_time });
        fs::write(dir.join("timing.json"), timing.to_string() + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ToyError> {
        let dir = dir.as_ref();
        let manifest: TraceManifest = serde_json::from_str(&fs::read_to_string(dir.join("trace.json"))?)
            .map_err(|e| ToyError::Format(e.to_string()))?;
        if manifest.format != TRACE_FORMAT || manifest.version != TRACE_VERSION {
            return Err(ToyError::Format(format!(
                "unsupported trace format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let cfg = manifest.config;
        cfg.validate()?;
        let mut token_maps = Vec::with_capacity(cfg.schedule.len());
        for s in cfg.schedule.scales() {
            let m = tprv::matrix_from_file(dir.join(format!("tokens/s{s}.tprv")))?;
            if m.shape() != (cfg.schedule.tokens(s).unwrap_or(0), cfg.d_model) {
                return Err(ToyError::Format(format!("token map for scale {s} has shape {:?}", m.shape())));
            }
            token_maps.push(m);
        }
        let entropy_map = EntropyMap::load(dir.join("entropy"))?;
        let wall_time = fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| serde_json::from_value(v["wall_time_seconds"].clone()).ok())
            .unwrap_or_else(|| vec![0.0; cfg.schedule.len()]);
        Ok(Self {
            config: cfg,
            token_maps,
            entropy_map,
            tokens_processed: manifest.tokens_processed,
            wall_time,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TraceManifest {
    format: String,
    version: u32,
    config: ToyModelConfig,
    tokens_processed: Vec<Vec<usize>>,
    total_processed: usize,
}

fn rms_norm(x: &Matrix2D) -> Matrix2D {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Sin/cos codes of the normalized row and column coordinates at octave frequencies.
fn position_code(h: usize, w: usize, d: usize) -> Matrix2D {
    Matrix2D::from_fn(h * w, d, |t, j| {
        let (r, c) = (t / w, t % w);
        let y = (r as f64 + 0.5) / h as f64;
        let x = (c as f64 + 0.5) / w as f64;
        let freq = std::f64::consts::PI * (1u64 << (j / 4).min(30)) as f64;
        match j % 4 {
            0 => (freq * x).sin(),
            1 => (freq * x).cos(),
            2 => (freq * y).sin(),
            _ => (freq * y).cos(),
        }
    })
}

fn upsample_nearest(m: &Matrix2D, from: (usize, usize), to: (usize, usize)) -> Matrix2D {
    let (fh, fw) = from;
    let (th, tw) = to;
    let rows: Vec<usize> = (0..th * tw)
        .map(|t| {
            let (r, c) = (t / tw, t % tw);
            (r * fh / th) * fw + c * fw / tw
        })
        .collect();
    m.select_rows(&rows)
}

fn relu_in_place(m: &mut Matrix2D) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn add_in_place(a: &mut Matrix2D, b: &Matrix2D) {
    a.as_mut_slice().iter_mut().zip(b.as_slice()).for_each(|(x, y)| *x += y);
}

pub fn generate(cfg: &ToyModelConfig, plan: Option<&PruningPlan>) -> Result<GenerationTrace, ToyError> {
    generate_observed(cfg, plan, &mut NoObserver)
}

pub fn generate_observed(
    cfg: &ToyModelConfig,
    plan: Option<&PruningPlan>,
    observer: &mut dyn GenerationObserver,
) -> Result<GenerationTrace, ToyError> {
    cfg.validate()?;
    if let Some(p) = plan {
        p.check_coverage(&cfg.schedule, cfg.layers)?;
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let weights: Vec<LayerWeights> = (0..cfg.layers)
        .map(|l| LayerWeights::new(derive_seed(cfg.weight_seed, l as u64), d))
        .collect();
    let block = BlockConfig::new(64, 64).with_precision(Precision::F64);

    let mut prompt = SeededRng::new(cfg.prompt_seed);
    let start = Matrix2D::random(&mut prompt, 1, d, 1.0);

    let mut entropy_map = EntropyMap::new(cfg.schedule.clone(), cfg.layers, cfg.heads);
    let mut caches: Vec<Option<Matrix2D>> = vec![None; cfg.layers];
    let mut token_maps: Vec<Matrix2D> = Vec::with_capacity(cfg.schedule.len());
    let mut tokens_processed = Vec::with_capacity(cfg.schedule.len());
    let mut wall_time = Vec::with_capacity(cfg.schedule.len());

    for s in cfg.schedule.scales() {
        let clock = Instant::now();
        let (h, w) = cfg.schedule.dims(s).expect("scale in range");
        let n = h * w;
        let mut x = match token_maps.last() {
            None => upsample_nearest(&start, (1, 1), (h, w)),
            Some(prev) => upsample_nearest(prev, cfg.schedule.dims(s - 1).expect("scale in range"), (h, w)),
        };
        add_in_place(&mut x, &position_code(h, w, d));
        let mut embed_rng = SeededRng::new(derive_seed(cfg.weight_seed, SCALE_EMBED_STREAM + s as u64));
        let embed = Matrix2D::random(&mut embed_rng, 1, d, 0.5);
        let mut sample_rng = SeededRng::new(derive_seed(cfg.prompt_seed, s as u64));
        let noise = Matrix2D::random(&mut sample_rng, n, d, cfg.innovation);
        add_in_place(&mut x, &noise);
        for r in 0..n {
            x.row_mut(r).iter_mut().zip(embed.row(0)).for_each(|(a, b)| *a += b);
        }

        let mut processed = Vec::with_capacity(cfg.layers);
        for (l, wts) in weights.iter().enumerate() {
            let input = x.clone();
            let all_keep;
            let mask: &[bool] = match plan {
                Some(p) => p.mask(s, l).expect("coverage checked"),
                None => {
                    all_keep = vec![true; n];
                    &all_keep
                }
            };
            let kept: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            processed.push(kept.len());

            let normed = rms_norm(&x);
            let context = match caches[l].take() {
                Some(c) => Matrix2D::vstack([&c, &normed]),
                None => normed.clone(),
            };
            let mut head_entropy = vec![vec![0.0; n]; cfg.heads];
            if !kept.is_empty() {
                let mut q_all = normed.select_rows(&kept).matmul(&wts.wq);
                let gain = cfg.gain(l);
                q_all.as_mut_slice().iter_mut().for_each(|v| *v *= gain);
                let k_all = context.matmul(&wts.wk);
                let v_all = context.matmul(&wts.wv);
                let mut heads_out = Matrix2D::zeros(kept.len(), d);
                for (hd, ent) in head_entropy.iter_mut().enumerate() {
                    let (lo, hi) = (hd * dh, (hd + 1) * dh);
                    let (q, k, v) = (
                        q_all.column_slice(lo, hi),
                        k_all.column_slice(lo, hi),
                        v_all.column_slice(lo, hi),
                    );
                    let att = AttentionInput::new(&q, &k, &v)?;
                    let res = flash_attention_entropy(&att, &block)?;
                    observer.on_attention(s, l, hd, &att, &res);
                    for (j, &i) in kept.iter().enumerate() {
                        ent[i] = res.entropy[j];
                        heads_out.row_mut(j)[lo..hi].copy_from_slice(res.output.row(j));
                    }
                }
                let mut y = x.select_rows(&kept);
                add_in_place(&mut y, &heads_out.matmul(&wts.wo));
                let mut hidden = rms_norm(&y).matmul(&wts.w1);
                relu_in_place(&mut hidden);
                add_in_place(&mut y, &hidden.matmul(&wts.w2));
                for (j, &i) in kept.iter().enumerate() {
                    x.row_mut(i).copy_from_slice(y.row(j));
                }
            }
            for (hd, ent) in head_entropy.into_iter().enumerate() {
                entropy_map.insert(s, l, hd, ent)?;
            }
            caches[l] = Some(context);
            observer.on_layer(s, l, &input, &x, mask);
        }
        token_maps.push(x);
        tokens_processed.push(processed);
        wall_time.push(clock.elapsed().as_secs_f64());
    }

    Ok(GenerationTrace {
        config: cfg.clone(),
        token_maps,
        entropy_map,
        tokens_processed,
        wall_time,
    })
}

/// Single-window SSIM over all elements, with population statistics.
pub fn ssim(x: &Matrix2D, y: &Matrix2D, c1: f64, c2: f64) -> Result<f64, ToyError> {
    if x.shape() != y.shape() {
        return Err(ToyError::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.is_empty() {
        return Err(ToyError::Shape("empty input".into()));
    }
    let n = x.as_slice().len() as f64;
    let mx = x.as_slice().iter().sum::<f64>() / n;
    let my = y.as_slice().iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    Ok(((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleComparison {
    pub scale: usize,
    pub ssim: f64,
    pub baseline_tokens: usize,
    pub pruned_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub scales: Vec<ScaleComparison>,
    pub baseline_tokens: usize,
    pub pruned_tokens: usize,
    /// `1 - pruned / baseline` over all `(scale, layer)` blocks.
    pub token_reduction: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Pruned over baseline total wall time; kept out of the serialized report.
    #[serde(skip)]
    pub wall_time_ratio: Option<f64>,
}

impl CompareReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale,ssim,baseline_tokens,pruned_tokens\n");
        for c in &self.scales {
            out.push_str(&format!("{},{},{},{}\n", c.scale, c.ssim, c.baseline_tokens, c.pruned_tokens));
        }
        out
    }
}

pub fn compare_runs(baseline: &GenerationTrace, pruned: &GenerationTrace) -> Result<CompareReport, ToyError> {
    compare_runs_with(baseline, pruned, DEFAULT_SSIM_C1, DEFAULT_SSIM_C2)
}

pub fn compare_runs_with(
    baseline: &GenerationTrace,
    pruned: &GenerationTrace,
    c1: f64,
    c2: f64,
) -> Result<CompareReport, ToyError> {
    if baseline.config.schedule != pruned.config.schedule {
        return Err(ToyError::Shape("runs use different schedules".into()));
    }
    let mut scales = Vec::with_capacity(baseline.token_maps.len());
    for (i, (a, b)) in baseline.token_maps.iter().zip(&pruned.token_maps).enumerate() {
        scales.push(ScaleComparison {
            scale: i + 1,
            ssim: ssim(a, b, c1, c2)?,
            baseline_tokens: baseline.tokens_processed[i].iter().sum(),
            pruned_tokens: pruned.tokens_processed[i].iter().sum(),
        });
    }
    let baseline_tokens = baseline.total_processed();
    let pruned_tokens = pruned.total_processed();
    let token_reduction = if baseline_tokens == 0 {
        0.0
    } else {
        1.0 - pruned_tokens as f64 / baseline_tokens as f64
    };
    let base_time: f64 = baseline.wall_time.iter().sum();
    let pruned_time: f64 = pruned.wall_time.iter().sum();
    Ok(CompareReport {
        scales,
        baseline_tokens,
        pruned_tokens,
        token_reduction,
        ssim_c1: c1,
        ssim_c2: c2,
        wall_time_ratio: (base_time > 0.0).then(|| pruned_time / base_time),
    })
}
