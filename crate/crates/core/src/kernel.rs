//! Attention with exact per-row entropy.
//!
//! Three engines share one contract:
//!
//! * [`naive_attention_entropy`] materializes the full `N x N_k` probability
//!   matrix in `f64`. It is the ground truth for every other path.
//! * [`flash_attention`] is the blocked streaming forward pass: per query block
//!   it walks the key blocks once, keeping a running row max `m`, exp-sum `l`
//!   and an unnormalized output accumulator.
//! * [`flash_attention_entropy`] adds one more running statistic per row,
//!   `E = sum p~ ln p~` over the shifted, unnormalized probabilities
//!   `p~ = exp(s - m)`.
//!
//! When a new key block raises the running max from `m_old` to `m_new`, every
//! earlier `p~` is multiplied by `k = exp(m_old - m_new)`. Since
//! `kx ln(kx) = k (x ln x) + (ln k) k x`, the accumulator must be rescaled as
//!
//! ```text
//! E_new = k E_old + (ln k) k l_old + sum_block p~ ln p~
//! ```
//!
//! Dropping the middle term (as a literal reading of the blocked listing
//! suggests) is only exact when the max never moves; [`EntropyRescale::AsListed`]
//! keeps that variant around so tests can show the difference. At the end,
//! `sum p ln p = E / l - ln l` and the entropy is its negation.
//!
//! `ln p~` is exactly `s - m`, so the streaming paths never call `ln` per
//! element; underflowed `p~ = 0` entries contribute `0 * (s - m) = 0`.

use rayon::prelude::*;

use crate::tensor::Matrix2D;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("block sizes must be at least 1 (got {rows}x{cols})")]
    InvalidBlock { rows: usize, cols: usize },
    #[error("negative entry {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("entry {index} is not strictly positive")]
    NonPositiveEntry { index: usize },
    #[error("rescale factor must be strictly positive")]
    NonPositiveFactor,
}

/// Queries `N x d`, keys `N_k x d`, values `N_k x d_v`, and the score scale.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInput<'a> {
    pub q: &'a Matrix2D,
    pub k: &'a Matrix2D,
    pub v: &'a Matrix2D,
    pub scale: f64,
}

impl<'a> AttentionInput<'a> {
    /// Uses the conventional `1/sqrt(d)` score scale.
    pub fn new(q: &'a Matrix2D, k: &'a Matrix2D, v: &'a Matrix2D) -> Result<Self, KernelError> {
        let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
        Self::with_scale(q, k, v, scale)
    }

    pub fn with_scale(
        q: &'a Matrix2D,
        k: &'a Matrix2D,
        v: &'a Matrix2D,
        scale: f64,
    ) -> Result<Self, KernelError> {
        let input = Self { q, k, v, scale };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        let mismatch = |msg: String| Err(KernelError::DimensionMismatch(msg));
        if self.q.rows() == 0 || self.k.rows() == 0 || self.q.cols() == 0 {
            return mismatch(format!(
                "need N, N_k, d >= 1, got Q {:?}, K {:?}",
                self.q.shape(),
                self.k.shape()
            ));
        }
        if self.q.cols() != self.k.cols() {
            return mismatch(format!(
                "Q has {} columns but K has {}",
                self.q.cols(),
                self.k.cols()
            ));
        }
        if self.v.rows() != self.k.rows() {
            return mismatch(format!(
                "K has {} rows but V has {}",
                self.k.rows(),
                self.v.rows()
            ));
        }
        if !self.scale.is_finite() {
            return mismatch("score scale must be finite".into());
        }
        Ok(())
    }

    pub fn queries(&self) -> usize {
        self.q.rows()
    }

    pub fn keys(&self) -> usize {
        self.k.rows()
    }
}

/// Arithmetic width of the streaming kernels. The oracle is always `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Width of the per-row `l` and `E` accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accumulation {
    /// Round the accumulators to the working precision after every update.
    Working,
    /// Keep the accumulators in `f64`.
    #[default]
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub block_rows: usize,
    pub block_cols: usize,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub accumulation: Accumulation,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self::new(64, 64)
    }
}

impl BlockConfig {
    pub fn new(block_rows: usize, block_cols: usize) -> Self {
        Self {
            block_rows,
            block_cols,
            precision: Precision::F32,
            accumulation: Accumulation::Wide,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_accumulation(mut self, accumulation: Accumulation) -> Self {
        self.accumulation = accumulation;
        self
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.block_rows == 0 || self.block_cols == 0 {
            return Err(KernelError::InvalidBlock {
                rows: self.block_rows,
                cols: self.block_cols,
            });
        }
        Ok(())
    }

    /// Elements of scratch a single query block needs: the score tile plus
    /// the three per-row statistics. The output accumulator lives in `O`.
    pub fn workspace_elems(&self) -> usize {
        self.block_rows * self.block_cols + 3 * self.block_rows
    }
}

/// How the entropy accumulator is rescaled when the running max moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EntropyRescale {
    /// `E <- k E + (ln k) k l + xlogx(P~)`.
    #[default]
    Corrected,
    /// `E <- k E + xlogx(P~)`: omits the `(ln k) k l` term. Wrong whenever the
    /// running max changes after the first block; kept for comparison.
    AsListed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `N x d_v` attention output.
    pub output: Matrix2D,
    /// Per-row Shannon entropy in nats. Empty for [`flash_attention`].
    pub entropy: Vec<f64>,
    /// Per-row `sum_j p ln p`, the negated entropy. Empty for [`flash_attention`].
    pub plogp: Vec<f64>,
    /// Per-row `ln sum_j exp(s_ij)`.
    pub logsumexp: Option<Vec<f64>>,
}

/// Dense reference: materializes scores and probabilities in `f64`.
pub fn naive_attention_entropy(input: &AttentionInput) -> Result<AttentionResult, KernelError> {
    input.validate()?;
    let (n, nk, dv) = (input.q.rows(), input.k.rows(), input.v.cols());
    let scores = input.q.matmul(&input.k.transpose());
    let mut probs = Matrix2D::zeros(n, nk);
    let mut entropy = vec![0.0; n];
    let mut plogp = vec![0.0; n];
    let mut lse = vec![0.0; n];
    for i in 0..n {
        let row = scores.row(i);
        let max = row
            .iter()
            .map(|&s| s * input.scale)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&s| (s * input.scale - max).exp()).sum();
        lse[i] = max + sum.ln();
        let p_row = probs.row_mut(i);
        let mut acc = 0.0;
        for (p, &s) in p_row.iter_mut().zip(row) {
            *p = (s * input.scale - max).exp() / sum;
            if *p > 0.0 {
                acc += *p * p.ln();
            }
        }
        plogp[i] = acc.min(0.0);
        entropy[i] = -plogp[i];
    }
    let output = probs.matmul(input.v);
    debug_assert_eq!(output.shape(), (n, dv));
    Ok(AttentionResult {
        output,
        entropy,
        plogp,
        logsumexp: Some(lse),
    })
}

/// Blocked streaming attention without entropy.
pub fn flash_attention(
    input: &AttentionInput,
    cfg: &BlockConfig,
) -> Result<AttentionResult, KernelError> {
    input.validate()?;
    cfg.validate()?;
    Ok(match cfg.precision {
        Precision::F32 => stream::<f32, false>(input, cfg, EntropyRescale::Corrected),
        Precision::F64 => stream::<f64, false>(input, cfg, EntropyRescale::Corrected),
    })
}

/// Blocked streaming attention that also returns exact per-row entropy.
pub fn flash_attention_entropy(
    input: &AttentionInput,
    cfg: &BlockConfig,
) -> Result<AttentionResult, KernelError> {
    flash_attention_entropy_with(input, cfg, EntropyRescale::Corrected)
}

pub fn flash_attention_entropy_with(
    input: &AttentionInput,
    cfg: &BlockConfig,
    rescale: EntropyRescale,
) -> Result<AttentionResult, KernelError> {
    input.validate()?;
    cfg.validate()?;
    Ok(match cfg.precision {
        Precision::F32 => stream::<f32, true>(input, cfg, rescale),
        Precision::F64 => stream::<f64, true>(input, cfg, rescale),
    })
}

/// Per-row `sum_c x ln x` with `0 ln 0 = 0`.
pub fn row_reduce_xlogx(block: &Matrix2D) -> Result<Vec<f64>, KernelError> {
    (0..block.rows())
        .map(|r| {
            block
                .row(r)
                .iter()
                .enumerate()
                .try_fold(0.0, |acc, (c, &x)| match x {
                    x if x < 0.0 => Err(KernelError::NegativeEntry {
                        row: r,
                        col: c,
                        value: x,
                    }),
                    x if x == 0.0 => Ok(acc),
                    x => Ok(acc + x * x.ln()),
                })
        })
        .collect()
}

/// Both sides of `sum kx ln(kx) = k sum x ln x + (ln k) k sum x`.
pub fn entropy_rescale_identity_check(x: &[f64], k: f64) -> Result<(f64, f64), KernelError> {
    if !(k > 0.0) {
        return Err(KernelError::NonPositiveFactor);
    }
    if let Some(index) = x.iter().position(|&v| !(v > 0.0)) {
        return Err(KernelError::NonPositiveEntry { index });
    }
    let lhs = x.iter().map(|&v| k * v * (k * v).ln()).sum();
    let xlogx: f64 = x.iter().map(|&v| v * v.ln()).sum();
    let mass: f64 = x.iter().sum();
    Ok((lhs, k * xlogx + k.ln() * k * mass))
}

trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
{
    const ZERO: Self;
    const NEG_INFINITY: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const NEG_INFINITY: Self = f32::NEG_INFINITY;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn exp(self) -> Self {
        f32::exp(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const NEG_INFINITY: Self = f64::NEG_INFINITY;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    let s0 = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let s1 = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

fn to_working<T: Real>(m: &Matrix2D, factor: f64) -> Vec<T> {
    m.as_slice().iter().map(|&x| T::from_f64(x * factor)).collect()
}

struct Workspace<T> {
    scores: Vec<T>,
    max: Vec<T>,
    sum: Vec<f64>,
    xlogx: Vec<f64>,
}

impl<T: Real> Workspace<T> {
    fn new(cfg: &BlockConfig) -> Self {
        Self {
            scores: vec![T::ZERO; cfg.block_rows * cfg.block_cols],
            max: vec![T::NEG_INFINITY; cfg.block_rows],
            sum: vec![0.0; cfg.block_rows],
            xlogx: vec![0.0; cfg.block_rows],
        }
    }
}

fn stream<T: Real, const ENTROPY: bool>(
    input: &AttentionInput,
    cfg: &BlockConfig,
    rescale: EntropyRescale,
) -> AttentionResult {
    let (n, nk, d, dv) = (
        input.q.rows(),
        input.k.rows(),
        input.q.cols(),
        input.v.cols(),
    );
    let (br, bc) = (cfg.block_rows, cfg.block_cols);
    let wide = cfg.accumulation == Accumulation::Wide;
    let round = |x: f64| if wide { x } else { T::from_f64(x).to_f64() };

    // The score scale is folded into the queries once.
    let q: Vec<T> = to_working(input.q, input.scale);
    let k: Vec<T> = to_working(input.k, 1.0);
    let v: Vec<T> = to_working(input.v, 1.0);

    let mut out = vec![T::ZERO; n * dv];
    let mut lse = vec![0.0; n];
    let mut plogp = vec![0.0; n];

    out.par_chunks_mut(br * dv)
        .zip(lse.par_chunks_mut(br))
        .zip(plogp.par_chunks_mut(br))
        .enumerate()
        .for_each_init(
            || Workspace::<T>::new(cfg),
            |ws, (block, ((o_blk, lse_blk), plogp_blk))| {
                let row0 = block * br;
                let rows = lse_blk.len();
                ws.max[..rows].fill(T::NEG_INFINITY);
                ws.sum[..rows].fill(0.0);
                ws.xlogx[..rows].fill(0.0);

                for col0 in (0..nk).step_by(bc) {
                    let width = bc.min(nk - col0);
                    for r in 0..rows {
                        let q_row = &q[(row0 + r) * d..(row0 + r + 1) * d];
                        let s_row = &mut ws.scores[r * bc..r * bc + width];
                        for (c, s) in s_row.iter_mut().enumerate() {
                            let key = col0 + c;
                            *s = dot(q_row, &k[key * d..(key + 1) * d]);
                        }
                    }
                    for r in 0..rows {
                        let s_row = &mut ws.scores[r * bc..r * bc + width];
                        let block_max = s_row
                            .iter()
                            .fold(T::NEG_INFINITY, |a, &b| if b > a { b } else { a });
                        let m_old = ws.max[r];
                        let m_new = if block_max > m_old { block_max } else { m_old };
                        // First key block: nothing to rescale.
                        let first = m_old == T::NEG_INFINITY;
                        let shrink = if first { T::ZERO } else { (m_old - m_new).exp() };

                        let mut row_sum = T::ZERO;
                        let mut row_xlogx = T::ZERO;
                        for s in s_row.iter_mut() {
                            let shifted = *s - m_new;
                            let p = shifted.exp();
                            row_sum = row_sum + p;
                            if ENTROPY {
                                row_xlogx = row_xlogx + p * shifted;
                            }
                            *s = p;
                        }

                        let l_old = ws.sum[r];
                        let k64 = shrink.to_f64();
                        ws.sum[r] = round(k64 * l_old + row_sum.to_f64());
                        if ENTROPY {
                            let mut e = k64 * ws.xlogx[r];
                            if rescale == EntropyRescale::Corrected && !first {
                                let ln_k = (m_old - m_new).to_f64();
                                e += ln_k * k64 * l_old;
                            }
                            ws.xlogx[r] = round(e + row_xlogx.to_f64());
                        }
                        ws.max[r] = m_new;

                        let o_row = &mut o_blk[r * dv..(r + 1) * dv];
                        if !first {
                            o_row.iter_mut().for_each(|o| *o = *o * shrink);
                        }
                        for (c, &p) in s_row.iter().enumerate() {
                            let v_row = &v[(col0 + c) * dv..(col0 + c + 1) * dv];
                            for (o, &vv) in o_row.iter_mut().zip(v_row) {
                                *o = *o + p * vv;
                            }
                        }
                    }
                }

                for r in 0..rows {
                    let l = ws.sum[r];
                    let inv = T::from_f64(1.0 / l);
                    o_blk[r * dv..(r + 1) * dv]
                        .iter_mut()
                        .for_each(|o| *o = *o * inv);
                    lse_blk[r] = ws.max[r].to_f64() + l.ln();
                    if ENTROPY {
                        // Rounding can leave near one-hot rows a hair above zero.
                        plogp_blk[r] = (ws.xlogx[r] / l - l.ln()).min(0.0);
                    }
                }
            },
        );
    if !ENTROPY {
        plogp.clear();
    }

    let output = Matrix2D::from_fn(n, dv, |r, c| out[r * dv + c].to_f64());
    let entropy = plogp.iter().map(|&x| -x).collect();
    AttentionResult {
        output,
        entropy,
        plogp,
        logsumexp: Some(lse),
    }
}
