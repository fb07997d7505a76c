//! Global / Detail layer classification from the spectrum of entropy grids.
//!
//! A layer whose entropy grid is dominated by one singular direction carries
//! image-wide structure (Global); near-equal top singular values indicate
//! locally varying focus (Detail). With `pc_ratio = sigma1 / sigma2` the score
//! `R = exp(-beta (pc_ratio - 1))` is 1 for perfectly balanced grids and tends
//! to 0 as one direction dominates.

use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, SeededRng};
use crate::stats::{self, EntropyMap, StatsError};
use crate::tensor::Matrix2D;

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_DETAIL_THRESHOLD: f64 = 0.5;
/// Floor applied to `sigma2` so the ratio stays defined on rank-1 grids.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const DEFAULT_SVD_TOL: f64 = 1e-12;
pub const DEFAULT_SVD_MAX_ITERS: usize = 20_000;

#[derive(Debug, thiserror::Error)]
pub enum ClassifyError {
    #[error("matrix is empty")]
    EmptyMatrix,
    #[error("beta must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("singular values must satisfy sigma1 >= sigma2 >= 0 (got {0}, {1})")]
    BadSingularValues(f64, f64),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopSingularValues {
    pub sigma1: f64,
    pub sigma2: f64,
    /// False when `max_iters` ran out before the residual tolerance was met;
    /// the values are then the best estimates reached.
    pub converged: bool,
    pub iterations: usize,
}

/// Gram matrix of the smaller side, `A^T A` or `A A^T`.
fn gram(m: &Matrix2D) -> Matrix2D {
    let t = m.transpose();
    if m.rows() >= m.cols() {
        t.matmul(m)
    } else {
        m.matmul(&t)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matvec(g: &Matrix2D, v: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = g.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn remove_component(v: &mut [f64], dir: &[f64]) {
    let proj: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(dir).for_each(|(a, b)| *a -= proj * b);
}

/// Dominant eigenpair of symmetric PSD `g`, optionally restricted to the
/// complement of `deflate`. Stops once `||g v - lambda v|| <= tol * scale`.
fn power_iterate(
    g: &Matrix2D,
    deflate: Option<&[f64]>,
    scale: f64,
    tol: f64,
    max_iters: usize,
) -> (f64, Vec<f64>, bool, usize) {
    let n = g.rows();
    // A separate start vector for the deflated pass: reusing the first one
    // loses the second direction whenever sigma1 == sigma2.
    let stream = u64::from(deflate.is_some());
    let mut rng = SeededRng::new(derive_seed(0x5EED_0F_5EED, stream));
    let mut v: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
    let mut gv = vec![0.0; n];
    if let Some(d) = deflate {
        remove_component(&mut v, d);
    }
    let len = norm(&v);
    if len == 0.0 {
        return (0.0, v, true, 0);
    }
    v.iter_mut().for_each(|x| *x /= len);

    let mut lambda = 0.0;
    for iter in 1..=max_iters {
        matvec(g, &v, &mut gv);
        if let Some(d) = deflate {
            remove_component(&mut gv, d);
        }
        lambda = v.iter().zip(&gv).map(|(a, b)| a * b).sum::<f64>();
        let residual = gv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * scale {
            return (lambda.max(0.0), v, true, iter);
        }
        let len = norm(&gv);
        if len == 0.0 {
            return (0.0, v, true, iter);
        }
        v.iter_mut().zip(&gv).for_each(|(a, b)| *a = b / len);
    }
    (lambda.max(0.0), v, false, max_iters)
}

/// The two largest singular values of `m`, by power iteration on the Gram
/// matrix followed by one deflation step.
pub fn top2_singular_values(
    m: &Matrix2D,
    tol: f64,
    max_iters: usize,
) -> Result<TopSingularValues, ClassifyError> {
    if m.is_empty() {
        return Err(ClassifyError::EmptyMatrix);
    }
    let g = gram(m);
    // Frobenius norm squared bounds lambda1 from above; zero means a zero matrix.
    let frob2: f64 = m.as_slice().iter().map(|x| x * x).sum();
    if frob2 == 0.0 {
        return Ok(TopSingularValues {
            sigma1: 0.0,
            sigma2: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let (l1, v1, ok1, it1) = power_iterate(&g, None, frob2, tol, max_iters);
    if g.rows() == 1 {
        return Ok(TopSingularValues {
            sigma1: l1.sqrt(),
            sigma2: 0.0,
            converged: ok1,
            iterations: it1,
        });
    }
    let (l2, _, ok2, it2) = power_iterate(&g, Some(&v1), frob2, tol, max_iters);
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    Ok(TopSingularValues {
        sigma1: s1.max(s2),
        sigma2: s1.min(s2),
        converged: ok1 && ok2,
        iterations: it1 + it2,
    })
}

/// `(pc_ratio, score)` with `pc_ratio = sigma1 / max(sigma2, epsilon)` and
/// `score = exp(-beta (pc_ratio - 1))`. An all-zero spectrum gives `(1, 1)`.
pub fn layer_score(
    sigma1: f64,
    sigma2: f64,
    beta: f64,
    epsilon: f64,
) -> Result<(f64, f64), ClassifyError> {
    if !(beta > 0.0) {
        return Err(ClassifyError::NonPositiveBeta(beta));
    }
    if !(sigma2 >= 0.0 && sigma1 >= sigma2) {
        return Err(ClassifyError::BadSingularValues(sigma1, sigma2));
    }
    let ratio = if sigma1 < epsilon {
        1.0
    } else {
        (sigma1 / sigma2.max(epsilon)).max(1.0)
    };
    Ok((ratio, (-beta * (ratio - 1.0)).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerLabel {
    Global,
    Detail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClassification {
    pub layer: usize,
    pub scale: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    pub pc_ratio: f64,
    pub score: f64,
    pub label: LayerLabel,
}

/// Middle scale `ceil(S_max / 2)`.
pub fn default_rep_scale(scales: usize) -> usize {
    scales.div_ceil(2).max(1)
}

/// Classifies every layer of `map` on its head-averaged entropy grid at `rep_scale`.
pub fn classify_layers(
    map: &EntropyMap,
    rep_scale: usize,
    beta: f64,
    detail_threshold: f64,
) -> Result<Vec<LayerClassification>, ClassifyError> {
    (0..map.layers())
        .map(|layer| {
            let grid = stats::entropy_grid(map, rep_scale, layer)?;
            let top = top2_singular_values(&grid, DEFAULT_SVD_TOL, DEFAULT_SVD_MAX_ITERS)?;
            let (pc_ratio, score) = layer_score(top.sigma1, top.sigma2, beta, SIGMA_FLOOR)?;
            Ok(LayerClassification {
                layer,
                scale: rep_scale,
                sigma1: top.sigma1,
                sigma2: top.sigma2,
                pc_ratio,
                score,
                label: if score >= detail_threshold {
                    LayerLabel::Detail
                } else {
                    LayerLabel::Global
                },
            })
        })
        .collect()
}
