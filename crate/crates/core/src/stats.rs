//! Entropy maps across the generation hierarchy and their per-scale statistics.
//!
//! An [`EntropyMap`] stores one entropy per token for every recorded
//! `(scale, layer, head)`. Scales are 1-based, layers and heads 0-based.
//!
//! On disk a map is a directory holding `manifest.json` plus one rank-1 TPRV
//! tensor per entry:
//!
//! ```json
//! {
//!   "format": "toprokit.entropy-map",
//!   "version": 1,
//!   "schedule": [[1, 1], [2, 2]],
//!   "layers": 2,
//!   "heads": 1,
//!   "entries": [{ "scale": 1, "layer": 0, "head": 0, "file": "s1_l0_h0.tprv" }]
//! }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::{Matrix2D, ScaleSchedule};
use crate::tprv::{self, Dtype, TprvError};

pub const MANIFEST_FORMAT: &str = "toprokit.entropy-map";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("negative or non-finite entropy {value} at token {index}")]
    InvalidEntropy { index: usize, value: f64 },
    #[error("entropies sum to zero (every token fully concentrated)")]
    ZeroSum,
    #[error("no entropy recorded for scale {scale}, layer {layer}, head {head}")]
    Missing { scale: usize, layer: usize, head: usize },
    #[error("scale {0} is outside the schedule")]
    BadScale(usize),
    #[error("index ({layer}, {head}) outside {layers} layers x {heads} heads")]
    BadIndex {
        layer: usize,
        head: usize,
        layers: usize,
        heads: usize,
    },
    #[error("scale {scale} expects {expected} tokens, got {got}")]
    LengthMismatch {
        scale: usize,
        expected: usize,
        got: usize,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TprvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-token entropies keyed by `(scale, layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    schedule: ScaleSchedule,
    layers: usize,
    heads: usize,
    values: BTreeMap<(usize, usize, usize), Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    schedule: ScaleSchedule,
    layers: usize,
    heads: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    scale: usize,
    layer: usize,
    head: usize,
    file: String,
}

impl EntropyMap {
    pub fn new(schedule: ScaleSchedule, layers: usize, heads: usize) -> Self {
        Self {
            schedule,
            layers,
            heads,
            values: BTreeMap::new(),
        }
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn insert(
        &mut self,
        scale: usize,
        layer: usize,
        head: usize,
        entropies: Vec<f64>,
    ) -> Result<(), StatsError> {
        let expected = self.schedule.tokens(scale).ok_or(StatsError::BadScale(scale))?;
        if layer >= self.layers || head >= self.heads {
            return Err(StatsError::BadIndex {
                layer,
                head,
                layers: self.layers,
                heads: self.heads,
            });
        }
        if entropies.len() != expected {
            return Err(StatsError::LengthMismatch {
                scale,
                expected,
                got: entropies.len(),
            });
        }
        check_entropies(&entropies)?;
        self.values.insert((scale, layer, head), entropies);
        Ok(())
    }

    pub fn get(&self, scale: usize, layer: usize, head: usize) -> Option<&[f64]> {
        self.values.get(&(scale, layer, head)).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize, usize), &[f64])> {
        self.values.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StatsError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.values.len());
        for (&(scale, layer, head), v) in &self.values {
            let file = format!("s{scale}_l{layer}_h{head}.tprv");
            tprv::vector_to_file(v, dir.join(&file), Dtype::F64)?;
            entries.push(ManifestEntry {
                scale,
                layer,
                head,
                file,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            schedule: self.schedule.clone(),
            layers: self.layers,
            heads: self.heads,
            entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StatsError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| StatsError::Manifest(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(StatsError::Manifest(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut map = Self::new(manifest.schedule, manifest.layers, manifest.heads);
        for e in manifest.entries {
            if e.file.contains(['/', '\\']) {
                return Err(StatsError::Manifest(format!("bad file name {}", e.file)));
            }
            let v = tprv::vector_from_file(dir.join(&e.file))?;
            map.insert(e.scale, e.layer, e.head, v)?;
        }
        Ok(map)
    }
}

fn check_entropies(values: &[f64]) -> Result<(), StatsError> {
    match values
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        Some((index, &value)) => Err(StatsError::InvalidEntropy { index, value }),
        None => Ok(()),
    }
}

/// Per-token mean over all heads of `(scale, layer)`.
pub fn head_average(map: &EntropyMap, scale: usize, layer: usize) -> Result<Vec<f64>, StatsError> {
    let n = map.schedule.tokens(scale).ok_or(StatsError::BadScale(scale))?;
    if map.heads == 0 {
        return Err(StatsError::Empty);
    }
    let mut acc = vec![0.0; n];
    for head in 0..map.heads {
        let v = map.get(scale, layer, head).ok_or(StatsError::Missing {
            scale,
            layer,
            head,
        })?;
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x);
    }
    let heads = map.heads as f64;
    acc.iter_mut().for_each(|a| *a /= heads);
    Ok(acc)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of entries strictly below the mean. Ties count as not low.
pub fn low_entropy_ratio(entropies: &[f64]) -> Result<f64, StatsError> {
    if entropies.is_empty() {
        return Err(StatsError::Empty);
    }
    let m = mean(entropies);
    let below = entropies.iter().filter(|&&h| h < m).count();
    Ok(below as f64 / entropies.len() as f64)
}

/// `H_i / sum_j H_j`. Fails with [`StatsError::ZeroSum`] when every entropy is zero.
pub fn normalize_entropy(entropies: &[f64]) -> Result<Vec<f64>, StatsError> {
    if entropies.is_empty() {
        return Err(StatsError::Empty);
    }
    check_entropies(entropies)?;
    let total: f64 = entropies.iter().sum();
    if total <= 0.0 {
        return Err(StatsError::ZeroSum);
    }
    Ok(entropies.iter().map(|&h| h / total).collect())
}

/// [`normalize_entropy`] that falls back to uniform weights on a zero sum.
pub fn normalize_entropy_or_uniform(entropies: &[f64]) -> Result<Vec<f64>, StatsError> {
    match normalize_entropy(entropies) {
        Err(StatsError::ZeroSum) => Ok(vec![1.0 / entropies.len() as f64; entropies.len()]),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub scale: usize,
    pub mean_entropy: f64,
    pub low_entropy_ratio: f64,
    pub token_count: usize,
}

pub fn scale_stats(map: &EntropyMap, scale: usize, layer: usize) -> Result<ScaleStats, StatsError> {
    let h = head_average(map, scale, layer)?;
    Ok(ScaleStats {
        scale,
        mean_entropy: mean(&h),
        low_entropy_ratio: low_entropy_ratio(&h)?,
        token_count: h.len(),
    })
}

/// [`scale_stats`] for every scale of the schedule, measured at `layer`.
pub fn scale_profile(map: &EntropyMap, layer: usize) -> Result<Vec<ScaleStats>, StatsError> {
    map.schedule
        .scales()
        .map(|s| scale_stats(map, s, layer))
        .collect()
}

/// Head-averaged entropies of `(scale, layer)` laid out row-major as `h_s x w_s`.
pub fn entropy_grid(map: &EntropyMap, scale: usize, layer: usize) -> Result<Matrix2D, StatsError> {
    let (h, w) = map.schedule.dims(scale).ok_or(StatsError::BadScale(scale))?;
    let values = head_average(map, scale, layer)?;
    if values.len() != h * w {
        return Err(StatsError::LengthMismatch {
            scale,
            expected: h * w,
            got: values.len(),
        });
    }
    Ok(Matrix2D::from_vec(h, w, values).expect("entropies are finite"))
}
