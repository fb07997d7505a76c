//! Scale, layer and token gating combined into one pruning plan.
//!
//! * Scale: `rho_s` (low-entropy ratio of the reference layer) picks the
//!   first scale `D` where the configured comparison against `tau` holds;
//!   scales before `D` are never pruned, and no `D` means no pruning at all.
//! * Layer: only layers classified Detail are pruned.
//! * Token: `q_i = (s / S_max) * R_l * Hhat_i` is mapped to
//!   `P_keep = 1 - clip(alpha_min + (alpha_max - alpha_min) q_i, 0, 1)`.
//!
//! Masks are materialized either deterministically (keep the
//! `ceil(sum P_keep)` most likely tokens, lower index first on ties) or by
//! seeded Bernoulli draws. Both respect a floor of `ceil((1 - alpha_max) N)`
//! kept tokens.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classify::{LayerClassification, LayerLabel};
use crate::rng::{derive_seed, SeededRng};
use crate::stats::{self, EntropyMap, StatsError};
use crate::tensor::ScaleSchedule;
use crate::tprv::{self, Dtype, TprvError};

pub const PLAN_FORMAT: &str = "toprokit.plan";
pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("empty rho profile")]
    EmptyRho,
    #[error("rho_{scale} = {value} is outside [0, 1]")]
    BadRho { scale: usize, value: f64 },
    #[error("scale {scale} is outside 1..={max}")]
    BadScale { scale: usize, max: usize },
    #[error("invalid tendency value {value} at token {index}")]
    BadTendency { index: usize, value: f64 },
    #[error("layer score {0} outside [0, 1]")]
    BadLayerScore(f64),
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tensor(#[from] TprvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("plan file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthComparison {
    /// `D = min { s | rho_s >= tau }`.
    #[default]
    AtLeast,
    /// `D = min { s | rho_s <= tau }`.
    AtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    Deterministic,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub tau: f64,
    pub beta: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub detail_threshold: f64,
    pub depth_comparison: DepthComparison,
    pub prune_mode: PruneMode,
    pub rng_seed: Option<u64>,
    /// Layer whose head-averaged entropies drive `rho_s`. Defaults to the last layer.
    pub reference_layer: Option<usize>,
    /// Scale used for layer classification. Defaults to `ceil(S_max / 2)`.
    pub rep_scale: Option<usize>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tau: 0.4,
            beta: 1.0,
            alpha_min: 0.3,
            alpha_max: 0.9,
            detail_threshold: 0.5,
            depth_comparison: DepthComparison::AtLeast,
            prune_mode: PruneMode::Deterministic,
            rng_seed: None,
            reference_layer: None,
            rep_scale: None,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(PolicyError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("tau", self.tau)?;
        unit("alpha_min", self.alpha_min)?;
        unit("alpha_max", self.alpha_max)?;
        unit("detail_threshold", self.detail_threshold)?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PolicyError::InvalidConfig(format!(
                "beta = {} must be positive",
                self.beta
            )));
        }
        if self.alpha_max < self.alpha_min {
            return Err(PolicyError::InvalidConfig(format!(
                "alpha_max = {} is below alpha_min = {}",
                self.alpha_max, self.alpha_min
            )));
        }
        Ok(())
    }

    /// Minimum number of kept tokens out of `n` at a pruned `(scale, layer)`.
    pub fn keep_floor(&self, n: usize) -> usize {
        ceil_count((1.0 - self.alpha_max) * n as f64).min(n)
    }
}

/// `ceil`, ignoring rounding noise just above an integer.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDecision {
    pub rho_per_scale: Vec<f64>,
    /// 1-based pruning start scale; `None` disables pruning everywhere.
    pub depth: Option<usize>,
}

impl ScaleDecision {
    pub fn prunes(&self, scale: usize) -> bool {
        self.depth.is_some_and(|d| scale >= d)
    }
}

pub fn scale_depth(rho: &[f64], cfg: &PolicyConfig) -> Result<ScaleDecision, PolicyError> {
    if rho.is_empty() {
        return Err(PolicyError::EmptyRho);
    }
    if let Some((i, &value)) = rho
        .iter()
        .enumerate()
        .find(|(_, r)| !(0.0..=1.0).contains(*r))
    {
        return Err(PolicyError::BadRho {
            scale: i + 1,
            value,
        });
    }
    let hit = |r: f64| match cfg.depth_comparison {
        DepthComparison::AtLeast => r >= cfg.tau,
        DepthComparison::AtMost => r <= cfg.tau,
    };
    Ok(ScaleDecision {
        rho_per_scale: rho.to_vec(),
        depth: rho.iter().position(|&r| hit(r)).map(|i| i + 1),
    })
}

/// `q_i = (scale / s_max) * layer_score * normalized_i`.
pub fn token_tendency(
    scale: usize,
    s_max: usize,
    layer_score: f64,
    normalized_entropy: &[f64],
) -> Result<Vec<f64>, PolicyError> {
    if scale == 0 || scale > s_max {
        return Err(PolicyError::BadScale { scale, max: s_max });
    }
    if !(0.0..=1.0).contains(&layer_score) {
        return Err(PolicyError::BadLayerScore(layer_score));
    }
    let phi = scale as f64 / s_max as f64;
    Ok(normalized_entropy
        .iter()
        .map(|&h| phi * layer_score * h)
        .collect())
}

/// `P_keep` for one token at a scale that is being pruned.
pub fn keep_probability(q: f64, cfg: &PolicyConfig) -> f64 {
    1.0 - (cfg.alpha_min + (cfg.alpha_max - cfg.alpha_min) * q).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecision {
    pub scale: usize,
    pub layer: usize,
    pub tendency: Vec<f64>,
    pub keep_probability: Vec<f64>,
    /// `true` keeps the token.
    pub mask: Vec<bool>,
    /// Normalized-entropy mass of the pruned tokens.
    pub gamma: f64,
}

impl TokenDecision {
    pub fn keep_all(scale: usize, layer: usize, n: usize) -> Self {
        Self {
            scale,
            layer,
            tendency: vec![0.0; n],
            keep_probability: vec![1.0; n],
            mask: vec![true; n],
            gamma: 0.0,
        }
    }

    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }
}

/// Sum of `weights` over pruned tokens.
pub fn pruned_mass(mask: &[bool], weights: &[f64]) -> f64 {
    mask.iter()
        .zip(weights)
        .filter(|(m, _)| !**m)
        .map(|(_, w)| w)
        .sum()
}

/// Token indices ordered by descending keep probability, lower index first on ties.
fn keep_order(p_keep: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p_keep.len()).collect();
    order.sort_by(|&a, &b| p_keep[b].total_cmp(&p_keep[a]).then(a.cmp(&b)));
    order
}

/// Keep probabilities and mask for the tokens of `(scale, layer)`.
///
/// The returned decision has `gamma = 0`; [`build_plan`] fills it in once the
/// normalized entropies are known.
pub fn retention(
    q: &[f64],
    scale: usize,
    layer: usize,
    decision: &ScaleDecision,
    cfg: &PolicyConfig,
) -> Result<TokenDecision, PolicyError> {
    let s_max = decision.rho_per_scale.len();
    if scale == 0 || scale > s_max {
        return Err(PolicyError::BadScale { scale, max: s_max });
    }
    if let Some((index, &value)) = q.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(PolicyError::BadTendency { index, value });
    }
    let n = q.len();
    if !decision.prunes(scale) {
        let mut d = TokenDecision::keep_all(scale, layer, n);
        d.tendency = q.to_vec();
        return Ok(d);
    }
    let p_keep: Vec<f64> = q.iter().map(|&qi| keep_probability(qi, cfg)).collect();
    let floor = cfg.keep_floor(n);
    let mask = match cfg.prune_mode {
        PruneMode::Deterministic => {
            let target = ceil_count(p_keep.iter().sum()).max(floor).min(n);
            let mut mask = vec![false; n];
            for &i in keep_order(&p_keep).iter().take(target) {
                mask[i] = true;
            }
            mask
        }
        PruneMode::Sampled => {
            let stream = ((scale as u64) << 32) | layer as u64;
            let mut rng = SeededRng::new(derive_seed(cfg.rng_seed.unwrap_or(0), stream));
            let mut mask: Vec<bool> = p_keep.iter().map(|&p| rng.bernoulli(p)).collect();
            let mut kept = mask.iter().filter(|&&m| m).count();
            for i in keep_order(&p_keep) {
                if kept >= floor {
                    break;
                }
                if !mask[i] {
                    mask[i] = true;
                    kept += 1;
                }
            }
            mask
        }
    };
    Ok(TokenDecision {
        scale,
        layer,
        tendency: q.to_vec(),
        keep_probability: p_keep,
        mask,
        gamma: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub config: PolicyConfig,
    pub schedule: ScaleSchedule,
    pub layers: usize,
    pub reference_layer: usize,
    pub scale_decision: ScaleDecision,
    pub classifications: Vec<LayerClassification>,
    /// One decision per `(scale, layer)`, scale-major.
    pub decisions: Vec<TokenDecision>,
}

impl PruningPlan {
    /// A plan that keeps every token everywhere.
    pub fn keep_all(schedule: &ScaleSchedule, layers: usize) -> Self {
        let decisions = schedule
            .scales()
            .flat_map(|s| {
                let n = schedule.tokens(s).expect("scale in range");
                (0..layers).map(move |l| TokenDecision::keep_all(s, l, n))
            })
            .collect();
        Self {
            config: PolicyConfig::default(),
            schedule: schedule.clone(),
            layers,
            reference_layer: layers.saturating_sub(1),
            scale_decision: ScaleDecision {
                rho_per_scale: vec![0.0; schedule.len()],
                depth: None,
            },
            classifications: Vec::new(),
            decisions,
        }
    }

    pub fn decision(&self, scale: usize, layer: usize) -> Option<&TokenDecision> {
        if scale == 0 || layer >= self.layers {
            return None;
        }
        self.decisions.get((scale - 1) * self.layers + layer)
    }

    pub fn mask(&self, scale: usize, layer: usize) -> Option<&[bool]> {
        self.decision(scale, layer).map(|d| d.mask.as_slice())
    }

    pub fn is_identity(&self) -> bool {
        self.decisions.iter().all(|d| d.mask.iter().all(|&m| m))
    }

    pub fn total_tokens(&self) -> usize {
        self.decisions.iter().map(TokenDecision::len).sum()
    }

    pub fn kept_tokens(&self) -> usize {
        self.decisions.iter().map(TokenDecision::kept).sum()
    }

    /// Writes `plan.json` and one `masks/s{scale}_l{layer}.tprv` per decision
    /// (32-bit floats, 1 = keep).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PolicyError> {
        let dir = dir.as_ref();
        let masks = dir.join("masks");
        fs::create_dir_all(&masks)?;
        let mut entries = Vec::with_capacity(self.decisions.len());
        for d in &self.decisions {
            let file = format!("masks/s{}_l{}.tprv", d.scale, d.layer);
            let values: Vec<f64> = d.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            tprv::vector_to_file(&values, dir.join(&file), Dtype::F32)?;
            entries.push(PlanFileEntry {
                scale: d.scale,
                layer: d.layer,
                tokens: d.len(),
                kept: d.kept(),
                gamma: d.gamma,
                tendency: d.tendency.clone(),
                keep_probability: d.keep_probability.clone(),
                mask_file: file,
            });
        }
        let file = PlanFile {
            format: PLAN_FORMAT.into(),
            version: PLAN_VERSION,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            layers: self.layers,
            reference_layer: self.reference_layer,
            rho_per_scale: self.scale_decision.rho_per_scale.clone(),
            depth: self.scale_decision.depth,
            classifications: self.classifications.clone(),
            total_tokens: self.total_tokens(),
            kept_tokens: self.kept_tokens(),
            decisions: entries,
        };
        let json = serde_json::to_string_pretty(&file).expect("plan serializes");
        fs::write(dir.join("plan.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("plan.json"))?;
        let file: PlanFile =
            serde_json::from_str(&text).map_err(|e| PolicyError::Format(e.to_string()))?;
        if file.format != PLAN_FORMAT || file.version != PLAN_VERSION {
            return Err(PolicyError::Format(format!(
                "unsupported plan format {} v{}",
                file.format, file.version
            )));
        }
        let mut decisions = Vec::with_capacity(file.decisions.len());
        for e in file.decisions {
            if e.mask_file.contains("..") || e.mask_file.starts_with('/') {
                return Err(PolicyError::Format(format!("bad mask path {}", e.mask_file)));
            }
            let values = tprv::vector_from_file(dir.join(&e.mask_file))?;
            if values.len() != e.tokens {
                return Err(PolicyError::Format(format!(
                    "{} holds {} entries, expected {}",
                    e.mask_file,
                    values.len(),
                    e.tokens
                )));
            }
            decisions.push(TokenDecision {
                scale: e.scale,
                layer: e.layer,
                tendency: e.tendency,
                keep_probability: e.keep_probability,
                mask: values.iter().map(|&v| v != 0.0).collect(),
                gamma: e.gamma,
            });
        }
        let plan = Self {
            config: file.config,
            schedule: file.schedule,
            layers: file.layers,
            reference_layer: file.reference_layer,
            scale_decision: ScaleDecision {
                rho_per_scale: file.rho_per_scale,
                depth: file.depth,
            },
            classifications: file.classifications,
            decisions,
        };
        plan.check_coverage(&plan.schedule, plan.layers)?;
        Ok(plan)
    }

    /// Verifies the plan has a correctly sized decision for every `(scale, layer)`.
    pub fn check_coverage(&self, schedule: &ScaleSchedule, layers: usize) -> Result<(), PolicyError> {
        if &self.schedule != schedule || self.layers != layers {
            return Err(PolicyError::Inconsistent(
                "plan schedule or layer count does not match".into(),
            ));
        }
        for s in schedule.scales() {
            for l in 0..layers {
                let n = schedule.tokens(s).expect("scale in range");
                match self.decision(s, l) {
                    Some(d) if d.scale == s && d.layer == l && d.len() == n => {}
                    _ => {
                        return Err(PolicyError::Inconsistent(format!(
                            "missing or malformed decision for scale {s}, layer {l}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format: String,
    version: u32,
    config: PolicyConfig,
    schedule: ScaleSchedule,
    layers: usize,
    reference_layer: usize,
    rho_per_scale: Vec<f64>,
    depth: Option<usize>,
    classifications: Vec<LayerClassification>,
    total_tokens: usize,
    kept_tokens: usize,
    decisions: Vec<PlanFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct PlanFileEntry {
    scale: usize,
    layer: usize,
    tokens: usize,
    kept: usize,
    gamma: f64,
    tendency: Vec<f64>,
    keep_probability: Vec<f64>,
    mask_file: String,
}

/// Low-entropy ratio per scale, measured on the head-averaged entropies of `layer`.
pub fn rho_profile(map: &EntropyMap, layer: usize) -> Result<Vec<f64>, PolicyError> {
    Ok(stats::scale_profile(map, layer)?
        .into_iter()
        .map(|s| s.low_entropy_ratio)
        .collect())
}

/// Combines the three gates into per-`(scale, layer)` token decisions.
pub fn build_plan(
    map: &EntropyMap,
    classifications: &[LayerClassification],
    cfg: &PolicyConfig,
) -> Result<PruningPlan, PolicyError> {
    cfg.validate()?;
    let layers = map.layers();
    if classifications.len() != layers
        || classifications.iter().enumerate().any(|(i, c)| c.layer != i)
    {
        return Err(PolicyError::Inconsistent(format!(
            "{} classifications for {} layers",
            classifications.len(),
            layers
        )));
    }
    let reference_layer = cfg.reference_layer.unwrap_or(layers.saturating_sub(1));
    if reference_layer >= layers {
        return Err(PolicyError::InvalidConfig(format!(
            "reference layer {reference_layer} outside {layers} layers"
        )));
    }
    let schedule = map.schedule().clone();
    let s_max = schedule.len();
    let scale_decision = scale_depth(&rho_profile(map, reference_layer)?, cfg)?;

    let mut decisions = Vec::with_capacity(s_max * layers);
    for s in schedule.scales() {
        let n = schedule.tokens(s).expect("scale in range");
        for (l, class) in classifications.iter().enumerate() {
            if !scale_decision.prunes(s) || class.label == LayerLabel::Global {
                decisions.push(TokenDecision::keep_all(s, l, n));
                continue;
            }
            let weights = stats::normalize_entropy_or_uniform(&stats::head_average(map, s, l)?)?;
            let q = token_tendency(s, s_max, class.score, &weights)?;
            let mut d = retention(&q, s, l, &scale_decision, cfg)?;
            d.gamma = pruned_mass(&d.mask, &weights);
            decisions.push(d);
        }
    }
    Ok(PruningPlan {
        config: cfg.clone(),
        schedule,
        layers,
        reference_layer,
        scale_decision,
        classifications: classifications.to_vec(),
        decisions,
    })
}
