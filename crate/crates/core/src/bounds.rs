//! Monte-Carlo checks of the average-case pruning error bounds.
//!
//! Three independent toy processes, one per pruning stage:
//!
//! * scale: increments `dZ_s` with `E||dZ_s||^2 = F_s = 1 - rho_s`; truncating
//!   after `D` costs `||sum_{s > D} dZ_s||^2`, bounded by `(1 - rho_D) F`;
//! * layer: residuals with energies `(R_l / sum R) G_s`; dropping a set of
//!   layers costs `gamma_s G_s` in expectation;
//! * token: token vectors with `E||t_i||^2 = w_i H`; dropping tokens costs at
//!   most `gamma H`.
//!
//! Increments are isotropic Gaussians. `correlation = c` mixes a shared
//! direction into every scale increment and layer residual
//! (`sqrt(1 - c) * own + sqrt(c) * shared`), which breaks the orthogonality
//! the bounds rely on. Reports keep "bound satisfied" apart from
//! "assumptions satisfied".

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::DepthComparison;
use crate::rng::{derive_seed, SeededRng};

pub const REPORT_FORMAT: &str = "toprokit.bounds-report";
pub const REPORT_VERSION: u32 = 1;
/// Proportionality constant in `F_s = k (1 - rho_s)`.
pub const ENERGY_CONSTANT: f64 = 1.0;
/// Largest mean pairwise cosine between pruned increments still read as uncorrelated.
pub const CORRELATION_TOLERANCE: f64 = 0.05;
pub const DEFAULT_SLACK: f64 = 1.1;
pub const DEFAULT_PREDICTION_TOLERANCE: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum BoundsError {
    #[error("invalid rho profile: {0}")]
    Rho(String),
    #[error("invalid layer model: {0}")]
    Layer(String),
    #[error("invalid token model: {0}")]
    Token(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

/// Compensated (Neumaier) sum; the order is fixed by the caller.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = neumaier_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = neumaier_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn gaussian_vec(rng: &mut SeededRng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.next_gaussian() * std).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Mean pairwise cosine similarity; `None` with fewer than two nonzero vectors.
fn mean_pair_cosine(vs: &[Vec<f64>]) -> Option<f64> {
    let live: Vec<&Vec<f64>> = vs.iter().filter(|v| norm2(v) > 0.0).collect();
    if live.len() < 2 {
        return None;
    }
    let mut acc = Vec::new();
    for i in 0..live.len() {
        for j in i + 1..live.len() {
            let dot: f64 = live[i].iter().zip(live[j]).map(|(a, b)| a * b).sum();
            acc.push(dot / (norm2(live[i]) * norm2(live[j])).sqrt());
        }
    }
    Some(neumaier_sum(acc.iter().copied()) / acc.len() as f64)
}

/// Independent draws with energies `energies[k]`, mixed with one shared direction.
fn correlated_draws(rng: &mut SeededRng, energies: &[f64], dim: usize, correlation: f64) -> Vec<Vec<f64>> {
    let shared = gaussian_vec(rng, dim, 1.0);
    let (own_w, shared_w) = ((1.0 - correlation).sqrt(), correlation.sqrt());
    energies
        .iter()
        .map(|&e| {
            let std = (e / dim as f64).sqrt();
            let own = gaussian_vec(rng, dim, 1.0);
            own.iter()
                .zip(&shared)
                .map(|(a, b)| std * (own_w * a + shared_w * b))
                .collect()
        })
        .collect()
}

fn sum_vectors<'a>(vs: impl IntoIterator<Item = &'a Vec<f64>>, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for v in vs {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    out
}

fn check_common(dim: usize, trials: usize, correlation: f64) -> Result<(), BoundsError> {
    if dim == 0 || trials == 0 {
        return Err(BoundsError::Scenario("dim and trials must be positive".into()));
    }
    if !(0.0..=1.0).contains(&correlation) {
        return Err(BoundsError::Scenario(format!("correlation {correlation} outside [0, 1]")));
    }
    Ok(())
}

/// Per-trial samples `(error, mean pair cosine)` in trial order.
fn run_trials<F>(trials: usize, seed: u64, f: F) -> Vec<(f64, Option<f64>)>
where
    F: Fn(&mut SeededRng) -> (f64, Option<f64>) + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|t| f(&mut SeededRng::new(derive_seed(seed, t as u64))))
        .collect()
}

fn summarize_cosines(samples: &[(f64, Option<f64>)]) -> Option<f64> {
    let c: Vec<f64> = samples.iter().filter_map(|s| s.1).collect();
    (!c.is_empty()).then(|| neumaier_sum(c.iter().copied()) / c.len() as f64)
}

fn uncorrelated(cosine: Option<f64>) -> bool {
    cosine.map_or(true, |c| c.abs() <= CORRELATION_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleScenario {
    pub rho: Vec<f64>,
    pub tau: f64,
    pub depth_comparison: DepthComparison,
}

impl Default for ScaleScenario {
    fn default() -> Self {
        Self {
            rho: vec![0.1, 0.3, 0.5, 0.7],
            tau: 0.4,
            depth_comparison: DepthComparison::AtLeast,
        }
    }
}

/// The refinement process behind a scale scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementProcess {
    pub rho: Vec<f64>,
    pub energies: Vec<f64>,
    pub total_energy: f64,
    pub depth: Option<usize>,
}

impl RefinementProcess {
    pub fn new(s: &ScaleScenario) -> Result<Self, BoundsError> {
        if s.rho.is_empty() {
            return Err(BoundsError::Rho("empty".into()));
        }
        if let Some(r) = s.rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(BoundsError::Rho(format!("{r} outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&s.tau) {
            return Err(BoundsError::Rho(format!("tau {} outside [0, 1]", s.tau)));
        }
        let energies: Vec<f64> = s.rho.iter().map(|r| ENERGY_CONSTANT * (1.0 - r)).collect();
        let depth = s
            .rho
            .iter()
            .position(|&r| match s.depth_comparison {
                DepthComparison::AtLeast => r >= s.tau,
                DepthComparison::AtMost => r <= s.tau,
            })
            .map(|i| i + 1);
        Ok(Self {
            rho: s.rho.clone(),
            total_energy: neumaier_sum(energies.iter().copied()),
            energies,
            depth,
        })
    }

    /// Indices (0-based) of the scales after `D`.
    fn pruned(&self) -> std::ops::Range<usize> {
        match self.depth {
            Some(d) => d..self.rho.len(),
            None => 0..0,
        }
    }

    /// `(1 - rho_D) F`, or 0 when nothing is truncated.
    pub fn bound(&self) -> f64 {
        match self.depth {
            Some(d) => (1.0 - self.rho[d - 1]) * self.total_energy,
            None => 0.0,
        }
    }

    /// `sum_{s > D} F_s`, the exact expectation under independence.
    pub fn expected_error(&self) -> f64 {
        neumaier_sum(self.pruned().map(|i| self.energies[i]))
    }

    /// Whether `rho_s` is non-increasing from `D` on.
    pub fn tail_non_increasing(&self) -> bool {
        match self.depth {
            Some(d) => self.rho[d - 1..].windows(2).all(|w| w[1] <= w[0]),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBoundResult {
    pub depth: Option<usize>,
    pub pruned_scales: Vec<usize>,
    pub energies: Vec<f64>,
    pub total_energy: f64,
    pub mean_error: f64,
    pub stderr: f64,
    /// `sum_{s > D} F_s`.
    pub expected_error: f64,
    /// `(1 - rho_D) F`.
    pub bound: f64,
    pub bound_satisfied: bool,
    pub tail_non_increasing: bool,
    pub mean_pair_cosine: Option<f64>,
    pub assumptions_satisfied: bool,
}

fn scale_trial(p: &RefinementProcess, dim: usize, correlation: f64, rng: &mut SeededRng) -> (f64, Option<f64>) {
    let pruned: Vec<f64> = p.pruned().map(|i| p.energies[i]).collect();
    if pruned.is_empty() {
        return (0.0, None);
    }
    let draws = correlated_draws(rng, &pruned, dim, correlation);
    (norm2(&sum_vectors(&draws, dim)), mean_pair_cosine(&draws))
}

pub fn simulate_scale_bound(
    scenario: &ScaleScenario,
    dim: usize,
    trials: usize,
    seed: u64,
    correlation: f64,
    slack: f64,
) -> Result<ScaleBoundResult, BoundsError> {
    check_common(dim, trials, correlation)?;
    let p = RefinementProcess::new(scenario)?;
    let samples = run_trials(trials, seed, |rng| scale_trial(&p, dim, correlation, rng));
    let errors: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (mean_error, stderr) = mean_and_stderr(&errors);
    let cosine = summarize_cosines(&samples);
    let bound = p.bound();
    Ok(ScaleBoundResult {
        depth: p.depth,
        pruned_scales: p.pruned().map(|i| i + 1).collect(),
        energies: p.energies.clone(),
        total_energy: p.total_energy,
        mean_error,
        stderr,
        expected_error: p.expected_error(),
        bound,
        bound_satisfied: mean_error <= slack * bound,
        tail_non_increasing: p.tail_non_increasing(),
        mean_pair_cosine: cosine,
        assumptions_satisfied: uncorrelated(cosine),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerResidualModel {
    pub scale: usize,
    /// `R^{(l, s)}` per layer.
    pub scores: Vec<f64>,
    /// Expected total output energy `G_s`.
    pub g_s: f64,
    pub pruned: Vec<usize>,
}

impl Default for LayerResidualModel {
    fn default() -> Self {
        Self {
            scale: 1,
            scores: vec![1.0, 1.0],
            g_s: 1.0,
            pruned: Vec::new(),
        }
    }
}

impl LayerResidualModel {
    pub fn validate(&self) -> Result<(), BoundsError> {
        if self.scores.is_empty() || self.scores.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(BoundsError::Layer("scores must be finite and nonnegative".into()));
        }
        if self.scores.iter().all(|&r| r == 0.0) {
            return Err(BoundsError::Layer("all scores are zero".into()));
        }
        if !(self.g_s.is_finite() && self.g_s >= 0.0) {
            return Err(BoundsError::Layer(format!("G_s = {} must be finite and nonnegative", self.g_s)));
        }
        check_index_set(&self.pruned, self.scores.len()).map_err(BoundsError::Layer)
    }

    pub fn score_sum(&self) -> f64 {
        neumaier_sum(self.scores.iter().copied())
    }

    /// `gamma_s`: pruned share of the total layer score.
    pub fn gamma(&self) -> f64 {
        neumaier_sum(self.pruned.iter().map(|&l| self.scores[l])) / self.score_sum()
    }

    pub fn energies(&self) -> Vec<f64> {
        let z = self.score_sum();
        self.scores.iter().map(|r| r / z * self.g_s).collect()
    }
}

fn check_index_set(set: &[usize], len: usize) -> Result<(), String> {
    let mut seen = vec![false; len];
    for &i in set {
        if i >= len {
            return Err(format!("index {i} out of range for {len} entries"));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(format!("index {i} listed twice"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBoundResult {
    pub scale: usize,
    pub gamma: f64,
    pub mean_error: f64,
    pub stderr: f64,
    /// `gamma_s G_s`.
    pub prediction: f64,
    /// `mean_error / prediction`; `None` when the prediction is 0.
    pub ratio: Option<f64>,
    pub within_tolerance: bool,
    pub mean_pair_cosine: Option<f64>,
    pub assumptions_satisfied: bool,
}

fn within(measured: f64, predicted: f64, tol: f64) -> (Option<f64>, bool) {
    if predicted == 0.0 {
        (None, measured == 0.0)
    } else {
        let r = measured / predicted;
        (Some(r), (r - 1.0).abs() <= tol)
    }
}

fn layer_trial(model: &LayerResidualModel, energies: &[f64], dim: usize, correlation: f64, rng: &mut SeededRng) -> (f64, Option<f64>) {
    if model.pruned.is_empty() {
        return (0.0, None);
    }
    // Draw every layer so the stream does not depend on which layers are pruned.
    let draws = correlated_draws(rng, energies, dim, correlation);
    let pruned: Vec<Vec<f64>> = model.pruned.iter().map(|&l| draws[l].clone()).collect();
    (norm2(&sum_vectors(&pruned, dim)), mean_pair_cosine(&pruned))
}

pub fn simulate_layer_bound(
    model: &LayerResidualModel,
    dim: usize,
    trials: usize,
    seed: u64,
    correlation: f64,
    tolerance: f64,
) -> Result<LayerBoundResult, BoundsError> {
    check_common(dim, trials, correlation)?;
    model.validate()?;
    let energies = model.energies();
    let samples = run_trials(trials, seed, |rng| layer_trial(model, &energies, dim, correlation, rng));
    let errors: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (mean_error, stderr) = mean_and_stderr(&errors);
    let gamma = model.gamma();
    let prediction = gamma * model.g_s;
    let (ratio, ok) = within(mean_error, prediction, tolerance);
    let cosine = summarize_cosines(&samples);
    Ok(LayerBoundResult {
        scale: model.scale,
        gamma,
        mean_error,
        stderr,
        prediction,
        ratio,
        within_tolerance: ok,
        mean_pair_cosine: cosine,
        assumptions_satisfied: uncorrelated(cosine),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenImportanceModel {
    /// Normalized importances `w_i`, summing to 1.
    pub weights: Vec<f64>,
    /// Total token energy `H`.
    pub total_energy: f64,
    pub pruned: Vec<usize>,
}

impl Default for TokenImportanceModel {
    fn default() -> Self {
        Self {
            weights: vec![1.0],
            total_energy: 1.0,
            pruned: Vec::new(),
        }
    }
}

impl TokenImportanceModel {
    pub fn validate(&self) -> Result<(), BoundsError> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(BoundsError::Token("weights must be finite and nonnegative".into()));
        }
        let sum = neumaier_sum(self.weights.iter().copied());
        if (sum - 1.0).abs() > 1e-9 {
            return Err(BoundsError::Token(format!("weights sum to {sum}, not 1")));
        }
        if !(self.total_energy.is_finite() && self.total_energy >= 0.0) {
            return Err(BoundsError::Token("H must be finite and nonnegative".into()));
        }
        check_index_set(&self.pruned, self.weights.len()).map_err(BoundsError::Token)
    }

    pub fn gamma(&self) -> f64 {
        neumaier_sum(self.pruned.iter().map(|&i| self.weights[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBoundResult {
    pub gamma: f64,
    pub mean_error: f64,
    pub stderr: f64,
    /// `gamma H`.
    pub bound: f64,
    pub ratio: Option<f64>,
    pub within_tolerance: bool,
    pub bound_satisfied: bool,
}

fn token_trial(model: &TokenImportanceModel, dim: usize, rng: &mut SeededRng) -> f64 {
    let mut is_pruned = vec![false; model.weights.len()];
    model.pruned.iter().for_each(|&i| is_pruned[i] = true);
    let mut parts = Vec::with_capacity(model.pruned.len());
    for (i, w) in model.weights.iter().enumerate() {
        let t = gaussian_vec(rng, dim, (w * model.total_energy / dim as f64).sqrt());
        if is_pruned[i] {
            parts.push(norm2(&t));
        }
    }
    neumaier_sum(parts)
}

pub fn simulate_token_bound(
    model: &TokenImportanceModel,
    dim: usize,
    trials: usize,
    seed: u64,
    tolerance: f64,
    slack: f64,
) -> Result<TokenBoundResult, BoundsError> {
    check_common(dim, trials, 0.0)?;
    model.validate()?;
    let samples = run_trials(trials, seed, |rng| (token_trial(model, dim, rng), None));
    let errors: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (mean_error, stderr) = mean_and_stderr(&errors);
    let gamma = model.gamma();
    let bound = gamma * model.total_energy;
    let (ratio, ok) = within(mean_error, bound, tolerance);
    Ok(TokenBoundResult {
        gamma,
        mean_error,
        stderr,
        bound,
        ratio,
        within_tolerance: ok,
        bound_satisfied: mean_error <= slack * bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsScenario {
    pub name: String,
    pub scale: ScaleScenario,
    pub layers: Vec<LayerResidualModel>,
    pub token: TokenImportanceModel,
    pub dim: usize,
    pub trials: usize,
    pub seed: u64,
    pub correlation: f64,
    pub slack: f64,
    pub tolerance: f64,
}

impl Default for BoundsScenario {
    fn default() -> Self {
        let raw = [0.9, 0.7, 0.5, 1.2, 0.3, 0.8, 0.6, 1.0];
        let total: f64 = raw.iter().sum();
        Self {
            name: "default".into(),
            scale: ScaleScenario::default(),
            layers: vec![
                LayerResidualModel {
                    scale: 3,
                    scores: vec![0.02, 0.85, 0.6, 0.01],
                    g_s: 2.0,
                    pruned: vec![1, 2],
                },
                LayerResidualModel {
                    scale: 4,
                    scores: vec![0.01, 0.9, 0.75, 0.03],
                    g_s: 3.0,
                    pruned: vec![1],
                },
            ],
            token: TokenImportanceModel {
                weights: raw.iter().map(|w| w / total).collect(),
                total_energy: 4.0,
                pruned: vec![3, 7],
            },
            dim: 64,
            trials: 2000,
            seed: 11,
            correlation: 0.0,
            slack: DEFAULT_SLACK,
            tolerance: DEFAULT_PREDICTION_TOLERANCE,
        }
    }
}

impl BoundsScenario {
    /// Every gate closed: no truncation, no pruned layers or tokens.
    pub fn closed() -> Self {
        let d = Self::default();
        Self {
            name: "closed".into(),
            scale: ScaleScenario {
                rho: vec![0.0; 4],
                ..d.scale
            },
            layers: d
                .layers
                .into_iter()
                .map(|l| LayerResidualModel { pruned: Vec::new(), ..l })
                .collect(),
            token: TokenImportanceModel {
                pruned: Vec::new(),
                ..d.token
            },
            ..Self::default()
        }
    }

    /// Strongly correlated increments over a flat tail; breaks the scale bound.
    pub fn correlated() -> Self {
        Self {
            name: "correlated".into(),
            scale: ScaleScenario {
                rho: vec![0.1, 0.3, 0.45, 0.5, 0.5, 0.5, 0.5, 0.5],
                tau: 0.4,
                depth_comparison: DepthComparison::AtLeast,
            },
            correlation: 0.9,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "closed" => Some(Self::closed()),
            "correlated" => Some(Self::correlated()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), BoundsError> {
        check_common(self.dim, self.trials, self.correlation)?;
        RefinementProcess::new(&self.scale)?;
        for l in &self.layers {
            l.validate()?;
        }
        self.token.validate()?;
        if !(self.slack >= 1.0 && self.slack.is_finite()) {
            return Err(BoundsError::Scenario(format!("slack {} must be >= 1", self.slack)));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(BoundsError::Scenario("tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalBoundReport {
    pub format: String,
    pub version: u32,
    pub scenario: BoundsScenario,
    pub energy_constant: f64,
    pub scale: ScaleBoundResult,
    pub layers: Vec<LayerBoundResult>,
    pub token: TokenBoundResult,
    pub measured_total: f64,
    pub measured_total_stderr: f64,
    /// `(1 - rho_D) F + sum_s gamma_s G_s + gamma H`.
    pub bound_total: f64,
    pub bound_satisfied: bool,
    pub assumptions_satisfied: bool,
}

/// Runs all three stages on one shared stream of trials and sums their errors per trial.
pub fn simulate_total_bound(scenario: &BoundsScenario) -> Result<TotalBoundReport, BoundsError> {
    scenario.validate()?;
    let sc = scenario;
    let process = RefinementProcess::new(&sc.scale)?;
    let layer_energies: Vec<Vec<f64>> = sc.layers.iter().map(LayerResidualModel::energies).collect();

    // Stage k of trial t draws from derive_seed(derive_seed(seed, t), k).
    let per_trial: Vec<(f64, Vec<f64>, f64, Option<f64>, Vec<Option<f64>>)> = (0..sc.trials)
        .into_par_iter()
        .map(|t| {
            let trial_seed = derive_seed(sc.seed, t as u64);
            let mut rng = SeededRng::new(derive_seed(trial_seed, 0));
            let (e_scale, c_scale) = scale_trial(&process, sc.dim, sc.correlation, &mut rng);
            let mut e_layers = Vec::with_capacity(sc.layers.len());
            let mut c_layers = Vec::with_capacity(sc.layers.len());
            for (k, (m, en)) in sc.layers.iter().zip(&layer_energies).enumerate() {
                let mut rng = SeededRng::new(derive_seed(trial_seed, 1 + k as u64));
                let (e, c) = layer_trial(m, en, sc.dim, sc.correlation, &mut rng);
                e_layers.push(e);
                c_layers.push(c);
            }
            let mut rng = SeededRng::new(derive_seed(trial_seed, 1 + sc.layers.len() as u64));
            let e_token = token_trial(&sc.token, sc.dim, &mut rng);
            (e_scale, e_layers, e_token, c_scale, c_layers)
        })
        .collect();

    let scale_errors: Vec<f64> = per_trial.iter().map(|t| t.0).collect();
    let (scale_mean, scale_se) = mean_and_stderr(&scale_errors);
    let scale_cos: Vec<(f64, Option<f64>)> = per_trial.iter().map(|t| (t.0, t.3)).collect();
    let scale_cosine = summarize_cosines(&scale_cos);
    let scale_bound = process.bound();
    let scale = ScaleBoundResult {
        depth: process.depth,
        pruned_scales: process.pruned().map(|i| i + 1).collect(),
        energies: process.energies.clone(),
        total_energy: process.total_energy,
        mean_error: scale_mean,
        stderr: scale_se,
        expected_error: process.expected_error(),
        bound: scale_bound,
        bound_satisfied: scale_mean <= sc.slack * scale_bound,
        tail_non_increasing: process.tail_non_increasing(),
        mean_pair_cosine: scale_cosine,
        assumptions_satisfied: uncorrelated(scale_cosine),
    };

    let mut layers = Vec::with_capacity(sc.layers.len());
    for (k, m) in sc.layers.iter().enumerate() {
        let errs: Vec<f64> = per_trial.iter().map(|t| t.1[k]).collect();
        let cos: Vec<(f64, Option<f64>)> = per_trial.iter().map(|t| (t.1[k], t.4[k])).collect();
        let (mean, se) = mean_and_stderr(&errs);
        let gamma = m.gamma();
        let prediction = gamma * m.g_s;
        let (ratio, ok) = within(mean, prediction, sc.tolerance);
        let cosine = summarize_cosines(&cos);
        layers.push(LayerBoundResult {
            scale: m.scale,
            gamma,
            mean_error: mean,
            stderr: se,
            prediction,
            ratio,
            within_tolerance: ok,
            mean_pair_cosine: cosine,
            assumptions_satisfied: uncorrelated(cosine),
        });
    }

    let token_errors: Vec<f64> = per_trial.iter().map(|t| t.2).collect();
    let (token_mean, token_se) = mean_and_stderr(&token_errors);
    let gamma = sc.token.gamma();
    let token_bound = gamma * sc.token.total_energy;
    let (ratio, ok) = within(token_mean, token_bound, sc.tolerance);
    let token = TokenBoundResult {
        gamma,
        mean_error: token_mean,
        stderr: token_se,
        bound: token_bound,
        ratio,
        within_tolerance: ok,
        bound_satisfied: token_mean <= sc.slack * token_bound,
    };

    let totals: Vec<f64> = per_trial
        .iter()
        .map(|t| neumaier_sum([t.0, neumaier_sum(t.1.iter().copied()), t.2]))
        .collect();
    let (measured_total, measured_total_stderr) = mean_and_stderr(&totals);
    let bound_total = neumaier_sum(
        [scale_bound, token_bound]
            .into_iter()
            .chain(layers.iter().map(|l| l.prediction)),
    );
    let assumptions_satisfied = scale.assumptions_satisfied && layers.iter().all(|l| l.assumptions_satisfied);
    Ok(TotalBoundReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        scenario: sc.clone(),
        energy_constant: ENERGY_CONSTANT,
        scale,
        layers,
        token,
        measured_total,
        measured_total_stderr,
        bound_total,
        bound_satisfied: measured_total <= sc.slack * bound_total,
        assumptions_satisfied,
    })
}
