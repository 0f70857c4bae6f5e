//! Shared domain types: worker profiles, allocation state, per-epoch timings,
//! gradient buffers and the experiment configuration.
//!
//! Virtual time is kept as integer nanoseconds throughout so that timing
//! identities like `T = t_s + t_w + t_c` hold exactly, with no float drift.

use serde::{Deserialize, Serialize};

/// Virtual duration in integer nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_SEC: f64 = 1_000_000_000.0;

/// Convert a virtual duration to floating-point seconds.
pub fn to_secs(ns: Nanos) -> f64 {
    ns as f64 / NANOS_PER_SEC
}

/// A simulated worker: identity plus its compute cost model.
///
/// The implied calculation speed is `1 / per_sample_cost` samples per second
/// when `jitter_sigma` is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    /// Ring rank, unique within a cluster, in `[0, n)`.
    pub rank: usize,
    /// Virtual nanoseconds spent per sample gradient.
    pub per_sample_cost_ns: Nanos,
    /// Multiplicative lognormal noise scale; 0 = deterministic.
    #[serde(default)]
    pub jitter_sigma: f64,
}

/// Per-worker integer sample counts `w_i` with a constant total `C`,
/// plus the rebalance history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationState {
    /// Samples per worker per gradient aggregation.
    pub weights: Vec<u64>,
    /// Constant total `C = Σ w_i`.
    pub total: u64,
    /// Rebalance round counter.
    pub epoch: u64,
    /// Weight vectors from prior epochs, oldest first, including the current one.
    pub history: Vec<Vec<u64>>,
}

impl AllocationState {
    /// Build an initial allocation. Panics if the weights are empty or
    /// contain a zero; use `validate` on the config for user-facing checks.
    pub fn new(weights: Vec<u64>) -> Self {
        assert!(!weights.is_empty());
        assert!(weights.iter().all(|&w| w >= 1));
        let total = weights.iter().sum();
        AllocationState {
            history: vec![weights.clone()],
            weights,
            total,
            epoch: 1,
        }
    }

    pub fn n(&self) -> usize {
        self.weights.len()
    }
}

/// Measured timings for one epoch. All vectors are indexed by rank.
///
/// By construction `total[i] = t_s[i] + t_w[i] + t_c` exactly, the aggregation
/// time `t_c` is shared by every rank, and `min_i t_w[i] == 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    /// Gradient computing time per worker.
    pub t_s: Vec<Nanos>,
    /// Synchronization waiting time per worker.
    pub t_w: Vec<Nanos>,
    /// Gradient aggregation time, identical for all workers.
    pub t_c: Nanos,
    /// Total time per worker.
    pub total: Vec<Nanos>,
}

/// A flat vector of model-parameter gradients: the unit exchanged by allreduce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBuffer {
    pub values: Vec<f64>,
    /// Number of samples accumulated into `values`.
    pub sample_count: u64,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        GradientBuffer {
            values: vec![0.0; len],
            sample_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Element-wise add of another buffer, accumulating its sample count.
    pub fn add(&mut self, other: &GradientBuffer) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        self.sample_count += other.sample_count;
    }
}

/// Which model the trainer builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Scalar output, squared error.
    LinearRegression,
    /// Multinomial logistic regression, cross-entropy.
    Softmax,
    /// One tanh hidden layer, cross-entropy.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden width; only used by `Mlp`.
    #[serde(default)]
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Gaussian class clusters with configurable separation, balanced labels.
    Synthetic {
        seed: u64,
        size: usize,
        separation: f64,
    },
    /// CSV with a header row; label in the last column.
    Csv { path: String },
}

/// Allocation mode for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Every worker gets `C / n` samples per aggregation.
    Equal,
    /// Fixed hand-chosen weights.
    Static { weights: Vec<u64> },
    /// Rebalance each epoch from measured gradient-computation times.
    Adaptive,
}

/// Link cost model: per-message latency plus bandwidth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub latency_ns: Nanos,
    pub bandwidth_bytes_per_sec: f64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec {
            latency_ns: 10_000,
            bandwidth_bytes_per_sec: 1e9,
        }
    }
}

/// Stability detection parameters for the adaptive mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySpec {
    /// Number of trailing weight vectors that must agree.
    pub window: usize,
    /// Maximum per-component difference still considered stable.
    pub tolerance: u64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        StabilitySpec {
            window: 2,
            tolerance: 1,
        }
    }
}

/// Full description of one experiment; serializes to/from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub workers: Vec<WorkerProfile>,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub mode: RunMode,
    pub minibatch: u64,
    /// The constant `C`: samples across all workers per gradient aggregation.
    pub samples_per_aggregation: u64,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: u64,
    #[serde(default)]
    pub link: LinkSpec,
    #[serde(default)]
    pub stability: StabilitySpec,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn n(&self) -> usize {
        self.workers.len()
    }
}

/// Check every config invariant. Returns an empty list iff the config is
/// runnable; callers decide what to do with violations.
pub fn validate(config: &ExperimentConfig) -> Vec<String> {
    let mut violations = Vec::new();
    let n = config.workers.len();
    if n < 2 {
        violations.push("ring requires n >= 2".to_string());
    }
    let mut seen = std::collections::HashSet::new();
    for w in &config.workers {
        if w.per_sample_cost_ns == 0 {
            violations.push(format!("worker {}: per_sample_cost must be positive", w.rank));
        }
        if w.jitter_sigma < 0.0 {
            violations.push(format!("worker {}: jitter_sigma must be nonnegative", w.rank));
        }
        if !seen.insert(w.rank) {
            violations.push(format!("duplicate worker rank {}", w.rank));
        }
        if w.rank >= n {
            violations.push(format!("worker rank {} out of range [0, {})", w.rank, n));
        }
    }
    if config.learning_rate <= 0.0 {
        violations.push("learning_rate must be positive".to_string());
    }
    if config.weight_decay < 0.0 {
        violations.push("weight_decay must be nonnegative".to_string());
    }
    let c = config.samples_per_aggregation;
    if c < n as u64 {
        violations.push(format!(
            "samples_per_aggregation ({c}) must be at least one per worker ({n})"
        ));
    }
    if config.minibatch == 0 {
        violations.push("minibatch must be at least 1".to_string());
    }
    if config.epochs == 0 {
        violations.push("epochs must be at least 1".to_string());
    }
    if let RunMode::Static { weights } = &config.mode {
        if weights.len() != n {
            violations.push(format!(
                "static weights length {} != worker count {}",
                weights.len(),
                n
            ));
        }
        if weights.iter().any(|&w| w == 0) {
            violations.push("static weights must all be at least 1".to_string());
        }
        if weights.iter().sum::<u64>() != c {
            violations.push(format!(
                "static weights must sum to samples_per_aggregation ({c})"
            ));
        }
    }
    if let DatasetSpec::Synthetic { size, .. } = &config.dataset {
        if (*size as u64) < c * config.minibatch {
            violations.push(format!(
                "dataset size {} smaller than one aggregation ({})",
                size,
                c * config.minibatch
            ));
        }
    }
    if config.link.bandwidth_bytes_per_sec <= 0.0 {
        violations.push("link bandwidth must be positive".to_string());
    }
    if config.stability.window < 2 {
        violations.push("stability window must be at least 2".to_string());
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            workers: vec![
                WorkerProfile { rank: 0, per_sample_cost_ns: 1_000_000, jitter_sigma: 0.0 },
                WorkerProfile { rank: 1, per_sample_cost_ns: 2_000_000, jitter_sigma: 0.0 },
            ],
            model: ModelSpec {
                kind: ModelKind::Softmax,
                input_dim: 4,
                output_dim: 2,
                hidden_dim: 0,
            },
            dataset: DatasetSpec::Synthetic { seed: 1, size: 1000, separation: 3.0 },
            mode: RunMode::Equal,
            minibatch: 1,
            samples_per_aggregation: 20,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            epochs: 5,
            link: LinkSpec::default(),
            stability: StabilitySpec::default(),
            seed: 7,
        }
    }

    #[test]
    fn valid_config_passes() {
        assert!(validate(&base_config()).is_empty());
    }

    #[test]
    fn single_worker_rejected() {
        let mut c = base_config();
        c.workers.truncate(1);
        let v = validate(&c);
        assert!(v.iter().any(|m| m.contains("n >= 2")), "{v:?}");
    }

    #[test]
    fn static_weights_must_sum_to_c() {
        let mut c = base_config();
        c.mode = RunMode::Static { weights: vec![7, 13] };
        assert!(validate(&c).is_empty());
        c.mode = RunMode::Static { weights: vec![7, 12] };
        assert!(!validate(&c).is_empty());
    }

    #[test]
    fn zero_learning_rate_rejected() {
        let mut c = base_config();
        c.learning_rate = 0.0;
        let v = validate(&c);
        assert!(v.iter().any(|m| m.contains("learning_rate")), "{v:?}");
    }

    #[test]
    fn config_roundtrips_through_json() {
        let c = base_config();
        let s = serde_json::to_string_pretty(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn allocation_state_tracks_total() {
        let s = AllocationState::new(vec![7, 13]);
        assert_eq!(s.total, 20);
        assert_eq!(s.history, vec![vec![7, 13]]);
    }
}
