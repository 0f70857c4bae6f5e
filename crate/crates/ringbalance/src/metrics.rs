//! Run artifacts: per-epoch reports, CSV/JSON emission and speedup summaries.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{EpochTiming, ExperimentConfig, Nanos};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("reports not comparable: {0}")]
    ConfigMismatch(String),
}

/// Everything measured in one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch index.
    pub epoch: u64,
    /// Weights in effect during this epoch.
    pub weights: Vec<u64>,
    pub timing: EpochTiming,
    /// Mean training loss over all samples consumed this epoch.
    pub loss: f64,
}

/// Full result of one experiment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochReport>,
    /// Every weight vector the allocator produced, oldest first.
    pub allocation_history: Vec<Vec<u64>>,
    /// Weights in effect at the end of the run.
    pub frozen_allocation: Vec<u64>,
    /// First epoch that ran with frozen weights, if stability was reached.
    pub frozen_at_epoch: Option<u64>,
    /// Sum of per-epoch totals (virtual nanoseconds).
    pub total_virtual_time_ns: Nanos,
    pub final_loss: f64,
    /// Final model parameters, for trajectory comparisons.
    pub final_params: Vec<f64>,
}

/// Per-epoch compute horizon: gradient computation plus barrier wait,
/// identical for every rank, excluding aggregation time.
pub fn epoch_compute_ns(report: &EpochReport) -> Nanos {
    report.timing.t_s[0] + report.timing.t_w[0]
}

/// Mean per-epoch total time over the post-stabilization epochs (all epochs
/// when the run never froze).
pub fn mean_epoch_total_ns(report: &ExperimentReport) -> f64 {
    let from = report.frozen_at_epoch.unwrap_or(1);
    let totals: Vec<u64> = report
        .epochs
        .iter()
        .filter(|e| e.epoch >= from)
        .map(|e| e.timing.total[0])
        .collect();
    totals.iter().sum::<u64>() as f64 / totals.len() as f64
}

/// Speedup of run `b` relative to baseline `a`: mean post-stabilization
/// per-epoch time of `a` divided by that of `b`. Greater than 1 means `b`
/// is faster.
pub fn speedup(a: &ExperimentReport, b: &ExperimentReport) -> Result<f64, MetricsError> {
    if a.config.model != b.config.model {
        return Err(MetricsError::ConfigMismatch("model differs".into()));
    }
    if a.config.dataset != b.config.dataset {
        return Err(MetricsError::ConfigMismatch("dataset differs".into()));
    }
    if a.config.samples_per_aggregation != b.config.samples_per_aggregation {
        return Err(MetricsError::ConfigMismatch(
            "samples_per_aggregation differs".into(),
        ));
    }
    if a.config.epochs != b.config.epochs {
        return Err(MetricsError::ConfigMismatch("epochs differ".into()));
    }
    Ok(mean_epoch_total_ns(a) / mean_epoch_total_ns(b))
}

/// One row per (epoch, worker):
/// `epoch,worker,w,t_s_ns,t_w_ns,t_c_ns,T_ns,loss`.
///
/// Durations are integer nanoseconds; loss uses Rust's shortest-roundtrip
/// float formatting, so every field parses back exactly.
pub fn write_csv(report: &ExperimentReport, path: &Path) -> Result<(), MetricsError> {
    let io_err = |source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    writeln!(out, "epoch,worker,w,t_s_ns,t_w_ns,t_c_ns,T_ns,loss").map_err(io_err)?;
    for e in &report.epochs {
        for rank in 0..e.weights.len() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                rank,
                e.weights[rank],
                e.timing.t_s[rank],
                e.timing.t_w[rank],
                e.timing.t_c,
                e.timing.total[rank],
                e.loss
            )
            .map_err(io_err)?;
        }
    }
    std::fs::write(path, out).map_err(io_err)
}

/// Mirror of the full report for programmatic consumers.
pub fn write_json(report: &ExperimentReport, path: &Path) -> Result<(), MetricsError> {
    let doc = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(path, doc).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
