//! Orchestrates the full adaptive-allocation loop over simulated
//! heterogeneous workers: virtual-clock compute timing, the synchronization
//! barrier, the allreduce cost model, per-epoch rebalancing and run-level
//! reporting.
//!
//! Simulation is single-process and deterministic: compute and link times
//! come from analytic cost models in integer nanoseconds, so the timing
//! identities hold exactly and a (config, seed) pair fully determines the
//! report.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use thiserror::Error;

use crate::allocator::{self, AllocError};
use crate::collective::{allgather_scalar_all, ring_allreduce_all, CollectiveError};
use crate::domain::{
    validate, AllocationState, EpochTiming, ExperimentConfig, GradientBuffer, Nanos, RunMode,
    WorkerProfile, NANOS_PER_SEC,
};
use crate::metrics::{EpochReport, ExperimentReport};
use crate::trainer::{
    accumulate_with_loss, build_dataset, param_count, partition, sgd_step, Dataset, Model,
    Partition, TrainerError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid config: {0:?}")]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("partition does not match allocation: {0}")]
    InconsistentPartition(String),
}

/// Link cost parameters for the aggregation phase.
#[derive(Clone, Copy, Debug)]
pub struct CostModel {
    pub latency_ns: Nanos,
    pub bandwidth_bytes_per_sec: f64,
}

/// Virtual time for one worker to compute `samples` gradients:
/// `samples · per_sample_cost`, scaled by lognormal noise when the profile
/// has jitter.
pub fn compute_time<R: rand::Rng>(profile: &WorkerProfile, samples: u64, rng: &mut R) -> Nanos {
    let base = samples * profile.per_sample_cost_ns;
    if profile.jitter_sigma > 0.0 {
        let noise = LogNormal::new(0.0, profile.jitter_sigma)
            .expect("valid sigma")
            .sample(rng);
        (base as f64 * noise).round() as Nanos
    } else {
        base
    }
}

/// Barrier waits: `t_w_i = max_j t_s_j − t_s_i`. The slowest worker waits
/// zero.
pub fn waiting_times(t_s: &[Nanos]) -> Vec<Nanos> {
    let max = t_s.iter().copied().max().unwrap_or(0);
    t_s.iter().map(|&t| max - t).collect()
}

/// Ring allreduce duration under the latency/bandwidth model:
/// `2(n−1) · (α + (payload/n)/β)`, identical for every rank.
pub fn allreduce_time(n: usize, payload_bytes: u64, cm: &CostModel) -> Nanos {
    assert!(n >= 2);
    let per_step = cm.latency_ns as f64
        + (payload_bytes as f64 / n as f64) / cm.bandwidth_bytes_per_sec * NANOS_PER_SEC;
    (2.0 * (n as f64 - 1.0) * per_step).round() as Nanos
}

/// Static inputs for one epoch.
pub struct EpochSetup<'a> {
    pub workers: &'a [WorkerProfile],
    pub weights: &'a [u64],
    pub partition: &'a Partition,
    pub minibatch: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub cost: CostModel,
}

/// Run one epoch: `⌊D / (C·minibatch)⌋` gradient aggregations. Each worker
/// accumulates its share of every aggregation block, the barrier sets the
/// waits, the ring allreduce sums the buffers and one SGD step applies the
/// mean gradient.
///
/// Aggregation `j` consumes the global block `[j·C·mb, (j+1)·C·mb)`, with
/// worker `i` taking the sub-range after `Σ_{l<i} w_l` accumulation units.
/// The union of samples per aggregation therefore depends only on `C` and
/// the global order, never on how the weights split it, which is what makes
/// training trajectories allocation-invariant.
pub fn run_epoch(
    setup: &EpochSetup,
    dataset: &Dataset,
    model: &mut Model,
    epoch: u64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochReport, EngineError> {
    let n = setup.workers.len();
    let c: u64 = setup.weights.iter().sum();
    let mb = setup.minibatch;
    if setup.partition.ranges.len() != n {
        return Err(EngineError::InconsistentPartition(format!(
            "{} ranges for {} workers",
            setup.partition.ranges.len(),
            n
        )));
    }
    if setup.partition.ranges.last().map(|r| r.end) != Some(dataset.len()) {
        return Err(EngineError::InconsistentPartition(
            "ranges do not cover the dataset".to_string(),
        ));
    }

    let aggregations = dataset.len() as u64 / (c * mb);
    let payload_bytes = param_count(&model.spec) as u64 * 8;
    let t_c_agg = allreduce_time(n, payload_bytes, &setup.cost);

    let mut t_s_epoch = vec![0u64; n];
    let mut t_w_epoch = vec![0u64; n];
    let mut loss_sum = 0.0;

    for agg in 0..aggregations {
        let block = (agg * c * mb) as usize;
        let mut locals: Vec<GradientBuffer> = Vec::with_capacity(n);
        let mut t_s_agg = vec![0u64; n];
        let mut prefix = 0u64;
        for (rank, worker) in setup.workers.iter().enumerate() {
            let w_i = setup.weights[rank];
            let start = block + (prefix * mb) as usize;
            let end = start + (w_i * mb) as usize;
            let (buf, loss) = accumulate_with_loss(model, &dataset.samples[start..end], mb, w_i)?;
            loss_sum += loss;
            locals.push(buf);
            t_s_agg[rank] = compute_time(worker, w_i * mb, rng);
            prefix += w_i;
        }
        let t_w_agg = waiting_times(&t_s_agg);
        for rank in 0..n {
            t_s_epoch[rank] += t_s_agg[rank];
            t_w_epoch[rank] += t_w_agg[rank];
        }
        let (results, _) = ring_allreduce_all(&locals)?;
        sgd_step(model, &results[0], setup.learning_rate, setup.weight_decay)?;
    }

    let t_c_epoch = t_c_agg * aggregations;
    let total: Vec<Nanos> = t_s_epoch
        .iter()
        .zip(&t_w_epoch)
        .map(|(&s, &w)| s + w + t_c_epoch)
        .collect();
    Ok(EpochReport {
        epoch,
        weights: setup.weights.to_vec(),
        timing: EpochTiming {
            t_s: t_s_epoch,
            t_w: t_w_epoch,
            t_c: t_c_epoch,
            total,
        },
        loss: loss_sum / (aggregations * c * mb) as f64,
    })
}

fn initial_weights(config: &ExperimentConfig) -> Result<Vec<u64>, EngineError> {
    let n = config.n();
    let c = config.samples_per_aggregation;
    match &config.mode {
        RunMode::Static { weights } => Ok(weights.clone()),
        RunMode::Equal | RunMode::Adaptive => {
            let share = c as f64 / n as f64;
            Ok(allocator::apportion(&vec![share; n], c, 1)?)
        }
    }
}

/// Run the whole experiment. In adaptive mode, every epoch's measured
/// computing times are exchanged over the ring and fed to the allocator
/// until the weights stop fluctuating; after that the allocation is frozen
/// and the run behaves statically.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, EngineError> {
    let violations = validate(config);
    if !violations.is_empty() {
        return Err(EngineError::InvalidConfig(violations));
    }
    let dataset = build_dataset(&config.dataset, &config.model)?;
    let mut model_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::init(config.model.clone(), &mut model_rng);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(config.seed);
    jitter_rng.set_stream(1);

    let mut state = AllocationState::new(initial_weights(config)?);
    let mut part = partition(dataset.len(), &state.weights)?;
    let cost = CostModel {
        latency_ns: config.link.latency_ns,
        bandwidth_bytes_per_sec: config.link.bandwidth_bytes_per_sec,
    };

    let mut reports: Vec<EpochReport> = Vec::with_capacity(config.epochs as usize);
    let mut frozen_at: Option<u64> = None;

    for epoch in 1..=config.epochs {
        let setup = EpochSetup {
            workers: &config.workers,
            weights: &state.weights,
            partition: &part,
            minibatch: config.minibatch,
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            cost,
        };
        let report = run_epoch(&setup, &dataset, &mut model, epoch, &mut jitter_rng)?;
        log::debug!(
            "epoch {epoch}: w={:?} t_s={:?} loss={}",
            report.weights,
            report.timing.t_s,
            report.loss
        );

        let rebalance = config.mode == RunMode::Adaptive && frozen_at.is_none();
        if rebalance {
            // Algorithm step 1: each rank broadcasts its measured computing
            // time so everyone derives the same new ratio.
            let views = allgather_scalar_all(
                &report.timing.t_s.iter().map(|&t| t as f64).collect::<Vec<_>>(),
            )?;
            let t_s: Vec<Nanos> = views[0].iter().map(|&t| t as Nanos).collect();
            debug_assert!(views.iter().all(|v| v == &views[0]));

            state = allocator::update_allocation(&state, &t_s, 1)?;
            if allocator::is_stable(
                &state.history,
                config.stability.window,
                config.stability.tolerance,
            ) {
                frozen_at = Some(epoch + 1);
                log::info!("allocation frozen at {:?} from epoch {}", state.weights, epoch + 1);
            }
            part = partition(dataset.len(), &state.weights)?;
        }
        reports.push(report);
    }

    let total_virtual_time_ns = reports.iter().map(|r| r.timing.total[0]).sum();
    let final_loss = reports.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(ExperimentReport {
        config: config.clone(),
        epochs: reports,
        allocation_history: state.history,
        frozen_allocation: state.weights,
        frozen_at_epoch: frozen_at,
        total_virtual_time_ns,
        final_loss,
        final_params: model.params,
    })
}
