//! Seeded, reproducible studies of Consensus Propagation dynamics.
//!
//! Each study takes an [`ExperimentConfig`] and returns an
//! [`ExperimentRecord`]; [`run_experiment`] dispatches on the kind. Ensemble
//! members run on a rayon pool of `jobs` threads, are collected in member
//! order and reduced sequentially, so records do not depend on `jobs`.

mod ab_table;
mod config;
mod dynamic_data;
mod dynamic_network;
mod ensembles;
mod init;
mod record;

use std::time::Instant;

use rayon::prelude::*;

pub use ab_table::run_ab_eigen_table;
pub use config::{
    CouplingSchedule, DataSchedule, DegreeMeasure, EigenMethod, ExperimentConfig, ExperimentKind,
    Seeds, TABLE_PAIRS,
};
pub use dynamic_data::run_dynamic_data;
pub use dynamic_network::run_dynamic_network;
pub use ensembles::{run_degree_study, run_scaling_study};
pub use init::run_init_comparison;
pub use record::{ExperimentRecord, Stats, Table};

use crate::cp::{converge_topology, FixedPoint};
use crate::error::{Error, Result};
use crate::graph::{
    assign_couplings, generate_connected_erdos_renyi, generate_erdos_renyi, Graph, NodeValues,
};
use crate::linearize::AffineAveraging;
use crate::spectral::{
    convergence_ratio, Block, ConvergenceRatio, KernelOperator, PowerOptions, TransientPolicy,
};

/// Runs the study named by `cfg.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    match cfg.kind {
        ExperimentKind::DynData => run_dynamic_data(cfg),
        ExperimentKind::DynNetwork => run_dynamic_network(cfg),
        ExperimentKind::InitCompare => run_init_comparison(cfg),
        ExperimentKind::Scaling => run_scaling_study(cfg),
        ExperimentKind::Degree => run_degree_study(cfg),
        ExperimentKind::AbTable => run_ab_eigen_table(cfg),
    }
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "expected a `{kind}` config, got `{}`",
            cfg.kind
        )));
    }
    cfg.validate()
}

fn new_record(cfg: &ExperimentConfig) -> (ExperimentRecord, Instant) {
    let record = ExperimentRecord::new(cfg.kind, cfg.to_kv().entries().clone());
    (record, Instant::now())
}

fn finish(mut record: ExperimentRecord, started: Instant) -> ExperimentRecord {
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record
}

/// One sampled problem: graph with couplings and `beta`, plus node values.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: Graph,
    pub values: NodeValues,
    /// Realized mean degree `2|E| / n`.
    pub mean_degree: f64,
    /// Graph draws needed to satisfy the connectivity requirement.
    pub attempts: usize,
}

/// Samples `G(n, c/n)`, couplings `U[q_min, q_max)` and values
/// `U[y_min, y_max)` from the given seeds.
pub fn build_instance(cfg: &ExperimentConfig, n: usize, c: f64, seeds: &Seeds) -> Result<Instance> {
    let sample = if cfg.require_connected {
        generate_connected_erdos_renyi(n, c, seeds.graph, cfg.max_attempts)?
    } else {
        generate_erdos_renyi(n, c, seeds.graph)?
    };
    let graph = assign_couplings(&sample.graph, cfg.q_min, cfg.q_max, seeds.couplings)?
        .with_beta(cfg.beta)?;
    let values = NodeValues::random(n, cfg.y_min, cfg.y_max, seeds.values)?;
    Ok(Instance {
        graph,
        values,
        mean_degree: sample.mean_degree,
        attempts: sample.attempts,
    })
}

/// Maps `f` over member indices `0..count` on `jobs` threads (0: one per
/// core) and returns the results in member order.
pub fn map_members<T, F>(jobs: usize, count: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs == 1 || count <= 1 {
        return (0..count).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}

/// Topology messages converged to `cfg.reference_tol`.
fn converged_topology(g: &Graph, cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let tfp = converge_topology(g, cfg.reference_tol, cfg.max_iter)?;
    if !tfp.converged {
        return Err(Error::NotConverged {
            residual: tfp.residual,
            iterations: tfp.iterations,
        });
    }
    Ok(tfp.k)
}

fn require_converged(fp: FixedPoint) -> Result<FixedPoint> {
    if fp.converged {
        Ok(fp)
    } else {
        Err(Error::NotConverged {
            residual: fp.residual,
            iterations: fp.iterations,
        })
    }
}

/// Dominant eigenvalue modulus of block `A` or `B` by matrix-free power
/// iteration.
fn kernel_lambda(g: &Graph, k: &[f64], block: Block, cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    let op = KernelOperator::new(g, k, block)?;
    let opts = PowerOptions {
        tol: cfg.power_tol,
        ..PowerOptions::default()
    };
    let res = op.power_iteration(opts, seed)?;
    if !res.converged {
        return Err(Error::NotConverged {
            residual: res.residual,
            iterations: res.iterations,
        });
    }
    Ok(res.modulus())
}

/// Tail policy for histories whose noise floor is set by rounding in the
/// iterates (absolute change of `O(eps |x|)`), not by the error scale.
pub const ROUNDOFF_TAIL: TransientPolicy = TransientPolicy {
    stable_run: 20,
    stable_spread: 0.01,
    min_window: 100,
    max_window: None,
    floor_factor: 1e6,
};

/// Measured contraction ratio of `mu <- b + A mu` started from `mu = 0`,
/// estimated from successive-change norms `|mu^{n+1} - mu^n|_2`.
pub fn affine_ratio(
    g: &Graph,
    k: &[f64],
    y: &NodeValues,
    max_steps: usize,
    policy: TransientPolicy,
) -> Result<ConvergenceRatio> {
    let aff = AffineAveraging::from_topology(g, k, y)?;
    let dim = aff.offset.len();
    let mut mu = vec![0.0; dim];
    let mut next = vec![0.0; dim];
    let mut changes = Vec::new();
    let mut floor = 0.0;
    for _ in 0..max_steps {
        aff.apply_into(&mu, &mut next);
        let d = norm2_diff(&next, &mu);
        if changes.is_empty() {
            floor = policy.floor_factor * f64::EPSILON * d;
        }
        changes.push(d);
        std::mem::swap(&mut mu, &mut next);
        if d <= floor {
            break;
        }
    }
    convergence_ratio(&changes, policy)
}

fn norm2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Label fragment for a real parameter, e.g. `0.9` -> `0.9`, `8` -> `8`.
fn label(v: f64) -> String {
    format!("{v}")
}
