//! Leading eigenvalues of the averaging and topology kernels, side by side
//! with the measured contraction ratio of the affine averaging iteration.

use super::{
    affine_ratio, build_instance, converged_topology, expect_kind, finish, kernel_lambda,
    map_members, new_record, EigenMethod, ExperimentConfig, ExperimentKind, ExperimentRecord,
    Table, ROUNDOFF_TAIL,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linearize::{averaging_kernel, topology_kernel};
use crate::sparse::DENSE_BUDGET;
use crate::spectral::{dense_spectrum, Block};

/// The magnitude class the leading `A` eigenvalue is expected in.
pub const LAMBDA_A_RANGE: (f64, f64) = (0.995, 0.9999);
/// Upper bound claimed for the leading `B` eigenvalue and for `lambda_B / lambda_A`.
pub const LAMBDA_B_BOUND: f64 = 0.01;
/// Allowed `|q - lambda_max(A)|`.
pub const Q_AGREEMENT: f64 = 1e-3;

struct Row {
    mean_degree: f64,
    lambda_a: f64,
    lambda_b: f64,
    q: f64,
}

fn dense_lambda(g: &Graph, k: &[f64], block: Block) -> Result<f64> {
    let m = match block {
        Block::A => averaging_kernel(g, k),
        Block::B => topology_kernel(g, k),
    };
    Ok(dense_spectrum(&m.to_dense(DENSE_BUDGET)?)?.max_modulus())
}

/// For every `(n, c)` in `pairs` and `ensemble` fresh instances each:
/// `lambda_max(A)`, `lambda_max(B)` (dense or power, per `method`) and the
/// measured ratio `q` of `mu <- b + A mu`.
///
/// CSV `ab_table_eigen.csv`:
/// `n,c,member,c_exp,lambda_a,lambda_b,ratio,q,q_minus_lambda_a`.
pub fn run_ab_eigen_table(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::AbTable)?;
    if cfg.pairs.is_empty() {
        return Err(Error::Config("field `pairs`: need at least one `n:c` pair".into()));
    }
    let (mut record, started) = new_record(cfg);
    let mut table = Table::new(
        "eigen",
        &["n", "c", "member", "c_exp", "lambda_a", "lambda_b", "ratio", "q", "q_minus_lambda_a"],
    );
    let (mut a_ok, mut b_ok, mut ratio_ok, mut q_ok) = (true, true, true, true);
    let mut max_ratio: f64 = 0.0;
    let mut max_q_gap: f64 = 0.0;
    for (slot, &(n, c)) in cfg.pairs.iter().enumerate() {
        let seeds = cfg.seeds.group(slot);
        let rows = map_members(cfg.jobs, cfg.ensemble, |m| {
            let s = seeds.member(m);
            let inst = build_instance(cfg, n, c, &s)?;
            let g = &inst.graph;
            let k = converged_topology(g, cfg)?;
            let (lambda_a, lambda_b) = match cfg.method {
                EigenMethod::Power => (
                    kernel_lambda(g, &k, Block::A, cfg, s.perturbation)?,
                    kernel_lambda(g, &k, Block::B, cfg, s.perturbation)?,
                ),
                EigenMethod::Dense => (dense_lambda(g, &k, Block::A)?, dense_lambda(g, &k, Block::B)?),
            };
            let q = affine_ratio(g, &k, &inst.values, cfg.max_iter, ROUNDOFF_TAIL)?.q;
            Ok(Row {
                mean_degree: inst.mean_degree,
                lambda_a,
                lambda_b,
                q,
            })
        })?;
        for (m, r) in rows.iter().enumerate() {
            let ratio = r.lambda_b / r.lambda_a;
            a_ok &= (LAMBDA_A_RANGE.0..=LAMBDA_A_RANGE.1).contains(&r.lambda_a);
            b_ok &= r.lambda_b < LAMBDA_B_BOUND;
            ratio_ok &= ratio < LAMBDA_B_BOUND;
            q_ok &= (r.q - r.lambda_a).abs() <= Q_AGREEMENT;
            max_ratio = max_ratio.max(ratio);
            max_q_gap = max_q_gap.max((r.q - r.lambda_a).abs());
            table.push(vec![
                n as f64,
                c,
                m as f64,
                r.mean_degree,
                r.lambda_a,
                r.lambda_b,
                ratio,
                r.q,
                r.q - r.lambda_a,
            ]);
        }
        let key = format!("n{n}_c{c}");
        let a: Vec<f64> = rows.iter().map(|r| r.lambda_a).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.lambda_b).collect();
        let q: Vec<f64> = rows.iter().map(|r| r.q).collect();
        let sa = record.stats(format!("lambda_a_{key}"), &a);
        let sb = record.stats(format!("lambda_b_{key}"), &b);
        let sq = record.stats(format!("q_{key}"), &q);
        record.scalar(format!("lambda_a_{key}"), sa.mean);
        record.scalar(format!("lambda_b_{key}"), sb.mean);
        record.scalar(format!("q_{key}"), sq.mean);
    }
    record.scalar("max_ratio", max_ratio);
    record.scalar("max_q_gap", max_q_gap);
    record.flag("lambda_a_in_range", a_ok);
    record.flag("lambda_b_below_bound", b_ok);
    record.flag("ratio_below_bound", ratio_ok);
    record.flag("q_matches_lambda_a", q_ok);
    record.tables.push(table);
    Ok(finish(record, started))
}
