//! Convergence from different initial messages.

use super::{
    build_instance, expect_kind, finish, label, max_abs_diff, new_record, require_converged,
    ExperimentConfig, ExperimentKind, ExperimentRecord, Table,
};
use crate::cp::{init_messages, run_to_convergence, InitScheme, MessageState, Propagator, RunOptions};
use crate::error::Result;
use crate::graph::Graph;

/// Distance of a state from the reference: `max(|K - K*|_inf, |mu - mu*|_inf)`.
fn distance(s: &MessageState, reference: &MessageState) -> f64 {
    max_abs_diff(&s.k, &reference.k).max(max_abs_diff(&s.mu, &reference.mu))
}

/// The directed message `i -> j` if present, otherwise the first message
/// leaving `i`, otherwise message 0.
fn pick_tracked(g: &Graph, (i, j): (usize, usize)) -> (usize, bool) {
    if i < g.n() && j < g.n() {
        if let Some(d) = g.directed(i, j) {
            return (d, true);
        }
    }
    if i < g.n() {
        if let Some(d) = g.index().outgoing(i).next() {
            return (d, false);
        }
    }
    (0, false)
}

/// Runs CP from `K = mu = 0` and from `alpha * (K*, mu*)` for every `alpha`
/// in `alphas`, where `(K*, mu*)` is a reference fixed point converged to
/// `reference_tol`. Reports the first iteration at which each run is within
/// `tol` of the reference (max-norm over both message kinds).
///
/// CSVs: `init_compare_iterations.csv` (`alpha,iterations,reached`; zero
/// initialization is `alpha = 0`), `init_compare_errors.csv` (`iter` then
/// one max-norm distance column per scheme) and one
/// `init_compare_edge_<scheme>.csv` per scheme (`iter,dk,dmu` with
/// `dk = K* - K`, `dmu = mu* - mu` on the tracked message, first
/// `trace_rounds` iterations).
pub fn run_init_comparison(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::InitCompare)?;
    let inst = build_instance(cfg, cfg.n, cfg.c, &cfg.seeds)?;
    let g = &inst.graph;
    let y = &inst.values;
    let (mut record, started) = new_record(cfg);

    let zero = init_messages(g, InitScheme::Zero)?;
    let reference = require_converged(run_to_convergence(
        g,
        zero,
        y,
        RunOptions {
            tol: cfg.reference_tol,
            max_iter: cfg.max_iter,
            ..RunOptions::default()
        },
    )?)?;
    let (tracked, exact) = pick_tracked(g, cfg.tracked_edge);
    let idx = g.index();
    record.scalar("tracked_source", idx.source(tracked) as f64);
    record.scalar("tracked_target", idx.target(tracked) as f64);
    record.scalar("k_star_tracked", reference.state.k[tracked]);
    record.scalar("mu_star_tracked", reference.state.mu[tracked]);
    record.scalar("reference_iterations", reference.iterations as f64);
    if !exact {
        record.note(format!(
            "edge {} -> {} is absent; tracking {} -> {} instead",
            cfg.tracked_edge.0,
            cfg.tracked_edge.1,
            idx.source(tracked),
            idx.target(tracked)
        ));
    }

    let mut schemes = vec![0.0];
    schemes.extend(cfg.alphas.iter().copied().filter(|&a| a != 0.0));
    let mut iterations_table = Table::new("iterations", &["alpha", "iterations", "reached"]);
    let mut histories = Vec::with_capacity(schemes.len());
    let mut results = Vec::with_capacity(schemes.len());

    for &alpha in &schemes {
        let start = init_messages(
            g,
            InitScheme::ScaledFixedPoint {
                alpha,
                reference: &reference,
            },
        )?;
        let name = if alpha == 0.0 { "zero".to_owned() } else { format!("alpha_{}", label(alpha)) };
        let mut edge = Table::new(&format!("edge_{name}"), &["iter", "dk", "dmu"]);
        let mut prop = Propagator::new(g, y.clone(), start)?;
        let mut history = Vec::new();
        let mut reached = None;
        loop {
            let it = prop.iteration();
            let s = prop.state();
            let dist = distance(s, &reference.state);
            history.push(dist);
            if it <= cfg.trace_rounds {
                edge.push(vec![
                    it as f64,
                    reference.state.k[tracked] - s.k[tracked],
                    reference.state.mu[tracked] - s.mu[tracked],
                ]);
            }
            if reached.is_none() && dist <= cfg.tol {
                reached = Some(it);
            }
            if (reached.is_some() && it >= cfg.trace_rounds) || it >= cfg.max_iter {
                break;
            }
            prop.advance();
        }
        let iterations = reached.map_or(f64::NAN, |r| r as f64);
        iterations_table.push(vec![alpha, iterations, f64::from(u8::from(reached.is_some()))]);
        record.scalar(format!("iterations_{name}"), iterations);
        histories.push((name, history));
        record.tables.push(edge);
        results.push((alpha, reached));
    }

    let zero_iters = results[0].1;
    let others: Vec<_> = results[1..]
        .iter()
        .filter(|(a, _)| *a != 1.0)
        .map(|(_, r)| *r)
        .collect();
    let zero_fastest = match zero_iters {
        Some(z) => others.iter().all(|r| r.map_or(true, |o| z < o)),
        None => false,
    };
    record.flag("zero_fastest", zero_fastest);
    if results.iter().any(|(_, r)| r.is_none()) {
        record.note("some schemes did not reach the tolerance within max_iter");
    }

    let longest = histories.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    let mut columns = vec!["iter".to_owned()];
    columns.extend(histories.iter().map(|(name, _)| name.clone()));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut errors = Table::new("errors", &cols);
    for it in 0..longest {
        let mut row = vec![it as f64];
        row.extend(histories.iter().map(|(_, h)| h.get(it).copied().unwrap_or(f64::NAN)));
        errors.push(row);
    }
    record.tables.insert(0, errors);
    record.tables.insert(0, iterations_table);
    Ok(finish(record, started))
}
