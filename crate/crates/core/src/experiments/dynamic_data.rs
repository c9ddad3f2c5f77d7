//! CP under changing node values with the messages never reset.

use super::{
    build_instance, converged_topology, expect_kind, finish, kernel_lambda, max_abs_diff,
    new_record, DataSchedule, ExperimentConfig, ExperimentKind, ExperimentRecord, Table,
    ROUNDOFF_TAIL,
};
use crate::cp::{init_messages, InitScheme, Propagator};
use crate::error::{Error, Result};
use crate::graph::NodeValues;
use crate::linearize::AffineAveraging;
use crate::oracle::exact_marginal_modes;
use crate::rng;
use crate::spectral::{convergence_ratio, Block};

/// Sign changes in `errors`, ignoring entries with `|e| <= threshold`.
pub fn sign_changes(errors: &[f64], threshold: f64) -> usize {
    let mut last = 0.0f64;
    let mut count = 0;
    for &e in errors {
        if e.abs() <= threshold || e.is_nan() {
            continue;
        }
        if last != 0.0 && (e > 0.0) != (last > 0.0) {
            count += 1;
        }
        last = e;
    }
    count
}

/// Zero-initialized CP on one instance for `rounds` rounds. After round
/// `perturb_round` the values change according to `schedule`; messages are
/// never reset.
///
/// CSV `dyn_data_trajectory.csv`, one row per round (round 0 is the initial
/// state): `round,y_mean,belief_tracked,err_tracked,err_mean_max,
/// err_mode_max,change`. `err_tracked` is the tracked node's belief minus
/// its exact mode, `err_mean_max = max_i |b_i - mean(y)|`, `err_mode_max =
/// max_i |b_i - x*_i|` (exact modes for the current values; `nan` for the
/// noise and walk schedules) and `change = |b^n - b^{n-1}|_2`.
///
/// For the step schedule the record also holds the post-perturbation
/// contraction ratio `q_post` (from `change`), `lambda_a`, sign-change
/// counts of `err_tracked` before and after the perturbation, and the
/// largest per-iterate gap between CP's `mu` messages and the frozen-`K`
/// affine map started from the same state (`replay_max_diff`).
pub fn run_dynamic_data(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::DynData)?;
    if cfg.tracked_node >= cfg.n {
        return Err(Error::Config(format!(
            "field `tracked_node`: {} is not below n = {}",
            cfg.tracked_node, cfg.n
        )));
    }
    let inst = build_instance(cfg, cfg.n, cfg.c, &cfg.seeds)?;
    let g = &inst.graph;
    let y0 = inst.values.clone();
    let (mut record, started) = new_record(cfg);
    let t = cfg.tracked_node;
    let step_schedule = cfg.schedule == DataSchedule::Step;

    let mut table = Table::new(
        "trajectory",
        &["round", "y_mean", "belief_tracked", "err_tracked", "err_mean_max", "err_mode_max", "change"],
    );
    let mut prop = Propagator::new(g, y0.clone(), init_messages(g, InitScheme::Zero)?)?;
    let mut modes = Some(exact_marginal_modes(g, &y0)?);
    let mut noise_rng = rng::stream(cfg.seeds.perturbation);
    let mut prev_beliefs = prop.beliefs();
    let mut err_tracked = Vec::with_capacity(cfg.rounds + 1);
    let mut changes = Vec::with_capacity(cfg.rounds + 1);

    let mut push_row = |prop: &Propagator<'_>, beliefs: &[f64], modes: &Option<Vec<f64>>, change: f64| {
        let y = prop.values();
        let mean = y.mean();
        let err_mean_max = beliefs.iter().map(|b| (b - mean).abs()).fold(0.0, f64::max);
        let (err_t, err_mode) = match modes {
            Some(x) => (beliefs[t] - x[t], max_abs_diff(beliefs, x)),
            None => (beliefs[t] - mean, f64::NAN),
        };
        table.push(vec![
            prop.iteration() as f64,
            mean,
            beliefs[t],
            err_t,
            err_mean_max,
            err_mode,
            change,
        ]);
        err_t
    };
    err_tracked.push(push_row(&prop, &prev_beliefs, &modes, f64::NAN));

    // frozen-K replay state for the step schedule
    let mut replay: Option<(AffineAveraging, Vec<f64>, Vec<f64>)> = None;
    let mut replay_max_diff: f64 = 0.0;

    for round in 1..=cfg.rounds {
        if round > cfg.perturb_round {
            match cfg.schedule {
                DataSchedule::Step if round == cfg.perturb_round + 1 => {
                    let y = y0.scaled(cfg.scale)?;
                    modes = Some(exact_marginal_modes(g, &y)?);
                    let aff = AffineAveraging::from_topology(g, &prop.state().k, &y)?;
                    let mu = prop.state().mu.clone();
                    replay = Some((aff, mu.clone(), mu));
                    prop.set_values(y)?;
                }
                DataSchedule::Step => {}
                DataSchedule::Noise => {
                    let y: Vec<f64> = y0
                        .as_slice()
                        .iter()
                        .map(|v| v + cfg.noise * rng::normal(&mut noise_rng))
                        .collect();
                    prop.set_values(NodeValues::new(y)?)?;
                    modes = None;
                }
                DataSchedule::Walk => {
                    let y: Vec<f64> = prop
                        .values()
                        .as_slice()
                        .iter()
                        .map(|v| v + cfg.noise * rng::normal(&mut noise_rng))
                        .collect();
                    prop.set_values(NodeValues::new(y)?)?;
                    modes = None;
                }
            }
        }
        prop.advance();
        if let Some((aff, mu, next)) = replay.as_mut() {
            aff.apply_into(mu, next);
            std::mem::swap(mu, next);
            replay_max_diff = replay_max_diff.max(max_abs_diff(mu, &prop.state().mu));
        }
        let beliefs = prop.beliefs();
        let change = beliefs
            .iter()
            .zip(&prev_beliefs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        changes.push(change);
        err_tracked.push(push_row(&prop, &beliefs, &modes, change));
        prev_beliefs = beliefs;
    }

    let k = converged_topology(g, cfg)?;
    let lambda_a = kernel_lambda(g, &k, Block::A, cfg, cfg.seeds.perturbation)?;
    record.scalar("lambda_a", lambda_a);
    record.scalar("mean_degree", inst.mean_degree);
    let p = cfg.perturb_round.min(cfg.rounds);
    let threshold = 1e-9 * y0.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    record.scalar("overshoot_before", sign_changes(&err_tracked[1..=p], threshold) as f64);
    if step_schedule && cfg.perturb_round < cfg.rounds {
        record.scalar("overshoot_after", sign_changes(&err_tracked[p + 1..], threshold) as f64);
        record.scalar("replay_max_diff", replay_max_diff);
        // changes[n] is the change of round n + 1; the first post-perturbation
        // round is perturb_round + 1
        match convergence_ratio(&changes[p..], ROUNDOFF_TAIL) {
            Ok(ratio) => {
                record.scalar("q_post", ratio.q);
                record.scalar("q_post_minus_lambda_a", ratio.q - lambda_a);
                record.scalar("q_post_window_start", (p + 1 + ratio.window.0) as f64);
                record.scalar("q_post_window_end", (p + 1 + ratio.window.1) as f64);
            }
            Err(e) => record.note(format!("no post-perturbation ratio: {e}")),
        }
    } else if !step_schedule {
        record.note(format!(
            "{} schedule is an extrapolation beyond the single step change; err_tracked is measured against mean(y)",
            cfg.schedule
        ));
    }
    record.tables.push(table);
    Ok(finish(record, started))
}
