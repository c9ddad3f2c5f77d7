//! CP when the couplings change: fast topology-message relaxation versus
//! slow local-state relaxation.

use super::{
    build_instance, expect_kind, finish, kernel_lambda, max_abs_diff, new_record, norm2_diff,
    require_converged, CouplingSchedule, ExperimentConfig, ExperimentKind, ExperimentRecord,
    Table, ROUNDOFF_TAIL,
};
use crate::cp::{
    excluded_sums, init_messages, run_to_convergence, topology_deviation_step, FixedPoint,
    InitScheme, MessageState, Propagator, RunOptions,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeValues};
use crate::oracle::exact_marginal_modes;
use crate::rng;
use crate::spectral::{convergence_ratio, Block, TransientPolicy};

/// Tail policy for deviation-form histories, which have no rounding floor.
pub const DEVIATION_TAIL: TransientPolicy = TransientPolicy {
    stable_run: 20,
    stable_spread: 0.01,
    min_window: 50,
    max_window: None,
    floor_factor: 0.0,
};

/// Settling threshold of the schedule test, relative to the first
/// post-change error of the values-only run.
pub const SETTLE_FRACTION: f64 = 1e-2;

/// Deviation-form rounds are stopped once the norm has shrunk by this factor.
const DEVIATION_RANGE: f64 = 1e-250;

/// Relaxation of one injected perturbation.
#[derive(Debug, Clone)]
pub struct Relaxation {
    /// `|s - s*|_2` over all `(mu, K)` coordinates, from round 0.
    pub total: Vec<f64>,
    /// `|K - K*|_2` per round.
    pub k_error: Vec<f64>,
    /// `|mu - mu*|_2` per round.
    pub mu_error: Vec<f64>,
    /// `|K^{n+1} - K^n|_2` per round.
    pub k_change: Vec<f64>,
    /// `|mu^{n+1} - mu^n|_2` per round.
    pub mu_change: Vec<f64>,
    /// First round with `total <= total[0] / 2`.
    pub half_error_rounds: Option<usize>,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A random direction of 2-norm `norm` with i.i.d. uniform `[0, 1)` entries.
///
/// Nonnegative entries give the direction an `O(1)` component along the
/// positive Perron vector of `A`; a zero-mean direction would be nearly
/// orthogonal to it and its `mu` error would halve within one round.
fn random_direction(len: usize, norm: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed);
    let mut v: Vec<f64> = (0..len).map(|_| rng::unit(&mut r)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x *= norm / nv);
    v
}

/// Runs CP for `rounds` rounds from `fp` with `dk` added to `K` and `dmu`
/// to `mu`, tracking the distance to `fp`.
pub fn relax(
    g: &Graph,
    y: &NodeValues,
    fp: &FixedPoint,
    dk: &[f64],
    dmu: &[f64],
    rounds: usize,
) -> Result<Relaxation> {
    let star = &fp.state;
    let k: Vec<f64> = star.k.iter().zip(dk).map(|(a, b)| a + b).collect();
    if let Some(d) = k.iter().position(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter {
            name: "perturbation_norm",
            reason: format!("K perturbation makes message {d} non-positive; use a smaller norm"),
        });
    }
    let mu: Vec<f64> = star.mu.iter().zip(dmu).map(|(a, b)| a + b).collect();
    let mut prop = Propagator::new(g, y.clone(), init_messages(g, InitScheme::Explicit { k, mu })?)?;
    let errors = |s: &MessageState| {
        let ek = norm2_diff(&s.k, &star.k);
        let em = norm2_diff(&s.mu, &star.mu);
        (ek.hypot(em), ek, em)
    };
    let (t0, k0, m0) = errors(prop.state());
    let mut out = Relaxation {
        total: vec![t0],
        k_error: vec![k0],
        mu_error: vec![m0],
        k_change: Vec::with_capacity(rounds),
        mu_change: Vec::with_capacity(rounds),
        half_error_rounds: None,
    };
    for _ in 0..rounds {
        prop.advance();
        let s = prop.state();
        let prev = prop.previous();
        out.k_change.push(norm2_diff(&s.k, &prev.k));
        out.mu_change.push(norm2_diff(&s.mu, &prev.mu));
        let (t, ek, em) = errors(s);
        if out.half_error_rounds.is_none() && t <= 0.5 * t0 {
            out.half_error_rounds = Some(prop.iteration());
        }
        out.total.push(t);
        out.k_error.push(ek);
        out.mu_error.push(em);
    }
    Ok(out)
}

/// `|K^n - K*|_2` for `n = 0, 1, ...` under the exact topology update in
/// deviation coordinates ([`topology_deviation_step`]), from `delta0` until
/// the norm has fallen by [`DEVIATION_RANGE`] or `max_rounds` have run.
pub fn topology_deviation_history(g: &Graph, k_star: &[f64], delta0: &[f64], max_rounds: usize) -> Vec<f64> {
    let s_star = excluded_sums(g, k_star);
    let mut delta = delta0.to_vec();
    let e0 = norm2(&delta);
    let mut out = vec![e0];
    for _ in 0..max_rounds {
        delta = topology_deviation_step(g, &s_star, &delta);
        let e = norm2(&delta);
        out.push(e);
        if !(e > DEVIATION_RANGE * e0) {
            break;
        }
    }
    out
}

/// Couplings after one schedule event; rejects non-positive results.
fn next_couplings(cfg: &ExperimentConfig, g: &Graph, r: &mut rng::Stream) -> Result<Vec<f64>> {
    let q: Vec<f64> = match cfg.q_schedule {
        CouplingSchedule::Resample => (0..g.edge_count())
            .map(|_| rng::uniform(r, cfg.q_min, cfg.q_max))
            .collect(),
        CouplingSchedule::Perturb => g
            .couplings()
            .iter()
            .map(|q| q * (1.0 + cfg.q_noise * rng::uniform(r, -1.0, 1.0)))
            .collect(),
    };
    if let Some(e) = q.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Config(format!(
            "coupling schedule drives Q of edge {e} to {} (must stay positive); lower `q_noise`",
            q[e]
        )));
    }
    Ok(q)
}

/// Two studies.
///
/// Manifold test: for every `(n, c)` in `pairs` (and `ensemble` instances
/// each), equal-norm random perturbations are injected at a converged fixed
/// point into `K` only and into `mu` only; CP then runs for `rounds` rounds.
/// CSV `dyn_network_manifold.csv`: `n,c,member,lambda_a,lambda_b,
/// k_half_rounds,mu_half_rounds,k_tail_ratio,mu_tail_ratio`. Half-error
/// rounds use the full `(mu, K)` distance of the CP run. The `mu` tail ratio
/// comes from successive `mu` changes of that run; the `K` tail ratio from
/// [`topology_deviation_history`], because `|K - K*|` reaches the rounding
/// level of `K*` after only a dozen rounds.
/// `dyn_network_manifold_trace.csv` holds the first pair's distances
/// (`round,k_only_k,k_only_mu,mu_only_mu`) for `trace_rounds` rounds.
///
/// Schedule test on `G(n, c/n)`: starting from the fixed point, two paired
/// runs share the value change `y <- scale * y` after round
/// `perturb_round`; the second also changes the couplings then and every
/// `resample_period` rounds (`q_schedule`). CSV `dyn_network_schedule.csv`:
/// `round,err_values_only,err_both` (max-norm distance of beliefs from the
/// exact modes of the current model).
pub fn run_dynamic_network(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::DynNetwork)?;
    let (mut record, started) = new_record(cfg);
    let fp_opts = RunOptions {
        tol: cfg.reference_tol,
        max_iter: cfg.max_iter,
        ..RunOptions::default()
    };

    // manifold test
    let mut manifold = Table::new(
        "manifold",
        &["n", "c", "member", "lambda_a", "lambda_b", "k_half_rounds", "mu_half_rounds", "k_tail_ratio", "mu_tail_ratio"],
    );
    let mut trace = Table::new("manifold_trace", &["round", "k_only_k", "k_only_mu", "mu_only_mu"]);
    let (mut ordered, mut k_tail_ok, mut mu_tail_ok) = (true, true, true);
    let mut max_k_gap: f64 = 0.0;
    let mut max_mu_gap: f64 = 0.0;
    for (slot, &(n, c)) in cfg.pairs.iter().enumerate() {
        let seeds = cfg.seeds.group(slot);
        let rows = super::map_members(cfg.jobs, cfg.ensemble, |m| {
            let s = seeds.member(m);
            let inst = build_instance(cfg, n, c, &s)?;
            let g = &inst.graph;
            let fp = require_converged(run_to_convergence(
                g,
                init_messages(g, InitScheme::Zero)?,
                &inst.values,
                fp_opts,
            )?)?;
            let lambda_a = kernel_lambda(g, &fp.state.k, Block::A, cfg, s.perturbation)?;
            let lambda_b = kernel_lambda(g, &fp.state.k, Block::B, cfg, s.perturbation)?;
            let dim = g.message_count();
            let zeros = vec![0.0; dim];
            let dk = random_direction(dim, cfg.perturbation_norm, rng::derive_seed(s.perturbation, 1));
            let dmu = random_direction(dim, cfg.perturbation_norm, rng::derive_seed(s.perturbation, 2));
            let k_only = relax(g, &inst.values, &fp, &dk, &zeros, cfg.rounds)?;
            let mu_only = relax(g, &inst.values, &fp, &zeros, &dmu, cfg.rounds)?;
            let k_history = topology_deviation_history(g, &fp.state.k, &dk, cfg.rounds);
            let k_tail = convergence_ratio(&k_history, DEVIATION_TAIL).map(|r| r.q);
            let mu_tail = convergence_ratio(&mu_only.mu_change, ROUNDOFF_TAIL).map(|r| r.q);
            Ok((lambda_a, lambda_b, k_only, mu_only, k_tail, mu_tail))
        })?;
        for (m, (lambda_a, lambda_b, k_only, mu_only, k_tail, mu_tail)) in rows.into_iter().enumerate() {
            let kh = k_only.half_error_rounds.map_or(f64::NAN, |v| v as f64);
            let mh = mu_only.half_error_rounds.map_or(f64::NAN, |v| v as f64);
            ordered &= matches!((k_only.half_error_rounds, mu_only.half_error_rounds), (Some(a), Some(b)) if a < b);
            let kt = k_tail.unwrap_or(f64::NAN);
            let mt = mu_tail.unwrap_or(f64::NAN);
            k_tail_ok &= (kt - lambda_b).abs() <= 1e-2;
            mu_tail_ok &= (mt - lambda_a).abs() <= 1e-2;
            max_k_gap = max_k_gap.max((kt - lambda_b).abs());
            max_mu_gap = max_mu_gap.max((mt - lambda_a).abs());
            manifold.push(vec![n as f64, c, m as f64, lambda_a, lambda_b, kh, mh, kt, mt]);
            if slot == 0 && m == 0 {
                for r in 0..=cfg.trace_rounds.min(cfg.rounds) {
                    trace.push(vec![r as f64, k_only.k_error[r], k_only.mu_error[r], mu_only.mu_error[r]]);
                }
            }
        }
    }
    record.flag("k_halves_first", ordered);
    record.flag("k_tail_matches_lambda_b", k_tail_ok);
    record.flag("mu_tail_matches_lambda_a", mu_tail_ok);
    record.scalar("max_k_tail_gap", max_k_gap);
    record.scalar("max_mu_tail_gap", max_mu_gap);
    record.tables.push(manifold);
    record.tables.push(trace);

    // schedule test
    let inst = build_instance(cfg, cfg.n, cfg.c, &cfg.seeds)?;
    let g0 = inst.graph;
    let y0 = inst.values;
    let fp = require_converged(run_to_convergence(
        &g0,
        init_messages(&g0, InitScheme::Zero)?,
        &y0,
        fp_opts,
    )?)?;
    let y1 = y0.scaled(cfg.scale)?;
    let mut q_rng = rng::stream(cfg.seeds.perturbation);
    // coupling sequence for the "both" run, fixed up front
    let mut graphs = vec![g0.clone()];
    let mut event = cfg.perturb_round;
    while event < cfg.rounds {
        let q = next_couplings(cfg, graphs.last().expect("non-empty"), &mut q_rng)?;
        graphs.push(g0.with_couplings(q)?);
        event += cfg.resample_period;
    }
    let modes_values_only = exact_marginal_modes(&g0, &y1)?;
    let modes_both: Vec<Vec<f64>> = graphs[1..]
        .iter()
        .map(|g| exact_marginal_modes(g, &y1))
        .collect::<Result<_>>()?;

    let modes0 = exact_marginal_modes(&g0, &y0)?;
    let mut schedule = Table::new("schedule", &["round", "err_values_only", "err_both"]);
    let mut values_only = Propagator::new(&g0, y0.clone(), fp.state.clone())?;
    let mut both = Propagator::new(&graphs[0], y0.clone(), fp.state.clone())?;
    let err0 = max_abs_diff(&values_only.beliefs(), &modes0);
    schedule.push(vec![0.0, err0, err0]);
    let mut both_graph = 0usize;
    let mut err_a = Vec::new();
    let mut err_b = Vec::new();
    for round in 1..=cfg.rounds {
        if round == cfg.perturb_round + 1 {
            values_only.set_values(y1.clone())?;
            both.set_values(y1.clone())?;
        }
        if round > cfg.perturb_round && (round - cfg.perturb_round - 1) % cfg.resample_period == 0 {
            both_graph += 1;
            both = both.rebind(&graphs[both_graph])?;
        }
        values_only.advance();
        both.advance();
        let (ea, eb) = if round > cfg.perturb_round {
            let ea = max_abs_diff(&values_only.beliefs(), &modes_values_only);
            let eb = max_abs_diff(&both.beliefs(), &modes_both[both_graph - 1]);
            err_a.push(ea);
            err_b.push(eb);
            (ea, eb)
        } else {
            let e = max_abs_diff(&values_only.beliefs(), &modes0);
            (e, max_abs_diff(&both.beliefs(), &modes0))
        };
        schedule.push(vec![round as f64, ea, eb]);
    }
    if let (Some(&a0), true) = (err_a.first(), !err_b.is_empty()) {
        // rounds until each run is within 1e-2 of the values-only run's
        // initial post-change error (before the next coupling change)
        let horizon = cfg.resample_period.min(err_a.len());
        let target = SETTLE_FRACTION * a0;
        let settle = |e: &[f64]| e[..horizon].iter().position(|&v| v <= target);
        let sa = settle(&err_a);
        let sb = settle(&err_b);
        record.scalar("settle_values_only", sa.map_or(f64::NAN, |v| (v + 1) as f64));
        record.scalar("settle_both", sb.map_or(f64::NAN, |v| (v + 1) as f64));
        record.flag(
            "network_no_slower",
            match (sa, sb) {
                (Some(a), Some(b)) => b <= a,
                (None, Some(_)) => true,
                _ => false,
            },
        );
    }
    record.tables.push(schedule);
    Ok(finish(record, started))
}
