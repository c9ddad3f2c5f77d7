//! Size scaling and degree dependence of the leading averaging eigenvalue.

use super::{
    affine_ratio, build_instance, converged_topology, expect_kind, finish, kernel_lambda, label,
    map_members, new_record, ExperimentConfig, ExperimentKind, ExperimentRecord, Table,
    ROUNDOFF_TAIL,
};
use crate::error::{Error, Result};
use crate::spectral::Block;

struct Member {
    mean_degree: f64,
    value: f64,
    attempts: usize,
    edges: usize,
}

/// For every `n` in `n_list`: an ensemble of `ensemble` instances (a single
/// instance when `n >= single_run_min_n`), each with converged topology
/// messages and `lambda_max(A)` from matrix-free power iteration.
///
/// CSVs: `scaling_sizes.csv` (`n,p,members,c_exp,c_exp_mean,c_exp_std,
/// lambda,lambda_mean,lambda_std`; `c_exp` and `lambda` are member 0) and
/// `scaling_members.csv` (`n,member,c_exp,lambda,attempts`).
pub fn run_scaling_study(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::Scaling)?;
    if cfg.n_list.is_empty() {
        return Err(Error::Config("field `n_list`: need at least one size".into()));
    }
    let (mut record, started) = new_record(cfg);
    let mut sizes = Table::new(
        "sizes",
        &["n", "p", "members", "c_exp", "c_exp_mean", "c_exp_std", "lambda", "lambda_mean", "lambda_std"],
    );
    let mut members_table = Table::new("members", &["n", "member", "c_exp", "lambda", "attempts"]);
    let mut ensemble_stds = Vec::new();

    for (slot, &n) in cfg.n_list.iter().enumerate() {
        let seeds = cfg.seeds.group(slot);
        let count = if n >= cfg.single_run_min_n { 1 } else { cfg.ensemble };
        let members = map_members(cfg.jobs, count, |m| {
            let s = seeds.member(m);
            let inst = build_instance(cfg, n, cfg.c, &s)?;
            let k = converged_topology(&inst.graph, cfg)?;
            let lambda = kernel_lambda(&inst.graph, &k, Block::A, cfg, s.perturbation)?;
            Ok(Member {
                mean_degree: inst.mean_degree,
                value: lambda,
                attempts: inst.attempts,
                edges: inst.graph.edge_count(),
            })
        })?;
        let lambdas: Vec<f64> = members.iter().map(|m| m.value).collect();
        let degrees: Vec<f64> = members.iter().map(|m| m.mean_degree).collect();
        for (m, mem) in members.iter().enumerate() {
            members_table.push(vec![n as f64, m as f64, mem.mean_degree, mem.value, mem.attempts as f64]);
        }
        let ls = record.stats(format!("lambda_n{n}"), &lambdas);
        let cs = record.stats(format!("c_exp_n{n}"), &degrees);
        record.scalar(format!("lambda_n{n}"), lambdas[0]);
        record.scalar(format!("c_exp_n{n}"), degrees[0]);
        if count > 1 {
            record.scalar(format!("lambda_mean_n{n}"), ls.mean);
            record.scalar(format!("lambda_std_n{n}"), ls.std);
            record.scalar(format!("c_exp_std_n{n}"), cs.std);
            ensemble_stds.push(ls.std);
        }
        sizes.push(vec![
            n as f64,
            cfg.c / n as f64,
            count as f64,
            degrees[0],
            cs.mean,
            cs.std,
            lambdas[0],
            ls.mean,
            ls.std,
        ]);
    }
    if ensemble_stds.len() >= 2 {
        record.flag(
            "lambda_std_decreasing",
            ensemble_stds.windows(2).all(|w| w[1] < w[0]),
        );
    }
    record.note(
        "c_exp is the realized mean degree 2|E|/n; both its ensemble std and that of lambda are reported",
    );
    record.tables.push(sizes);
    record.tables.push(members_table);
    Ok(finish(record, started))
}

/// Least-squares fit `q = slope * ln(c) + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual over the fitted points.
    pub rms: f64,
}

/// Fits `ys` against `ln(cs)`; `None` with fewer than two distinct `c`.
pub fn fit_log(cs: &[f64], ys: &[f64]) -> Option<LogFit> {
    let xs: Vec<f64> = cs.iter().map(|c| c.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if xs.len() < 2 || sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Some(LogFit { slope, intercept, rms })
}

/// For every `c` in `c_list`: an ensemble of `G(n, c/n)` instances, each
/// measured by `lambda_max(A)` or by the contraction ratio of the affine
/// averaging iteration (`measure`), then a fit of the means against `ln(c)`.
///
/// CSVs: `degree_means.csv` (`c,mean,std,members,empty,complete`) and
/// `degree_members.csv` (`c,member,c_exp,value`).
pub fn run_degree_study(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    expect_kind(cfg, ExperimentKind::Degree)?;
    if cfg.c_list.is_empty() {
        return Err(Error::Config("field `c_list`: need at least one degree".into()));
    }
    let n = cfg.n;
    if let Some(c) = cfg.c_list.iter().find(|&&c| c > n as f64) {
        return Err(Error::Config(format!(
            "field `c_list`: mean degree {c} exceeds n = {n}"
        )));
    }
    let (mut record, started) = new_record(cfg);
    let full = n * (n - 1) / 2;
    let mut means_table = Table::new("means", &["c", "mean", "std", "members", "empty", "complete"]);
    let mut members_table = Table::new("members", &["c", "member", "c_exp", "value"]);
    let mut means = Vec::new();

    for (slot, &c) in cfg.c_list.iter().enumerate() {
        let seeds = cfg.seeds.group(slot);
        let members = map_members(cfg.jobs, cfg.ensemble, |m| {
            let s = seeds.member(m);
            let inst = build_instance(cfg, n, c, &s)?;
            let edges = inst.graph.edge_count();
            let value = if edges == 0 {
                f64::NAN
            } else {
                let k = converged_topology(&inst.graph, cfg)?;
                match cfg.measure {
                    super::DegreeMeasure::Lambda => {
                        kernel_lambda(&inst.graph, &k, Block::A, cfg, s.perturbation)?
                    }
                    super::DegreeMeasure::Q => {
                        affine_ratio(&inst.graph, &k, &inst.values, cfg.max_iter, ROUNDOFF_TAIL)?.q
                    }
                }
            };
            Ok(Member {
                mean_degree: inst.mean_degree,
                value,
                attempts: inst.attempts,
                edges,
            })
        })?;
        let empty = members.iter().filter(|m| m.edges == 0).count();
        let complete = members.iter().filter(|m| m.edges == full).count();
        let values: Vec<f64> = members.iter().filter(|m| m.edges > 0).map(|m| m.value).collect();
        for (m, mem) in members.iter().enumerate() {
            members_table.push(vec![c, m as f64, mem.mean_degree, mem.value]);
        }
        let st = record.stats(format!("value_c{}", label(c)), &values);
        record.scalar(format!("mean_c{}", label(c)), st.mean);
        if empty > 0 {
            record.note(format!("c = {c}: {empty} empty graph(s) excluded from the mean"));
        }
        if complete > 0 {
            record.note(format!("c = {c}: {complete} complete graph(s) in the ensemble"));
        }
        means_table.push(vec![c, st.mean, st.std, values.len() as f64, empty as f64, complete as f64]);
        means.push(st.mean);
    }

    record.flag(
        "degenerate_graphs",
        means_table.rows.iter().any(|r| r[4] > 0.0 || r[5] > 0.0),
    );
    record.flag("strictly_increasing", means.windows(2).all(|w| w[1] > w[0]));
    let q_range = means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - means.iter().copied().fold(f64::INFINITY, f64::min);
    record.scalar("q_range", q_range);
    match fit_log(&cfg.c_list, &means) {
        Some(fit) => {
            record.scalar("fit_slope", fit.slope);
            record.scalar("fit_intercept", fit.intercept);
            record.scalar("fit_rms", fit.rms);
            let mut fit_table = Table::new("fit", &["c", "mean", "fitted", "residual"]);
            for (&c, &m) in cfg.c_list.iter().zip(&means) {
                let f = fit.slope * c.ln() + fit.intercept;
                fit_table.push(vec![c, m, f, m - f]);
            }
            record.tables.push(fit_table);
        }
        None => record.note("fewer than two distinct degrees: point estimate only, no fit"),
    }
    record.tables.push(means_table);
    record.tables.push(members_table);
    Ok(finish(record, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_fit_recovers_a_line() {
        let cs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = cs.iter().map(|c: &f64| 0.001 * c.ln() + 0.997).collect();
        let fit = fit_log(&cs, &ys).unwrap();
        assert!((fit.slope - 0.001).abs() < 1e-14);
        assert!((fit.intercept - 0.997).abs() < 1e-14);
        assert!(fit.rms < 1e-15);
        assert!(fit_log(&[8.0], &[0.9]).is_none());
        assert!(fit_log(&[8.0, 8.0], &[0.9, 0.91]).is_none());
    }
}
