//! `cprop`: generate graphs, run Consensus Propagation, inspect the spectrum
//! of its linearization and run the seeded experiments.
//!
//! Exit status: 0 success, 1 I/O or other failure, 2 configuration error,
//! 3 non-convergence, 4 numerical failure.

mod params;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cprop::cp::{converge_topology, init_messages, run_to_convergence, InitScheme, Propagator, RunOptions};
use cprop::experiments::{run_experiment, ExperimentConfig, ExperimentKind, Seeds, Table};
use cprop::graph::{assign_couplings, generate_connected_erdos_renyi, generate_erdos_renyi, Graph, NodeValues};
use cprop::io::{load_graph, load_values, save_graph, save_values};
use cprop::linearize::{averaging_kernel, jacobian_blocks, topology_kernel, JacobianBlocks};
use cprop::oracle::solve_modes;
use cprop::sparse::DENSE_BUDGET;
use cprop::spectral::{dense_spectrum, power_iteration, Block, KernelOperator, PowerOptions, SpectralReport};
use cprop::Error;
use serde_json::json;

use params::{parse_assignment, parse_range, Params};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "cprop", version, about = "Consensus Propagation simulator and spectral analysis")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the key of the same
/// name in the `--config` file.
#[derive(Args, Debug, Clone)]
struct Global {
    /// Base seed; every random stream is derived from it
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output path: a file for `generate`, a directory otherwise
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Key-value config file (`key = value` per line, `#` comments)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (1: sequential reference, 0: one per core)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Convergence tolerance on the max-norm change per round
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Iteration cap
    #[arg(long = "max-iter", global = true)]
    max_iter: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample an Erdős-Rényi graph with uniform random couplings
    Generate(GenerateArgs),
    /// Run CP to convergence and compare with the exact modes
    Run(RunArgs),
    /// Eigenvalues of the linearized update at the fixed point
    Spectrum(SpectrumArgs),
    /// Run one of the seeded studies
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Number of nodes
    #[arg(long)]
    n: Option<usize>,
    /// Expected mean degree (edge probability c/n)
    #[arg(long, conflicts_with = "p")]
    c: Option<f64>,
    /// Edge probability
    #[arg(long)]
    p: Option<f64>,
    /// Coupling range `min:max`
    #[arg(long, value_parser = parse_range)]
    q: Option<(f64, f64)>,
    /// Global coupling constant
    #[arg(long)]
    beta: Option<f64>,
    /// Redraw until the graph is connected
    #[arg(long)]
    connected: bool,
    /// Also write node values drawn from `--y` to this file
    #[arg(long)]
    values_out: Option<PathBuf>,
    /// Value range `min:max` for `--values-out`
    #[arg(long, value_parser = parse_range)]
    y: Option<(f64, f64)>,
}

#[derive(Args, Debug, Clone)]
struct ValueSource {
    /// Graph file
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Node-values file
    #[arg(long, conflicts_with = "values_seed")]
    values: Option<PathBuf>,
    /// Seed for uniform random node values (defaults to one derived from `--seed`)
    #[arg(long)]
    values_seed: Option<u64>,
    /// Value range `min:max` for random values
    #[arg(long, value_parser = parse_range)]
    y: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Reference {
    /// Exact marginal modes of the Gaussian model
    Oracle,
    /// Mean of the node values
    Mean,
}

impl Reference {
    fn name(self) -> &'static str {
        match self {
            Reference::Oracle => "oracle",
            Reference::Mean => "mean",
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    source: ValueSource,
    /// Trajectory CSV (`iter,residual,belief_err_max,belief_err_l2`)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// What belief errors in the trajectory are measured against
    #[arg(long, value_enum)]
    against: Option<Reference>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Dense,
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BlockArg {
    /// `d mu'/d mu`, the averaging kernel
    #[value(name = "A")]
    A,
    /// `d K'/d K`, the topology kernel
    #[value(name = "B")]
    B,
    /// The full Jacobian `[[A, C], [0, B]]`
    #[value(name = "R")]
    R,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    #[command(flatten)]
    source: ValueSource,
    /// Full eigendecomposition or matrix-free power iteration
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Which operator to analyse
    #[arg(long, value_enum)]
    block: Option<BlockArg>,
    /// Power-iteration tolerance on the eigen-residual
    #[arg(long)]
    power_tol: Option<f64>,
    /// Also write the block(s) as sparse triplets to this file
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// dyn-data, dyn-network, init-compare, scaling, degree or ab-table
    kind: ExperimentKind,
    /// Extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Generate(args) => cmd_generate(&g, args),
        Command::Run(args) => cmd_run(&g, args),
        Command::Spectrum(args) => cmd_spectrum(&g, args),
        Command::Experiment(args) => cmd_experiment(&g, args),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::InvalidParameter { .. }
                | Error::InvalidGraph(_)
                | Error::LengthMismatch { .. }
                | Error::Parse { .. }
                | Error::DenseBudget { .. } => EXIT_CONFIG,
                Error::NotConverged { .. } => EXIT_NOT_CONVERGED,
                Error::Numerical(_) | Error::NoDominantEigenvalue { .. } => EXIT_NUMERICAL,
                Error::Io(_) => EXIT_OTHER,
            };
        }
    }
    EXIT_OTHER
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Config file plus the global flag overrides.
fn base_params(g: &Global) -> Result<Params> {
    let mut p = Params::load(g.config.as_deref())?;
    p.flag("seed", g.seed);
    p.flag("jobs", g.jobs);
    p.flag("tol", g.tol);
    p.flag("max_iter", g.max_iter);
    Ok(p)
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 1 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .with_context(|| format!("starting {jobs} worker threads"))?;
    pool.install(f)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_generate(g: &Global, args: GenerateArgs) -> Result<()> {
    let mut p = base_params(g)?;
    p.flag("n", args.n);
    p.flag("c", args.c);
    p.flag("p", args.p);
    if let Some((lo, hi)) = args.q {
        p.set("q_min", lo);
        p.set("q_max", hi);
    }
    p.flag("beta", args.beta);
    if args.connected {
        p.set("require_connected", true);
    }
    if let Some((lo, hi)) = args.y {
        p.set("y_min", lo);
        p.set("y_max", hi);
    }
    let out = g
        .out
        .clone()
        .or(p.path("out")?)
        .ok_or_else(|| config_error("missing required field `out` (graph file path)"))?;

    let n: usize = p.require("n")?;
    let c = match (p.get::<f64>("c")?, p.get::<f64>("p")?) {
        (Some(_), Some(_)) => return Err(config_error("give either `c` or `p`, not both")),
        (Some(c), None) => c,
        (None, Some(prob)) => prob * n as f64,
        (None, None) => return Err(config_error("missing required field `c` (or `p`)")),
    };
    if c > n as f64 {
        return Err(config_error(format!(
            "field `c`: mean degree {c} must not exceed n = {n}"
        )));
    }
    let seed: u64 = p.require("seed")?;
    let q_min = p.resolve("q_min", 0.5)?;
    let q_max = p.resolve("q_max", 2.0)?;
    let beta = p.resolve("beta", 100.0)?;
    let connected = p.resolve("require_connected", false)?;
    let max_attempts = p.resolve("max_attempts", 1000usize)?;
    p.set("c", c);

    let seeds = Seeds::from_base(seed);
    let sample = if connected {
        generate_connected_erdos_renyi(n, c, seeds.graph, max_attempts)?
    } else {
        generate_erdos_renyi(n, c, seeds.graph)?
    };
    let graph = assign_couplings(&sample.graph, q_min, q_max, seeds.couplings)?.with_beta(beta)?;
    save_graph(&graph, &out).with_context(|| format!("writing {}", out.display()))?;
    let mut line = format!(
        "n={n} edges={} mean_degree={} attempts={} connected={} graph={}",
        graph.edge_count(),
        graph.mean_degree(),
        sample.attempts,
        graph.is_connected(),
        out.display()
    );
    if let Some(vpath) = args.values_out.or(p.path("values_out")?) {
        let y_min = p.resolve("y_min", 0.0)?;
        let y_max = p.resolve("y_max", 10.0)?;
        let y = NodeValues::random(n, y_min, y_max, seeds.values)?;
        save_values(&y, &vpath).with_context(|| format!("writing {}", vpath.display()))?;
        p.set("values_out", vpath.display());
        line.push_str(&format!(" values={}", vpath.display()));
    }
    p.set("out", out.display());
    p.write(&params_path(&out))?;
    println!("{line}");
    Ok(())
}

/// `<file>.params` next to a generated graph file.
fn params_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".params");
    PathBuf::from(s)
}

/// Graph and node values from the flags and config.
fn load_problem(p: &mut Params, src: &ValueSource) -> Result<(Graph, NodeValues)> {
    p.flag("graph", src.graph.as_ref().map(|x| x.display()));
    p.flag("values", src.values.as_ref().map(|x| x.display()));
    p.flag("values_seed", src.values_seed);
    if let Some((lo, hi)) = src.y {
        p.set("y_min", lo);
        p.set("y_max", hi);
    }
    let graph_path = p.require_path("graph")?;
    let graph = load_graph(&graph_path).with_context(|| format!("loading {}", graph_path.display()))?;
    let values = if let Some(path) = p.path("values")? {
        load_values(&path, graph.n()).with_context(|| format!("loading {}", path.display()))?
    } else {
        let seed = match (p.get::<u64>("values_seed")?, p.get::<u64>("seed")?) {
            (Some(s), _) => s,
            (None, Some(base)) => Seeds::from_base(base).values,
            (None, None) => {
                return Err(config_error(
                    "missing node values: give `values`, `values_seed` or `seed`",
                ))
            }
        };
        p.set("values_seed", seed);
        let y_min = p.resolve("y_min", 0.0)?;
        let y_max = p.resolve("y_max", 10.0)?;
        NodeValues::random(graph.n(), y_min, y_max, seed)?
    };
    Ok((graph, values))
}

fn cmd_run(g: &Global, args: RunArgs) -> Result<()> {
    let started = Instant::now();
    let mut p = base_params(g)?;
    p.flag("trace", args.trace.as_ref().map(|x| x.display()));
    p.flag("against", args.against.map(Reference::name));
    let (graph, y) = load_problem(&mut p, &args.source)?;
    let tol = p.resolve("tol", cprop::cp::DEFAULT_TOL)?;
    let max_iter = p.resolve("max_iter", cprop::cp::DEFAULT_MAX_ITER)?;
    let jobs = p.resolve("jobs", 1usize)?;
    let against = match p.resolve("against", "oracle".to_owned())?.as_str() {
        "oracle" => Reference::Oracle,
        "mean" => Reference::Mean,
        other => return Err(config_error(format!("field `against`: expected oracle or mean, got `{other}`"))),
    };
    if !(tol.is_finite() && tol > 0.0) {
        return Err(config_error(format!("field `tol`: must be positive, got {tol}")));
    }
    let out = g.out.clone().or(p.path("out")?);
    let trace_path = p.path("trace")?.or_else(|| out.as_ref().map(|d| d.join("run_trajectory.csv")));

    let modes = solve_modes(&graph, &y)?;
    let mean = y.mean();
    let reference: Vec<f64> = match against {
        Reference::Oracle => modes.x.clone(),
        Reference::Mean => vec![mean; graph.n()],
    };
    let errors = |b: &[f64], r: &[f64]| {
        let max = b.iter().zip(r).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        let l2 = b.iter().zip(r).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        (max, l2)
    };

    let mut trace = Table::new("trajectory", &["iter", "residual", "belief_err_max", "belief_err_l2"]);
    let (iterations, residual, beliefs) = with_jobs(jobs, || {
        let start = init_messages(&graph, InitScheme::Zero)?;
        let mut prop = Propagator::new(&graph, y.clone(), start)?.parallel(jobs != 1);
        let mut residual = f64::INFINITY;
        while prop.iteration() < max_iter {
            residual = prop.advance();
            if trace_path.is_some() {
                let (emax, el2) = errors(&prop.beliefs(), &reference);
                trace.push(vec![prop.iteration() as f64, residual, emax, el2]);
            }
            if residual <= tol {
                break;
            }
        }
        Ok((prop.iteration(), residual, prop.beliefs()))
    })?;
    let converged = residual <= tol;
    let (oracle_max, oracle_l2) = errors(&beliefs, &modes.x);
    let (mean_max, _) = errors(&beliefs, &vec![mean; graph.n()]);

    let summary = json!({
        "n": graph.n(),
        "edges": graph.edge_count(),
        "beta": graph.beta(),
        "converged": converged,
        "iterations": iterations,
        "residual": residual,
        "tol": tol,
        "max_iter": max_iter,
        "belief_err_max_oracle": oracle_max,
        "belief_err_l2_oracle": oracle_l2,
        "belief_err_max_mean": mean_max,
        "values_mean": mean,
        "oracle_relative_residual": modes.relative_residual,
        "oracle_backward_error": modes.backward_error,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    if let Some(path) = &trace_path {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_table(&trace, path)?;
    }
    if let Some(dir) = &out {
        create_dir(dir)?;
        p.write(&dir.join("config.txt"))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)
            .with_context(|| format!("writing {}", dir.join("summary.json").display()))?;
    }
    println!(
        "converged={converged} iterations={iterations} residual={residual:e} belief_err_max_oracle={oracle_max:e} belief_err_max_mean={mean_max:e}"
    );
    if !converged {
        return Err(Error::NotConverged { residual, iterations }.into());
    }
    Ok(())
}

fn write_table(t: &Table, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    t.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_spectrum(g: &Global, args: SpectrumArgs) -> Result<()> {
    let started = Instant::now();
    let mut p = base_params(g)?;
    p.flag(
        "mode",
        args.mode.map(|m| if m == Mode::Dense { "dense" } else { "power" }),
    );
    p.flag(
        "block",
        args.block.map(|b| match b {
            BlockArg::A => "A",
            BlockArg::B => "B",
            BlockArg::R => "R",
        }),
    );
    p.flag("power_tol", args.power_tol);
    p.flag("export", args.export.as_ref().map(|x| x.display()));
    let mode = match p.resolve("mode", "dense".to_owned())?.as_str() {
        "dense" => Mode::Dense,
        "power" => Mode::Power,
        other => return Err(config_error(format!("field `mode`: expected dense or power, got `{other}`"))),
    };
    let block = match p.resolve("block", "A".to_owned())?.as_str() {
        "A" | "a" => BlockArg::A,
        "B" | "b" => BlockArg::B,
        "R" | "r" => BlockArg::R,
        other => return Err(config_error(format!("field `block`: expected A, B or R, got `{other}`"))),
    };
    let tol = p.resolve("tol", 1e-13)?;
    let max_iter = p.resolve("max_iter", cprop::cp::DEFAULT_MAX_ITER)?;
    let power_tol = p.resolve("power_tol", 1e-12)?;
    let power_seed = p.get::<u64>("seed")?.unwrap_or(0);

    let (graph, k, blocks) = if block == BlockArg::R {
        let (graph, y) = load_problem(&mut p, &args.source)?;
        let fp = run_to_convergence(
            &graph,
            init_messages(&graph, InitScheme::Zero)?,
            &y,
            RunOptions {
                tol,
                max_iter,
                ..RunOptions::default()
            },
        )?;
        if !fp.converged {
            return Err(Error::NotConverged {
                residual: fp.residual,
                iterations: fp.iterations,
            }
            .into());
        }
        let blocks = jacobian_blocks(&graph, &fp, &y)?;
        (graph, fp.state.k.clone(), Some(blocks))
    } else {
        p.flag("graph", args.source.graph.as_ref().map(|x| x.display()));
        let path = p.require_path("graph")?;
        let graph = load_graph(&path).with_context(|| format!("loading {}", path.display()))?;
        let tfp = converge_topology(&graph, tol, max_iter)?;
        if !tfp.converged {
            return Err(Error::NotConverged {
                residual: tfp.residual,
                iterations: tfp.iterations,
            }
            .into());
        }
        (graph, tfp.k, None)
    };
    let m = graph.message_count();
    if m == 0 {
        return Err(config_error("graph has no edges; the linearized update is empty"));
    }

    if let Some(path) = p.path("export")? {
        let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(file);
        match (&blocks, block) {
            (Some(b), _) => {
                b.a.write_triplets("A", &mut w)?;
                b.c.write_triplets("C", &mut w)?;
                b.b.write_triplets("B", &mut w)?;
            }
            (None, BlockArg::B) => topology_kernel(&graph, &k).write_triplets("B", &mut w)?,
            (None, _) => averaging_kernel(&graph, &k).write_triplets("A", &mut w)?,
        }
        w.flush()?;
    }

    let report = match mode {
        Mode::Dense => {
            let (matrix, mu_dim) = match (&blocks, block) {
                (Some(b), _) => (b.assemble_dense(DENSE_BUDGET)?, m),
                (None, BlockArg::B) => (topology_kernel(&graph, &k).to_dense(DENSE_BUDGET)?, 0),
                (None, _) => (averaging_kernel(&graph, &k).to_dense(DENSE_BUDGET)?, m),
            };
            SpectralReport::from_dense(&dense_spectrum(&matrix)?, Some(mu_dim))?
        }
        Mode::Power => {
            let opts = PowerOptions {
                tol: power_tol,
                max_iter,
            };
            let res = match (&blocks, block) {
                (Some(b), _) => power_iteration(|x, out| apply_full(b, x, out), 2 * m, opts, power_seed)?,
                (None, BlockArg::B) => KernelOperator::new(&graph, &k, Block::B)?.power_iteration(opts, power_seed)?,
                (None, _) => KernelOperator::new(&graph, &k, Block::A)?.power_iteration(opts, power_seed)?,
            };
            if !res.converged {
                return Err(Error::NotConverged {
                    residual: res.residual,
                    iterations: res.iterations,
                }
                .into());
            }
            SpectralReport::from_power(&res)
        }
    };

    let block_name = match block {
        BlockArg::A => "A",
        BlockArg::B => "B",
        BlockArg::R => "R",
    };
    match g.out.clone().or(p.path("out")?) {
        Some(dir) => {
            create_dir(&dir)?;
            let path = dir.join(format!("spectrum_{block_name}.csv"));
            let file = File::create(&path).with_context(|| format!("writing {}", path.display()))?;
            let mut w = BufWriter::new(file);
            report.write_csv(&mut w)?;
            w.flush()?;
            p.write(&dir.join("config.txt"))?;
        }
        None => report.write_csv(io::stdout().lock())?,
    }
    let complex = report.eigenvalues.iter().filter(|(_, im)| *im != 0.0).count();
    let line = format!(
        "block={block_name} mode={} dim={} lambda_max={} complex={complex} wall_clock_s={:.3}",
        if mode == Mode::Dense { "dense" } else { "power" },
        if block == BlockArg::R { 2 * m } else { m },
        report.max_modulus(),
        started.elapsed().as_secs_f64()
    );
    if g.out.is_some() || p.kv().contains("out") {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

/// `[[A, C], [0, B]] x` with `mu` coordinates first.
fn apply_full(b: &JacobianBlocks, x: &[f64], out: &mut [f64]) {
    let m = b.dim();
    let (x_mu, x_k) = x.split_at(m);
    let (out_mu, out_k) = out.split_at_mut(m);
    b.a.matvec(x_mu, out_mu);
    let ck = b.c.mul_vec(x_k);
    for (o, v) in out_mu.iter_mut().zip(ck) {
        *o += v;
    }
    b.b.matvec(x_k, out_k);
}

fn cmd_experiment(g: &Global, args: ExperimentArgs) -> Result<()> {
    let mut p = Params::load(g.config.as_deref())?;
    for (k, v) in &args.set {
        p.set(k, v);
    }
    p.flag("seed", g.seed);
    p.flag("jobs", g.jobs);
    p.flag("tol", g.tol);
    p.flag("max_iter", g.max_iter);
    let cfg = ExperimentConfig::from_kv(Some(args.kind), p.kv())?;
    let out = g
        .out
        .clone()
        .or(p.path("out")?)
        .unwrap_or_else(|| PathBuf::from("results").join(args.kind.file_stem()));
    let record = run_experiment(&cfg)?;
    record
        .write_outputs(&out)
        .with_context(|| format!("writing results to {}", out.display()))?;
    println!("{}", record.summary_line());
    Ok(())
}
