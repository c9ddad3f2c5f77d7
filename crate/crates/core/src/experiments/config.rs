//! Experiment parameters, read from flat key-value text.
//!
//! Every field has a per-kind default except the seeds: a config must give
//! either the base `seed` or each of `graph_seed`, `coupling_seed`,
//! `value_seed` and `perturbation_seed`. Missing stream seeds are derived
//! from `seed` with [`rng::derive_seed`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExperimentKind {
    DynData,
    DynNetwork,
    InitCompare,
    Scaling,
    Degree,
    AbTable,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::DynData,
        ExperimentKind::DynNetwork,
        ExperimentKind::InitCompare,
        ExperimentKind::Scaling,
        ExperimentKind::Degree,
        ExperimentKind::AbTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::DynData => "dyn-data",
            ExperimentKind::DynNetwork => "dyn-network",
            ExperimentKind::InitCompare => "init-compare",
            ExperimentKind::Scaling => "scaling",
            ExperimentKind::Degree => "degree",
            ExperimentKind::AbTable => "ab-table",
        }
    }

    /// Name with `-` replaced by `_`, used as the CSV file prefix.
    pub fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown experiment kind `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// How node values evolve in the dynamic-data study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSchedule {
    /// Multiply every value by `scale` once, at `perturb_round`.
    Step,
    /// From `perturb_round` on, every round uses `y0 + noise * z` with fresh
    /// standard normal `z`.
    Noise,
    /// From `perturb_round` on, every round adds `noise * z` to the current values.
    Walk,
}

impl FromStr for DataSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "noise" => Ok(Self::Noise),
            "walk" => Ok(Self::Walk),
            _ => Err(Error::Config(format!(
                "field `schedule`: expected step, noise or walk, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for DataSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Step => "step",
            Self::Noise => "noise",
            Self::Walk => "walk",
        })
    }
}

/// How couplings change in the dynamic-network study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingSchedule {
    /// Fresh i.i.d. draws from `[q_min, q_max)`.
    Resample,
    /// `Q <- Q * (1 + q_noise * u)` with `u` uniform in `[-1, 1)`.
    Perturb,
}

impl FromStr for CouplingSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(Self::Resample),
            "perturb" => Ok(Self::Perturb),
            _ => Err(Error::Config(format!(
                "field `q_schedule`: expected resample or perturb, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for CouplingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Resample => "resample",
            Self::Perturb => "perturb",
        })
    }
}

/// What the degree study averages per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeMeasure {
    /// Dominant eigenvalue of the averaging kernel.
    Lambda,
    /// Measured contraction ratio of the affine averaging iteration.
    Q,
}

impl FromStr for DegreeMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Self::Lambda),
            "q" => Ok(Self::Q),
            _ => Err(Error::Config(format!("field `measure`: expected lambda or q, got `{s}`"))),
        }
    }
}

impl fmt::Display for DegreeMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lambda => "lambda",
            Self::Q => "q",
        })
    }
}

/// Eigenvalue method for the A/B table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    Dense,
    Power,
}

impl FromStr for EigenMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "power" => Ok(Self::Power),
            _ => Err(Error::Config(format!("field `method`: expected dense or power, got `{s}`"))),
        }
    }
}

impl fmt::Display for EigenMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Power => "power",
        })
    }
}

/// One seed per stochastic element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub graph: u64,
    pub couplings: u64,
    pub values: u64,
    pub perturbation: u64,
}

const SEED_FIELDS: [(&str, u64); 4] = [
    ("graph_seed", 1),
    ("coupling_seed", 2),
    ("value_seed", 3),
    ("perturbation_seed", 4),
];

impl Seeds {
    /// Stream seeds derived from one base seed.
    pub fn from_base(seed: u64) -> Self {
        let d = |label| rng::derive_seed(seed, label);
        Self {
            graph: d(SEED_FIELDS[0].1),
            couplings: d(SEED_FIELDS[1].1),
            values: d(SEED_FIELDS[2].1),
            perturbation: d(SEED_FIELDS[3].1),
        }
    }

    /// Seeds of ensemble member `member`.
    pub fn member(&self, member: usize) -> Self {
        let m = member as u64;
        Self {
            graph: rng::derive_seed(self.graph, m),
            couplings: rng::derive_seed(self.couplings, m),
            values: rng::derive_seed(self.values, m),
            perturbation: rng::derive_seed(self.perturbation, m),
        }
    }

    /// Seeds of the `slot`-th group of members (one per `n` or `c` value).
    pub fn group(&self, slot: usize) -> Self {
        let s = 0x5EED_0000_0000_0000u64 | slot as u64;
        Self {
            graph: rng::derive_seed(self.graph, s),
            couplings: rng::derive_seed(self.couplings, s),
            values: rng::derive_seed(self.values, s),
            perturbation: rng::derive_seed(self.perturbation, s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Seeds,

    // graph ensemble
    pub n: usize,
    pub c: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub beta: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub require_connected: bool,
    pub max_attempts: usize,

    // iteration
    pub tol: f64,
    pub max_iter: usize,
    /// Tolerance of reference fixed points (and of `K` convergence).
    pub reference_tol: f64,
    pub power_tol: f64,
    pub ensemble: usize,
    /// Worker threads for ensembles; 0 means one per core.
    pub jobs: usize,

    // dyn-data / dyn-network schedules
    pub rounds: usize,
    pub perturb_round: usize,
    pub scale: f64,
    pub schedule: DataSchedule,
    pub noise: f64,
    pub tracked_node: usize,
    pub q_schedule: CouplingSchedule,
    pub q_noise: f64,
    /// Rounds between coupling changes (first change at `perturb_round`).
    pub resample_period: usize,
    /// 2-norm of the injected `K`-only and `mu`-only perturbations.
    pub perturbation_norm: f64,
    /// `(n, c)` pairs for the manifold test and the A/B table.
    pub pairs: Vec<(usize, f64)>,

    // init-compare
    pub alphas: Vec<f64>,
    pub tracked_edge: (usize, usize),
    pub trace_rounds: usize,

    // scaling / degree / ab-table
    pub n_list: Vec<usize>,
    pub single_run_min_n: usize,
    pub c_list: Vec<f64>,
    pub measure: DegreeMeasure,
    pub method: EigenMethod,
}

/// Reference `(n, c)` pairs for the block-eigenvalue and manifold studies.
pub const TABLE_PAIRS: [(usize, f64); 4] = [(20, 18.0), (30, 14.0), (40, 10.0), (50, 8.0)];

impl ExperimentConfig {
    /// Defaults for `kind` with the given base seed.
    pub fn defaults(kind: ExperimentKind, seed: u64) -> Self {
        let mut cfg = Self {
            kind,
            seeds: Seeds::from_base(seed),
            n: 20,
            c: 8.0,
            q_min: 0.5,
            q_max: 2.0,
            beta: 100.0,
            y_min: 0.0,
            y_max: 10.0,
            require_connected: true,
            max_attempts: 1000,
            tol: 1e-10,
            max_iter: 1_000_000,
            reference_tol: 1e-13,
            power_tol: 1e-12,
            ensemble: 100,
            jobs: 1,
            rounds: 15_000,
            perturb_round: 5_000,
            scale: 0.9,
            schedule: DataSchedule::Step,
            noise: 0.01,
            tracked_node: 0,
            q_schedule: CouplingSchedule::Perturb,
            q_noise: 0.2,
            resample_period: 5_000,
            perturbation_norm: 0.1,
            pairs: TABLE_PAIRS.to_vec(),
            alphas: vec![0.5, 0.9, 1.0, 1.1],
            tracked_edge: (15, 10),
            trace_rounds: 500,
            n_list: vec![20, 40, 80, 160, 5000],
            single_run_min_n: 5000,
            c_list: vec![4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0],
            measure: DegreeMeasure::Lambda,
            method: EigenMethod::Power,
        };
        match kind {
            ExperimentKind::DynData => cfg.n = 500,
            ExperimentKind::DynNetwork => {
                cfg.n = 50;
                cfg.rounds = 10_000;
                cfg.perturb_round = 100;
                cfg.ensemble = 1;
            }
            ExperimentKind::InitCompare => {
                cfg.n = 80;
                cfg.tol = 1e-8;
                cfg.max_iter = 200_000;
            }
            ExperimentKind::AbTable => cfg.ensemble = 1,
            ExperimentKind::Scaling | ExperimentKind::Degree => {}
        }
        cfg
    }

    /// Reads a config; `kind` comes from the caller (the CLI subcommand) or,
    /// when `None`, from a `kind` key.
    pub fn from_kv(kind: Option<ExperimentKind>, kv: &KvConfig) -> Result<Self> {
        let kind = match (kind, kv.get::<String>("kind")?) {
            (Some(k), Some(named)) if named != k.name() => {
                return Err(Error::Config(format!(
                    "field `kind`: config says `{named}` but `{k}` was requested"
                )))
            }
            (Some(k), _) => k,
            (None, Some(named)) => named.parse()?,
            (None, None) => return Err(Error::Config("missing required field `kind`".into())),
        };

        let base: Option<u64> = kv.get("seed")?;
        let mut explicit = [None; 4];
        for (slot, (field, _)) in explicit.iter_mut().zip(SEED_FIELDS) {
            *slot = kv.get::<u64>(field)?;
        }
        let seeds = match base {
            Some(seed) => {
                let d = Seeds::from_base(seed);
                Seeds {
                    graph: explicit[0].unwrap_or(d.graph),
                    couplings: explicit[1].unwrap_or(d.couplings),
                    values: explicit[2].unwrap_or(d.values),
                    perturbation: explicit[3].unwrap_or(d.perturbation),
                }
            }
            None => {
                if let Some(i) = explicit.iter().position(Option::is_none) {
                    let name = if explicit.iter().all(Option::is_none) {
                        "seed"
                    } else {
                        SEED_FIELDS[i].0
                    };
                    return Err(Error::Config(format!("missing required field `{name}`")));
                }
                Seeds {
                    graph: explicit[0].unwrap_or_default(),
                    couplings: explicit[1].unwrap_or_default(),
                    values: explicit[2].unwrap_or_default(),
                    perturbation: explicit[3].unwrap_or_default(),
                }
            }
        };

        let mut cfg = Self::defaults(kind, 0);
        cfg.seeds = seeds;

        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.get(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(n);
        field!(q_min);
        field!(q_max);
        field!(beta);
        field!(y_min);
        field!(y_max);
        field!(require_connected);
        field!(max_attempts);
        field!(tol);
        field!(max_iter);
        field!(reference_tol);
        field!(power_tol);
        field!(ensemble);
        field!(jobs);
        field!(rounds);
        field!(perturb_round);
        field!(scale);
        field!(schedule);
        field!(noise);
        field!(tracked_node);
        field!(q_schedule);
        field!(q_noise);
        field!(resample_period);
        field!(perturbation_norm);
        field!(single_run_min_n);
        field!(measure);
        field!(method);
        field!(trace_rounds);

        match (kv.get::<f64>("c")?, kv.get::<f64>("p")?) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either `c` or `p`, not both".into()))
            }
            (Some(c), None) => cfg.c = c,
            (None, Some(p)) => cfg.c = p * cfg.n as f64,
            (None, None) => {}
        }
        if let Some(v) = kv.get_list("alphas")? {
            cfg.alphas = v;
        }
        if let Some(v) = kv.get_list("n_list")? {
            cfg.n_list = v;
        }
        if let Some(v) = kv.get_list("c_list")? {
            cfg.c_list = v;
        }
        if let Some(v) = kv.get_list::<usize>("tracked_edge")? {
            match v.as_slice() {
                [i, j] => cfg.tracked_edge = (*i, *j),
                _ => {
                    return Err(Error::Config(
                        "field `tracked_edge`: expected two node ids `i, j`".into(),
                    ))
                }
            }
        }
        if let Some(v) = kv.get_list::<String>("pairs")? {
            cfg.pairs = v.iter().map(|s| parse_pair(s)).collect::<Result<_>>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved parameters, suitable for [`from_kv`](Self::from_kv).
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(", ");
        kv.set("kind", self.kind);
        kv.set("graph_seed", self.seeds.graph);
        kv.set("coupling_seed", self.seeds.couplings);
        kv.set("value_seed", self.seeds.values);
        kv.set("perturbation_seed", self.seeds.perturbation);
        kv.set("n", self.n);
        kv.set("c", self.c);
        kv.set("q_min", self.q_min);
        kv.set("q_max", self.q_max);
        kv.set("beta", self.beta);
        kv.set("y_min", self.y_min);
        kv.set("y_max", self.y_max);
        kv.set("require_connected", self.require_connected);
        kv.set("max_attempts", self.max_attempts);
        kv.set("tol", self.tol);
        kv.set("max_iter", self.max_iter);
        kv.set("reference_tol", self.reference_tol);
        kv.set("power_tol", self.power_tol);
        kv.set("ensemble", self.ensemble);
        kv.set("jobs", self.jobs);
        kv.set("rounds", self.rounds);
        kv.set("perturb_round", self.perturb_round);
        kv.set("scale", self.scale);
        kv.set("schedule", self.schedule);
        kv.set("noise", self.noise);
        kv.set("tracked_node", self.tracked_node);
        kv.set("q_schedule", self.q_schedule);
        kv.set("q_noise", self.q_noise);
        kv.set("resample_period", self.resample_period);
        kv.set("perturbation_norm", self.perturbation_norm);
        kv.set(
            "pairs",
            self.pairs
                .iter()
                .map(|(n, c)| format!("{n}:{c}"))
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv.set("alphas", join(&self.alphas));
        kv.set("tracked_edge", format!("{}, {}", self.tracked_edge.0, self.tracked_edge.1));
        kv.set("trace_rounds", self.trace_rounds);
        kv.set(
            "n_list",
            self.n_list.iter().map(usize::to_string).collect::<Vec<_>>().join(", "),
        );
        kv.set("single_run_min_n", self.single_run_min_n);
        kv.set("c_list", join(&self.c_list));
        kv.set("measure", self.measure);
        kv.set("method", self.method);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("field `{field}`: {why}")));
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                bad(field, format!("must be positive, got {v}"))
            }
        };
        if self.n < 2 {
            return bad("n", format!("need at least 2 nodes, got {}", self.n));
        }
        positive("c", self.c)?;
        if self.c > self.n as f64 {
            return bad("c", format!("mean degree {} must not exceed n = {}", self.c, self.n));
        }
        positive("q_min", self.q_min)?;
        if !(self.q_max.is_finite() && self.q_max >= self.q_min) {
            return bad("q_max", format!("must be >= q_min, got {}", self.q_max));
        }
        positive("beta", self.beta)?;
        if !(self.y_min.is_finite() && self.y_max.is_finite() && self.y_max >= self.y_min) {
            return bad("y_max", format!("need finite y_min <= y_max, got [{}, {}]", self.y_min, self.y_max));
        }
        positive("tol", self.tol)?;
        positive("reference_tol", self.reference_tol)?;
        positive("power_tol", self.power_tol)?;
        if self.max_iter == 0 {
            return bad("max_iter", "must be at least 1".into());
        }
        if self.ensemble == 0 {
            return bad("ensemble", "must be at least 1".into());
        }
        if !(self.scale.is_finite()) {
            return bad("scale", format!("must be finite, got {}", self.scale));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise", format!("must be >= 0, got {}", self.noise));
        }
        if !(self.q_noise.is_finite() && self.q_noise >= 0.0) {
            return bad("q_noise", format!("must be >= 0, got {}", self.q_noise));
        }
        positive("perturbation_norm", self.perturbation_norm)?;
        if self.resample_period == 0 {
            return bad("resample_period", "must be at least 1".into());
        }
        for &(n, c) in &self.pairs {
            if n < 2 || !(c.is_finite() && c > 0.0 && c <= n as f64) {
                return bad("pairs", format!("invalid pair {n}:{c}"));
            }
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return bad("alphas", format!("scales must be finite and >= 0, got {a}"));
        }
        if let Some(c) = self.c_list.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return bad("c_list", format!("degrees must be positive, got {c}"));
        }
        if self.n_list.iter().any(|&n| n < 2) {
            return bad("n_list", "every size must be at least 2".into());
        }
        Ok(())
    }
}

fn parse_pair(s: &str) -> Result<(usize, f64)> {
    let err = || Error::Config(format!("field `pairs`: expected `n:c`, got `{s}`"));
    let (n, c) = s.split_once(':').ok_or_else(err)?;
    Ok((n.trim().parse().map_err(|_| err())?, c.trim().parse().map_err(|_| err())?))
}
