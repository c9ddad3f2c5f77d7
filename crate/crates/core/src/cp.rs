//! The Consensus Propagation message engine.
//!
//! Every directed edge `i -> j` carries a topology message `K_ij` and a local
//! state message `mu_ij`. One synchronous round computes, from the previous
//! round only,
//!
//! ```text
//! S_ij   = 1 + sum_{k in N(i)\j} K_ki
//! K'_ij  = S_ij / (1 + S_ij / (beta Q_ij))
//! mu'_ij = (y_i + sum_{k in N(i)\j} K_ki mu_ki) / S_ij
//! ```
//!
//! and each node reads out the belief
//! `(y_i + sum_{k in N(i)} K_ki mu_ki) / (1 + sum_{k in N(i)} K_ki)`.
//!
//! A round first accumulates the two full sums per node (incoming edges in
//! ascending index order) and then subtracts the excluded `j -> i` term per
//! outgoing edge, which keeps a round `O(|E|)`. Both passes write disjoint
//! slots, so the parallel path is bit-identical to the sequential one.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, NodeValues};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

/// Below this many directed edges the parallel path is not worth its overhead.
const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Messages indexed by [`DirectedEdgeIndex`](crate::graph::DirectedEdgeIndex).
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub k: Vec<f64>,
    pub mu: Vec<f64>,
}

impl MessageState {
    pub fn zeros(messages: usize) -> Self {
        Self {
            k: vec![0.0; messages],
            mu: vec![0.0; messages],
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// Max-norm distance over the concatenated `(K, mu)` vector.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs_diff(&self.k, &other.k).max(max_abs_diff(&self.mu, &other.mu))
    }

    pub fn check_for(&self, g: &Graph) -> Result<()> {
        let m = g.message_count();
        for (what, v) in [("K messages", &self.k), ("mu messages", &self.mu)] {
            if v.len() != m {
                return Err(Error::LengthMismatch {
                    what,
                    expected: m,
                    actual: v.len(),
                });
            }
        }
        if self.k.iter().chain(&self.mu).any(|v| !v.is_finite()) {
            return Err(invalid("messages", "all entries must be finite"));
        }
        Ok(())
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// A converged (or abandoned) run.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub state: MessageState,
    /// Max-norm change of the last round.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
    /// Per-round residuals, when requested.
    pub history: Vec<f64>,
}

/// Initial messages.
#[derive(Debug, Clone)]
pub enum InitScheme<'a> {
    Zero,
    /// `K = alpha K*`, `mu = alpha mu*`.
    ScaledFixedPoint {
        alpha: f64,
        reference: &'a FixedPoint,
    },
    Explicit { k: Vec<f64>, mu: Vec<f64> },
}

pub fn init_messages(g: &Graph, scheme: InitScheme<'_>) -> Result<MessageState> {
    let state = match scheme {
        InitScheme::Zero => MessageState::zeros(g.message_count()),
        InitScheme::ScaledFixedPoint { alpha, reference } => {
            if !(alpha.is_finite() && alpha >= 0.0) {
                return Err(invalid("alpha", format!("must be finite and >= 0, got {alpha}")));
            }
            let r = &reference.state;
            MessageState {
                k: r.k.iter().map(|v| alpha * v).collect(),
                mu: r.mu.iter().map(|v| alpha * v).collect(),
            }
        }
        InitScheme::Explicit { k, mu } => MessageState { k, mu },
    };
    state.check_for(g)?;
    if let Some(d) = state.k.iter().position(|&v| v < 0.0) {
        return Err(invalid("K", format!("message {d} is negative")));
    }
    Ok(state)
}

/// Per-node full incoming sums, reused across rounds.
#[derive(Debug, Clone, Default)]
pub struct NodeSums {
    k: Vec<f64>,
    k_mu: Vec<f64>,
}

impl NodeSums {
    pub fn new(n: usize) -> Self {
        Self {
            k: vec![0.0; n],
            k_mu: vec![0.0; n],
        }
    }

    fn fill(&mut self, g: &Graph, s: &MessageState, parallel: bool) {
        let idx = g.index();
        self.k.resize(g.n(), 0.0);
        self.k_mu.resize(g.n(), 0.0);
        let body = |(i, (sk, skm)): (usize, (&mut f64, &mut f64))| {
            let mut a = 0.0;
            let mut b = 0.0;
            for &d in idx.incoming(i) {
                a += s.k[d];
                b += s.k[d] * s.mu[d];
            }
            *sk = a;
            *skm = b;
        };
        if parallel {
            self.k
                .par_iter_mut()
                .zip(self.k_mu.par_iter_mut())
                .enumerate()
                .for_each(body);
        } else {
            self.k.iter_mut().zip(self.k_mu.iter_mut()).enumerate().for_each(body);
        }
    }

    /// Full belief numerator/denominator sums for node `i`.
    pub fn get(&self, i: usize) -> (f64, f64) {
        (self.k[i], self.k_mu[i])
    }
}

/// Sum over incoming topology messages excluding `j -> i`, for `d = i -> j`.
#[inline]
fn excluded_sum(node_sum: f64, k_reverse: f64) -> f64 {
    node_sum - k_reverse
}

#[inline]
pub(crate) fn topology_update(s: f64, beta_q: f64) -> f64 {
    s / (1.0 + s / beta_q)
}

fn should_parallelize(g: &Graph, parallel: bool) -> bool {
    parallel && g.message_count() >= PARALLEL_THRESHOLD
}

/// One synchronous round into `out`; `sums` is scratch.
pub fn step_into(
    g: &Graph,
    s: &MessageState,
    y: &NodeValues,
    out: &mut MessageState,
    sums: &mut NodeSums,
    parallel: bool,
) {
    let parallel = should_parallelize(g, parallel);
    sums.fill(g, s, parallel);
    let beta = g.beta();
    let src = g.index().sources();
    let yv = y.as_slice();
    out.k.resize(s.k.len(), 0.0);
    out.mu.resize(s.mu.len(), 0.0);
    let sums = &*sums;
    let body = |(d, (k_new, mu_new)): (usize, (&mut f64, &mut f64))| {
        let i = src[d];
        let r = d ^ 1;
        let s_ij = 1.0 + excluded_sum(sums.k[i], s.k[r]);
        let num = yv[i] + (sums.k_mu[i] - s.k[r] * s.mu[r]);
        *k_new = topology_update(s_ij, beta * g.coupling_of(d));
        *mu_new = num / s_ij;
    };
    if parallel {
        out.k
            .par_iter_mut()
            .zip(out.mu.par_iter_mut())
            .enumerate()
            .for_each(body);
    } else {
        out.k.iter_mut().zip(out.mu.iter_mut()).enumerate().for_each(body);
    }
}

/// One synchronous round of both message families.
pub fn step(g: &Graph, s: &MessageState, y: &NodeValues) -> MessageState {
    let mut out = MessageState::zeros(s.len());
    let mut sums = NodeSums::new(g.n());
    step_into(g, s, y, &mut out, &mut sums, false);
    out
}

/// One round of the topology messages alone. Produces exactly the `K` part
/// of [`step`], since the `K` update never reads `mu`.
pub fn step_topology(g: &Graph, k: &[f64]) -> Vec<f64> {
    let idx = g.index();
    let beta = g.beta();
    let node_sum: Vec<f64> = (0..g.n())
        .map(|i| {
            let mut a = 0.0;
            for &d in idx.incoming(i) {
                a += k[d];
            }
            a
        })
        .collect();
    (0..k.len())
        .map(|d| {
            let s_ij = 1.0 + excluded_sum(node_sum[idx.source(d)], k[d ^ 1]);
            topology_update(s_ij, beta * g.coupling_of(d))
        })
        .collect()
}

/// One round of the topology update written in deviation coordinates
/// around a fixed point: for `delta = K - K*` returns `K' - K*`.
///
/// With `S*` the excluded sums of `K*` and `sigma` those of `delta`
/// (without the leading 1), the update is exactly
/// `sigma_d / ((1 + S*_d / (beta Q_d)) (1 + (S*_d + sigma_d) / (beta Q_d)))`,
/// so deviations far below the rounding level of `K*` keep full relative
/// precision. Assumes `K*` is a fixed point of [`step_topology`].
pub fn topology_deviation_step(g: &Graph, s_star: &[f64], delta: &[f64]) -> Vec<f64> {
    let idx = g.index();
    let beta = g.beta();
    let node_sum: Vec<f64> = (0..g.n())
        .map(|i| idx.incoming(i).iter().map(|&d| delta[d]).sum())
        .collect();
    (0..delta.len())
        .map(|d| {
            let sigma = excluded_sum(node_sum[idx.source(d)], delta[d ^ 1]);
            let bq = beta * g.coupling_of(d);
            sigma / ((1.0 + s_star[d] / bq) * (1.0 + (s_star[d] + sigma) / bq))
        })
        .collect()
}

/// `S_ij = 1 + sum_{k in N(i)\j} K_ki` for every directed edge.
pub fn excluded_sums(g: &Graph, k: &[f64]) -> Vec<f64> {
    let idx = g.index();
    let node_sum: Vec<f64> = (0..g.n())
        .map(|i| idx.incoming(i).iter().map(|&d| k[d]).sum())
        .collect();
    (0..k.len())
        .map(|d| 1.0 + excluded_sum(node_sum[idx.source(d)], k[d ^ 1]))
        .collect()
}

pub fn beliefs(g: &Graph, s: &MessageState, y: &NodeValues) -> Vec<f64> {
    let mut sums = NodeSums::new(g.n());
    sums.fill(g, s, false);
    beliefs_from_sums(&sums, y)
}

fn beliefs_from_sums(sums: &NodeSums, y: &NodeValues) -> Vec<f64> {
    y.as_slice()
        .iter()
        .enumerate()
        .map(|(i, &yi)| (yi + sums.k_mu[i]) / (1.0 + sums.k[i]))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub record_history: bool,
    pub parallel: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            record_history: false,
            parallel: false,
        }
    }
}

impl RunOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Stateful iterator over CP rounds. Values and graph can be swapped between
/// rounds without touching the messages, which is how the dynamic-data and
/// dynamic-network experiments drive it.
#[derive(Debug)]
pub struct Propagator<'g> {
    graph: &'g Graph,
    values: NodeValues,
    state: MessageState,
    next: MessageState,
    sums: NodeSums,
    iteration: usize,
    parallel: bool,
}

impl<'g> Propagator<'g> {
    pub fn new(graph: &'g Graph, values: NodeValues, state: MessageState) -> Result<Self> {
        values.check_for(graph)?;
        state.check_for(graph)?;
        Ok(Self {
            graph,
            next: MessageState::zeros(state.len()),
            sums: NodeSums::new(graph.n()),
            values,
            state,
            iteration: 0,
            parallel: false,
        })
    }

    pub fn parallel(mut self, on: bool) -> Self {
        self.parallel = on;
        self
    }

    /// Runs one round and returns its max-norm change.
    pub fn advance(&mut self) -> f64 {
        step_into(
            self.graph,
            &self.state,
            &self.values,
            &mut self.next,
            &mut self.sums,
            self.parallel,
        );
        std::mem::swap(&mut self.state, &mut self.next);
        self.iteration += 1;
        self.state.max_abs_diff(&self.next)
    }

    pub fn state(&self) -> &MessageState {
        &self.state
    }

    /// The state before the last [`advance`](Self::advance).
    pub fn previous(&self) -> &MessageState {
        &self.next
    }

    pub fn values(&self) -> &NodeValues {
        &self.values
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn beliefs(&self) -> Vec<f64> {
        beliefs(self.graph, &self.state, &self.values)
    }

    /// Replaces the measurements; messages are left untouched.
    pub fn set_values(&mut self, values: NodeValues) -> Result<()> {
        values.check_for(self.graph)?;
        self.values = values;
        Ok(())
    }

    /// Continues on a graph with the same edge set (e.g. new couplings).
    pub fn rebind(self, graph: &Graph) -> Result<Propagator<'_>> {
        if graph.n() != self.graph.n() || graph.edges() != self.graph.edges() {
            return Err(Error::InvalidGraph(
                "rebinding requires the same node and edge set".into(),
            ));
        }
        Ok(Propagator {
            graph,
            values: self.values,
            state: self.state,
            next: self.next,
            sums: self.sums,
            iteration: self.iteration,
            parallel: self.parallel,
        })
    }

    pub fn set_state(&mut self, state: MessageState) -> Result<()> {
        state.check_for(self.graph)?;
        self.state = state;
        Ok(())
    }

    pub fn into_state(self) -> MessageState {
        self.state
    }
}

/// Iterates until the max-norm change of `(K, mu)` is at most `opts.tol` or
/// `opts.max_iter` rounds have run. Running out of rounds is not an error:
/// the result carries `converged = false`.
pub fn run_to_convergence(
    g: &Graph,
    s0: MessageState,
    y: &NodeValues,
    opts: RunOptions,
) -> Result<FixedPoint> {
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {}", opts.tol)));
    }
    let mut prop = Propagator::new(g, y.clone(), s0)?.parallel(opts.parallel);
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while prop.iteration() < opts.max_iter {
        residual = prop.advance();
        if opts.record_history {
            history.push(residual);
        }
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPoint {
        iterations: prop.iteration(),
        state: prop.into_state(),
        residual,
        converged,
        tol: opts.tol,
        history,
    })
}

/// Converged topology messages only.
#[derive(Debug, Clone)]
pub struct TopologyFixedPoint {
    pub k: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates the `K` update alone from `K = 0`. This is all the averaging
/// kernel needs, and it contracts much faster than the full iteration.
pub fn converge_topology(g: &Graph, tol: f64, max_iter: usize) -> Result<TopologyFixedPoint> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(invalid("tol", format!("must be positive, got {tol}")));
    }
    let mut k = vec![0.0; g.message_count()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = step_topology(g, &k);
        residual = max_abs_diff(&next, &k);
        k = next;
        iterations += 1;
        if residual <= tol {
            break;
        }
    }
    Ok(TopologyFixedPoint {
        k,
        residual,
        iterations,
        converged: residual <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node(beta: f64, q: f64) -> Graph {
        Graph::new(2, vec![(0, 1)], vec![q], beta).unwrap()
    }

    #[test]
    fn deviation_step_matches_direct_difference() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 2)], vec![1.0, 0.5, 2.0, 1.5], 10.0)
            .unwrap();
        let k_star = converge_topology(&g, 1e-15, 10_000).unwrap().k;
        let s_star = excluded_sums(&g, &k_star);
        let delta: Vec<f64> = (0..g.message_count()).map(|d| 0.01 * (d as f64 - 3.0)).collect();
        let perturbed: Vec<f64> = k_star.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let direct = step_topology(&g, &perturbed);
        let dev = topology_deviation_step(&g, &s_star, &delta);
        for d in 0..dev.len() {
            assert!((direct[d] - k_star[d] - dev[d]).abs() < 1e-12, "{d}");
        }
        // far below rounding the step stays exactly linear: sigma / (1 + S*/bQ)^2
        let tiny: Vec<f64> = delta.iter().map(|x| x * 1e-200).collect();
        let dev_tiny = topology_deviation_step(&g, &s_star, &tiny);
        let idx = g.index();
        for d in 0..dev.len() {
            let sigma: f64 = idx
                .incoming(idx.source(d))
                .iter()
                .filter(|&&e| e != d ^ 1)
                .map(|&e| delta[e])
                .sum();
            let gain = 1.0 + s_star[d] / (g.beta() * g.coupling_of(d));
            let linear = sigma / (gain * gain);
            let lin = dev_tiny[d] * 1e200;
            assert!((lin - linear).abs() <= 1e-12 * linear.abs().max(1e-3), "{d}: {lin} vs {linear}");
        }
    }

    fn path3() -> Graph {
        Graph::new(3, vec![(0, 1), (1, 2)], vec![1.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn zero_init() {
        let g = path3();
        let s = init_messages(&g, InitScheme::Zero).unwrap();
        assert!(s.k.iter().chain(&s.mu).all(|&v| v == 0.0));
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn explicit_init_validation() {
        let g = path3();
        let bad_len = InitScheme::Explicit {
            k: vec![0.0; 3],
            mu: vec![0.0; 4],
        };
        assert!(init_messages(&g, bad_len).is_err());
        let negative = InitScheme::Explicit {
            k: vec![0.0, -1.0, 0.0, 0.0],
            mu: vec![0.0; 4],
        };
        assert!(init_messages(&g, negative).is_err());
    }

    #[test]
    fn two_node_first_step() {
        let (beta, q) = (3.0, 2.0);
        let g = two_node(beta, q);
        let y = NodeValues::new(vec![1.5, -4.0]).unwrap();
        let s = step(&g, &MessageState::zeros(2), &y);
        let expected_k = 1.0 / (1.0 + 1.0 / (beta * q));
        assert_eq!(s.k, vec![expected_k, expected_k]);
        assert_eq!(s.mu, vec![1.5, -4.0]);
    }

    #[test]
    fn zero_k_resets_mu_to_values() {
        let g = path3();
        let y = NodeValues::new(vec![1.0, 2.0, 3.0]).unwrap();
        let s = MessageState {
            k: vec![0.0; 4],
            mu: vec![9.0, -7.0, 100.0, 0.5],
        };
        let next = step(&g, &s, &y);
        for d in 0..4 {
            assert_eq!(next.mu[d], y[g.index().source(d)]);
        }
    }

    #[test]
    fn path_two_steps_by_hand() {
        // Round 1 from K = 0: every K = 1/(1+1) = 1/2.
        // Round 2: K_10 has N(1)\0 = {2}, S = 1 + K_21 = 3/2, K = S/(1+S) = 3/5.
        let g = path3();
        let y = NodeValues::uniform(3, 0.0).unwrap();
        let s1 = step(&g, &MessageState::zeros(4), &y);
        assert!(s1.k.iter().all(|&k| k == 0.5));
        let s2 = step(&g, &s1, &y);
        let d10 = g.directed(1, 0).unwrap();
        assert!((s2.k[d10] - 0.6).abs() < 1e-15);
        // leaves keep 1/2
        let d01 = g.directed(0, 1).unwrap();
        assert_eq!(s2.k[d01], 0.5);
    }

    #[test]
    fn beliefs_with_zero_k_are_values() {
        let g = path3();
        let y = NodeValues::new(vec![1.0, 5.0, -2.0]).unwrap();
        assert_eq!(beliefs(&g, &MessageState::zeros(4), &y), y.as_slice());
    }

    #[test]
    fn beliefs_at_uniform_consensus() {
        let g = path3();
        let y = NodeValues::uniform(3, 4.25).unwrap();
        let fp = run_to_convergence(&g, MessageState::zeros(4), &y, RunOptions::default()).unwrap();
        assert!(fp.state.mu.iter().all(|&m| (m - 4.25).abs() < 1e-12));
        for b in beliefs(&g, &fp.state, &y) {
            assert!((b - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_converges_and_is_fixed() {
        let g = two_node(10.0, 1.3);
        let y = NodeValues::new(vec![0.0, 2.0]).unwrap();
        let opts = RunOptions::with_tol(1e-12);
        let fp = run_to_convergence(&g, MessageState::zeros(2), &y, opts).unwrap();
        assert!(fp.converged);
        assert!(fp.residual <= 1e-12);
        let again = step(&g, &fp.state, &y);
        assert!(again.max_abs_diff(&fp.state) <= 1e-12);
        let rerun = run_to_convergence(&g, fp.state.clone(), &y, opts).unwrap();
        assert!(rerun.converged);
        assert!(rerun.iterations <= 1);
    }

    #[test]
    fn scaled_init_identities() {
        let g = path3();
        let y = NodeValues::new(vec![1.0, 2.0, 4.0]).unwrap();
        let fp = run_to_convergence(&g, MessageState::zeros(4), &y, RunOptions::default()).unwrap();
        let one = init_messages(&g, InitScheme::ScaledFixedPoint { alpha: 1.0, reference: &fp }).unwrap();
        assert_eq!(one, fp.state);
        let zero = init_messages(&g, InitScheme::ScaledFixedPoint { alpha: 0.0, reference: &fp }).unwrap();
        assert_eq!(zero, init_messages(&g, InitScheme::Zero).unwrap());
        assert!(init_messages(&g, InitScheme::ScaledFixedPoint { alpha: -1.0, reference: &fp }).is_err());
    }

    #[test]
    fn max_iter_is_reported_not_raised() {
        let g = path3();
        let y = NodeValues::new(vec![1.0, 2.0, 4.0]).unwrap();
        let opts = RunOptions {
            max_iter: 1,
            ..RunOptions::default()
        };
        let fp = run_to_convergence(&g, MessageState::zeros(4), &y, opts).unwrap();
        assert!(!fp.converged);
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn isolated_node_belief_is_its_value() {
        let g = Graph::new(3, vec![(0, 1)], vec![1.0], 5.0).unwrap();
        let y = NodeValues::new(vec![1.0, 3.0, 7.0]).unwrap();
        let fp = run_to_convergence(&g, MessageState::zeros(2), &y, RunOptions::default()).unwrap();
        assert_eq!(beliefs(&g, &fp.state, &y)[2], 7.0);
    }

    #[test]
    fn topology_step_matches_joint_step() {
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3), (0, 2)], vec![0.7, 1.9, 1.1, 0.5], 30.0)
            .unwrap();
        let y = NodeValues::new(vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut s = MessageState::zeros(g.message_count());
        let mut k = s.k.clone();
        for _ in 0..50 {
            s = step(&g, &s, &y);
            k = step_topology(&g, &k);
            assert_eq!(s.k, k);
        }
    }
}
