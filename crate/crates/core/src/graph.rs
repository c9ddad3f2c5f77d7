//! Weighted undirected graphs, directed-edge indexing and Erdős-Rényi sampling.
//!
//! Undirected edges are stored sorted by `(min endpoint, max endpoint)`. The
//! directed edge `i -> j` of undirected edge number `e` (with `i < j`) gets
//! index `2e`, and `j -> i` gets `2e + 1`, so the reverse of directed edge `d`
//! is always `d ^ 1`.

use std::collections::VecDeque;

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::sparse::{CsrBuilder, CsrMatrix};

/// Bijection between directed edges and `0..2|E|`, plus per-node incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedEdgeIndex {
    source: Vec<usize>,
    target: Vec<usize>,
    // CSR over nodes: directed edges k -> i arriving at node i, ascending.
    in_ptr: Vec<usize>,
    in_edges: Vec<usize>,
}

impl DirectedEdgeIndex {
    fn build(n: usize, edges: &[(usize, usize)]) -> Self {
        let m = 2 * edges.len();
        let mut source = Vec::with_capacity(m);
        let mut target = Vec::with_capacity(m);
        for &(i, j) in edges {
            source.push(i);
            target.push(j);
            source.push(j);
            target.push(i);
        }
        let mut in_ptr = vec![0usize; n + 1];
        for &t in &target {
            in_ptr[t + 1] += 1;
        }
        for i in 0..n {
            in_ptr[i + 1] += in_ptr[i];
        }
        let mut fill = in_ptr.clone();
        let mut in_edges = vec![0usize; m];
        for (d, &t) in target.iter().enumerate() {
            in_edges[fill[t]] = d;
            fill[t] += 1;
        }
        Self {
            source,
            target,
            in_ptr,
            in_edges,
        }
    }

    /// Number of directed edges, `2|E|`.
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source(&self, d: usize) -> usize {
        self.source[d]
    }

    pub fn target(&self, d: usize) -> usize {
        self.target[d]
    }

    pub fn sources(&self) -> &[usize] {
        &self.source
    }

    /// The opposite direction of `d`.
    #[inline]
    pub fn reverse(d: usize) -> usize {
        d ^ 1
    }

    /// Undirected edge number of directed edge `d`.
    #[inline]
    pub fn undirected(d: usize) -> usize {
        d >> 1
    }

    /// Directed edges `k -> i` arriving at `i`.
    pub fn incoming(&self, i: usize) -> &[usize] {
        &self.in_edges[self.in_ptr[i]..self.in_ptr[i + 1]]
    }

    /// Directed edges `i -> j` leaving `i` (reverses of [`incoming`](Self::incoming)).
    pub fn outgoing(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.incoming(i).iter().map(|&d| d ^ 1)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.in_ptr[i + 1] - self.in_ptr[i]
    }
}

/// Undirected graph with per-edge couplings `Q` and a global coupling `beta`.
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    q: Vec<f64>,
    beta: f64,
    index: DirectedEdgeIndex,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.edges == other.edges
            && self.q == other.q
            && self.beta == other.beta
    }
}

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

impl Graph {
    /// Builds a graph from `(i, j)` pairs in any orientation and order; edges
    /// are normalized to `i < j` and sorted, carrying their couplings along.
    pub fn new(n: usize, edges: Vec<(usize, usize)>, q: Vec<f64>, beta: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("node count must be positive".into()));
        }
        if edges.len() != q.len() {
            return Err(Error::LengthMismatch {
                what: "couplings",
                expected: edges.len(),
                actual: q.len(),
            });
        }
        check_positive("beta", beta)?;
        let mut tagged: Vec<((usize, usize), f64)> = Vec::with_capacity(edges.len());
        for (&(i, j), &qij) in edges.iter().zip(&q) {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({i}, {j}) has an endpoint outside [0, {n})"
                )));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            if !(qij.is_finite() && qij > 0.0) {
                return Err(Error::InvalidGraph(format!(
                    "coupling of edge ({i}, {j}) must be positive and finite, got {qij}"
                )));
            }
            tagged.push(((i.min(j), i.max(j)), qij));
        }
        tagged.sort_by_key(|&(e, _)| e);
        if let Some(w) = tagged.windows(2).find(|w| w[0].0 == w[1].0) {
            let (i, j) = w[0].0;
            return Err(Error::InvalidGraph(format!("duplicate edge ({i}, {j})")));
        }
        let (edges, q): (Vec<_>, Vec<_>) = tagged.into_iter().unzip();
        Ok(Self::from_sorted(n, edges, q, beta))
    }

    fn from_sorted(n: usize, edges: Vec<(usize, usize)>, q: Vec<f64>, beta: f64) -> Self {
        let index = DirectedEdgeIndex::build(n, &edges);
        Self {
            n,
            edges,
            q,
            beta,
            index,
        }
    }

    /// Same edges with unit couplings and `beta = 1`.
    pub fn unweighted(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let q = vec![1.0; edges.len()];
        Self::new(n, edges, q, 1.0)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn couplings(&self) -> &[f64] {
        &self.q
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn index(&self) -> &DirectedEdgeIndex {
        &self.index
    }

    /// Number of directed messages, `2|E|`.
    pub fn message_count(&self) -> usize {
        self.index.len()
    }

    /// Coupling on the undirected edge carrying directed edge `d`.
    #[inline]
    pub fn coupling_of(&self, d: usize) -> f64 {
        self.q[d >> 1]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.index.degree(i)
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.edges.len() as f64 / self.n as f64
    }

    /// Directed index of `i -> j`, if `{i, j}` is an edge.
    pub fn directed(&self, i: usize, j: usize) -> Option<usize> {
        let key = (i.min(j), i.max(j));
        let e = self.edges.binary_search(&key).ok()?;
        Some(if i < j { 2 * e } else { 2 * e + 1 })
    }

    pub fn with_couplings(&self, q: Vec<f64>) -> Result<Self> {
        if q.len() != self.edges.len() {
            return Err(Error::LengthMismatch {
                what: "couplings",
                expected: self.edges.len(),
                actual: q.len(),
            });
        }
        if let Some((e, v)) = q.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            let (i, j) = self.edges[e];
            return Err(Error::InvalidGraph(format!(
                "coupling of edge ({i}, {j}) must be positive and finite, got {v}"
            )));
        }
        Ok(Self {
            q,
            ..self.clone()
        })
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        check_positive("beta", beta)?;
        Ok(Self {
            beta,
            ..self.clone()
        })
    }

    /// Connected-component label per node, labels in order of first node.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for &d in self.index.incoming(i) {
                    let k = self.index.source(d);
                    if label[k] == usize::MAX {
                        label[k] = next;
                        queue.push_back(k);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }
}

/// Measurement value per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeValues(Vec<f64>);

impl NodeValues {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = y.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(invalid("y", format!("value at node {i} is not finite ({v})")));
        }
        Ok(Self(y))
    }

    pub fn uniform(n: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n])
    }

    /// i.i.d. uniform values in `[lo, hi)`.
    pub fn random(n: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(invalid("y range", format!("need finite lo <= hi, got [{lo}, {hi}]")));
        }
        let mut r = rng::stream(seed);
        Self::new((0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }

    pub(crate) fn check_for(&self, g: &Graph) -> Result<()> {
        if self.0.len() != g.n() {
            return Err(Error::LengthMismatch {
                what: "node values",
                expected: g.n(),
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for NodeValues {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// An Erdős-Rényi draw with unit couplings and `beta = 1`.
#[derive(Debug, Clone)]
pub struct ErdosRenyiSample {
    pub graph: Graph,
    /// Edge probability `c / n`.
    pub p: f64,
    /// Realized mean degree `2|E| / n`.
    pub mean_degree: f64,
    /// Number of draws made (greater than one only when resampling for connectivity).
    pub attempts: usize,
}

/// Samples `G(n, p = c/n)`: every pair `i < j`, visited in lexicographic
/// order, consumes one uniform draw `u` and becomes an edge when `u < p`.
pub fn generate_erdos_renyi(n: usize, c: f64, seed: u64) -> Result<ErdosRenyiSample> {
    if n < 2 {
        return Err(invalid("n", format!("need at least 2 nodes, got {n}")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid("c", format!("mean degree must be positive, got {c}")));
    }
    // c = n (p = 1) is the complete graph; anything above is not a probability.
    if c > n as f64 {
        return Err(invalid("c", format!("mean degree {c} must not exceed n = {n}")));
    }
    let p = c / n as f64;
    let mut r = rng::stream(seed);
    let mut edges = Vec::with_capacity((p * (n * (n - 1)) as f64 / 2.0 * 1.1) as usize + 8);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng::unit(&mut r) < p {
                edges.push((i, j));
            }
        }
    }
    let q = vec![1.0; edges.len()];
    let graph = Graph::from_sorted(n, edges, q, 1.0);
    Ok(ErdosRenyiSample {
        mean_degree: graph.mean_degree(),
        graph,
        p,
        attempts: 1,
    })
}

/// Like [`generate_erdos_renyi`] but redraws until the graph is connected.
/// Attempt `k > 0` uses seed `derive_seed(seed, k)`.
pub fn generate_connected_erdos_renyi(
    n: usize,
    c: f64,
    seed: u64,
    max_attempts: usize,
) -> Result<ErdosRenyiSample> {
    for attempt in 0..max_attempts.max(1) {
        let s = if attempt == 0 {
            seed
        } else {
            rng::derive_seed(seed, attempt as u64)
        };
        let mut sample = generate_erdos_renyi(n, c, s)?;
        if sample.graph.is_connected() {
            sample.attempts = attempt + 1;
            return Ok(sample);
        }
    }
    Err(Error::InvalidGraph(format!(
        "no connected G({n}, c={c}) found in {max_attempts} attempts from seed {seed}"
    )))
}

/// Replaces every coupling with an independent uniform draw in `[q_min, q_max)`,
/// edges visited in stored order. A degenerate interval yields exactly `q_min`.
pub fn assign_couplings(g: &Graph, q_min: f64, q_max: f64, seed: u64) -> Result<Graph> {
    check_positive("q_min", q_min)?;
    if !(q_max.is_finite() && q_max >= q_min) {
        return Err(invalid("q_max", format!("need q_min <= q_max < inf, got [{q_min}, {q_max}]")));
    }
    let mut r = rng::stream(seed);
    let q = (0..g.edge_count())
        .map(|_| rng::uniform(&mut r, q_min, q_max))
        .collect();
    g.with_couplings(q)
}

/// `L_ii = sum_j Q_ij`, `L_ij = -Q_ij`.
pub fn weighted_laplacian(g: &Graph) -> CsrMatrix {
    let idx = g.index();
    let mut b = CsrBuilder::with_capacity(g.n(), g.n(), g.n() + idx.len());
    for i in 0..g.n() {
        let mut diag = 0.0;
        for d in idx.outgoing(i) {
            let q = g.coupling_of(d);
            diag += q;
            b.push(idx.target(d), -q);
        }
        b.push(i, diag);
        b.finish_row();
    }
    b.build()
}
