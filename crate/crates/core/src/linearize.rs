//! Linearization of one CP round around a fixed point.
//!
//! With the state ordered `(mu, K)`, the Jacobian of the round map is block
//! upper triangular,
//!
//! ```text
//! R' = [ A  C ]      A = d mu'/d mu,  C = d mu'/d K,
//!      [ 0  B ]      B = d K'/d K,    d K'/d mu = 0.
//! ```
//!
//! For row `i -> j` and column `k -> i` with `k != j`, writing
//! `S_ij = 1 + sum_{k in N(i)\j} K_ki`:
//!
//! ```text
//! A = K_ki / S_ij
//! B = 1 / (1 + S_ij / (beta Q_ij))^2
//! C = (mu_ki - mu'_ij) / S_ij
//! ```
//!
//! Every other entry is zero. Once `K` has converged, the `mu` update is the
//! affine map `mu -> b + A mu` with `b_ij = y_i / S_ij`.

use faer::Mat;

use crate::cp::{excluded_sums, step, FixedPoint, MessageState};
use crate::error::{invalid, Error, Result};
use crate::graph::{DirectedEdgeIndex, Graph, NodeValues};
use crate::sparse::{CsrBuilder, CsrMatrix};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Residual above which an affine decomposition is considered stale.
pub const AFFINE_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct JacobianBlocks {
    /// `d mu' / d mu`
    pub a: CsrMatrix,
    /// `d K' / d K`
    pub b: CsrMatrix,
    /// `d mu' / d K`
    pub c: CsrMatrix,
    pub edge_index: DirectedEdgeIndex,
}

impl JacobianBlocks {
    /// Side length of each block, `2|E|`.
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Dense `[[A, C], [0, B]]`, `mu` coordinates first.
    pub fn assemble_dense(&self, budget: usize) -> Result<Mat<f64>> {
        let m = self.dim();
        if 2 * m > budget {
            return Err(Error::DenseBudget { dim: 2 * m, budget });
        }
        let mut r = Mat::zeros(2 * m, 2 * m);
        for (row, col, v) in self.a.triplets() {
            r[(row, col)] = v;
        }
        for (row, col, v) in self.c.triplets() {
            r[(row, m + col)] = v;
        }
        for (row, col, v) in self.b.triplets() {
            r[(m + row, m + col)] = v;
        }
        Ok(r)
    }
}

fn require_converged(fp: &FixedPoint) -> Result<()> {
    if fp.converged {
        Ok(())
    } else {
        Err(Error::NotConverged {
            residual: fp.residual,
            iterations: fp.iterations,
        })
    }
}

/// Column lists per row: for `d = i -> j`, the edges `k -> i` with `k != j`.
fn for_each_coupling(g: &Graph, mut f: impl FnMut(usize, usize)) {
    let idx = g.index();
    for d in 0..idx.len() {
        let i = idx.source(d);
        let reverse = d ^ 1;
        for &col in idx.incoming(i) {
            if col != reverse {
                f(d, col);
            }
        }
    }
}

fn nnz_estimate(g: &Graph) -> usize {
    (0..g.n())
        .map(|i| {
            let deg = g.degree(i);
            deg * deg.saturating_sub(1)
        })
        .sum()
}

/// The averaging kernel `A` for given topology messages.
pub fn averaging_kernel(g: &Graph, k: &[f64]) -> CsrMatrix {
    let s = excluded_sums(g, k);
    build_block(g, |d, col| k[col] / s[d])
}

/// The topology block `B` for given topology messages.
pub fn topology_kernel(g: &Graph, k: &[f64]) -> CsrMatrix {
    let s = excluded_sums(g, k);
    let beta = g.beta();
    build_block(g, |d, _| {
        let t = 1.0 + s[d] / (beta * g.coupling_of(d));
        1.0 / (t * t)
    })
}

fn build_block(g: &Graph, mut entry: impl FnMut(usize, usize) -> f64) -> CsrMatrix {
    let m = g.message_count();
    let mut b = CsrBuilder::with_capacity(m, m, nnz_estimate(g));
    let mut current = 0;
    for_each_coupling(g, |d, col| {
        while current < d {
            b.finish_row();
            current += 1;
        }
        b.push(col, entry(d, col));
    });
    while current < m {
        b.finish_row();
        current += 1;
    }
    b.build()
}

/// Analytic Jacobian blocks at a converged fixed point.
pub fn jacobian_blocks(g: &Graph, fp: &FixedPoint, y: &NodeValues) -> Result<JacobianBlocks> {
    require_converged(fp)?;
    fp.state.check_for(g)?;
    y.check_for(g)?;
    let MessageState { k, mu } = &fp.state;
    let s = excluded_sums(g, k);
    // mu' evaluated at the fixed point itself, i.e. the exact derivative
    // of the quotient at this state.
    let mu_next = step(g, &fp.state, y).mu;
    let a = build_block(g, |d, col| k[col] / s[d]);
    let beta = g.beta();
    let b = build_block(g, |d, _| {
        let t = 1.0 + s[d] / (beta * g.coupling_of(d));
        1.0 / (t * t)
    });
    let c = build_block(g, |d, col| (mu[col] - mu_next[d]) / s[d]);
    Ok(JacobianBlocks {
        a,
        b,
        c,
        edge_index: g.index().clone(),
    })
}

/// Central-difference Jacobian of [`step`] at `fp`, dense, `mu` coordinates
/// first. Coordinate `x` is perturbed by `h * max(1, |x|)`.
pub fn finite_diff_jacobian(
    g: &Graph,
    fp: &FixedPoint,
    y: &NodeValues,
    h: f64,
) -> Result<Mat<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    require_converged(fp)?;
    let m = g.message_count();
    let base = &fp.state;
    let mut out = Mat::zeros(2 * m, 2 * m);
    for col in 0..2 * m {
        let (is_mu, slot) = if col < m { (true, col) } else { (false, col - m) };
        let x0 = if is_mu { base.mu[slot] } else { base.k[slot] };
        let step_size = h * x0.abs().max(1.0);
        let eval = |delta: f64| {
            let mut s = base.clone();
            if is_mu {
                s.mu[slot] = x0 + delta;
            } else {
                s.k[slot] = x0 + delta;
            }
            step(g, &s, y)
        };
        let plus = eval(step_size);
        let minus = eval(-step_size);
        // the actual spacing after rounding of x0 +/- step
        let width = (x0 + step_size) - (x0 - step_size);
        for row in 0..m {
            out[(row, col)] = (plus.mu[row] - minus.mu[row]) / width;
            out[(m + row, col)] = (plus.k[row] - minus.k[row]) / width;
        }
    }
    Ok(out)
}

/// `mu -> offset + kernel mu`, the `mu` update with `K` frozen.
#[derive(Debug, Clone)]
pub struct AffineAveraging {
    pub kernel: CsrMatrix,
    pub offset: Vec<f64>,
    /// `S_ij` for every directed edge.
    pub s: Vec<f64>,
    sources: Vec<usize>,
}

impl AffineAveraging {
    /// Decomposition for frozen topology messages `k` and values `y`.
    pub fn from_topology(g: &Graph, k: &[f64], y: &NodeValues) -> Result<Self> {
        y.check_for(g)?;
        if k.len() != g.message_count() {
            return Err(Error::LengthMismatch {
                what: "K messages",
                expected: g.message_count(),
                actual: k.len(),
            });
        }
        let s = excluded_sums(g, k);
        let kernel = build_block(g, |d, col| k[col] / s[d]);
        let sources = g.index().sources().to_vec();
        let offset = sources.iter().zip(&s).map(|(&i, sd)| y[i] / sd).collect();
        Ok(Self {
            kernel,
            offset,
            s,
            sources,
        })
    }

    pub fn apply(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; mu.len()];
        self.apply_into(mu, &mut out);
        out
    }

    pub fn apply_into(&self, mu: &[f64], out: &mut [f64]) {
        self.kernel.matvec(mu, out);
        for (o, b) in out.iter_mut().zip(&self.offset) {
            *o += b;
        }
    }

    /// Same kernel with the offset recomputed for new values.
    pub fn with_values(&self, y: &NodeValues) -> Result<Self> {
        let n = self.sources.iter().copied().max().map_or(0, |m| m + 1);
        if y.len() < n {
            return Err(Error::LengthMismatch {
                what: "node values",
                expected: n,
                actual: y.len(),
            });
        }
        let offset = self.sources.iter().zip(&self.s).map(|(&i, sd)| y[i] / sd).collect();
        Ok(Self {
            offset,
            ..self.clone()
        })
    }

    /// Max-norm of `mu - (offset + kernel mu)`.
    pub fn residual(&self, mu: &[f64]) -> f64 {
        crate::cp::max_abs_diff(&self.apply(mu), mu)
    }
}

/// Affine decomposition at a converged fixed point, checked against `mu*`.
pub fn affine_averaging(g: &Graph, fp: &FixedPoint, y: &NodeValues) -> Result<AffineAveraging> {
    require_converged(fp)?;
    let aff = AffineAveraging::from_topology(g, &fp.state.k, y)?;
    let residual = aff.residual(&fp.state.mu);
    if residual > AFFINE_RESIDUAL_TOL {
        return Err(Error::Numerical(format!(
            "fixed point is stale: mu* violates the affine identity by {residual:e}"
        )));
    }
    Ok(aff)
}

/// Entrywise comparison of an analytic matrix against a finite-difference
/// estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianError {
    /// Max of `|analytic - fd| / max(|analytic|, floor)` over all entries.
    pub max_relative: f64,
    pub max_absolute: f64,
}

pub fn compare_dense(analytic: &Mat<f64>, estimate: &Mat<f64>, floor: f64) -> JacobianError {
    assert_eq!(analytic.nrows(), estimate.nrows());
    assert_eq!(analytic.ncols(), estimate.ncols());
    let mut max_relative: f64 = 0.0;
    let mut max_absolute: f64 = 0.0;
    for j in 0..analytic.ncols() {
        for i in 0..analytic.nrows() {
            let a = analytic[(i, j)];
            let e = (a - estimate[(i, j)]).abs();
            max_absolute = max_absolute.max(e);
            max_relative = max_relative.max(e / a.abs().max(floor));
        }
    }
    JacobianError {
        max_relative,
        max_absolute,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::{run_to_convergence, RunOptions};
    use crate::graph::{assign_couplings, generate_connected_erdos_renyi};

    fn instance(n: usize, c: f64, seed: u64) -> (Graph, NodeValues, FixedPoint) {
        let g = generate_connected_erdos_renyi(n, c, seed, 100).unwrap().graph;
        let g = assign_couplings(&g, 0.5, 2.0, seed + 1).unwrap().with_beta(100.0).unwrap();
        let y = NodeValues::random(n, 0.0, 10.0, seed + 2).unwrap();
        let fp = run_to_convergence(
            &g,
            MessageState::zeros(g.message_count()),
            &y,
            RunOptions::with_tol(1e-13),
        )
        .unwrap();
        assert!(fp.converged);
        (g, y, fp)
    }

    #[test]
    fn two_node_blocks_vanish() {
        let g = Graph::new(2, vec![(0, 1)], vec![1.0], 5.0).unwrap();
        let y = NodeValues::new(vec![1.0, 3.0]).unwrap();
        let fp = run_to_convergence(&g, MessageState::zeros(2), &y, RunOptions::default()).unwrap();
        let j = jacobian_blocks(&g, &fp, &y).unwrap();
        assert_eq!(j.a.nnz() + j.b.nnz() + j.c.nnz(), 0);
    }

    #[test]
    fn rejects_unconverged() {
        let g = Graph::new(2, vec![(0, 1)], vec![1.0], 5.0).unwrap();
        let y = NodeValues::new(vec![1.0, 3.0]).unwrap();
        let opts = RunOptions {
            max_iter: 1,
            ..RunOptions::with_tol(1e-300)
        };
        let fp = run_to_convergence(&g, MessageState::zeros(2), &y, opts).unwrap();
        assert!(matches!(jacobian_blocks(&g, &fp, &y), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn a_row_sums_and_structure() {
        let (g, y, fp) = instance(25, 6.0, 4);
        let j = jacobian_blocks(&g, &fp, &y).unwrap();
        let s = excluded_sums(&g, &fp.state.k);
        for (d, rs) in j.a.row_sums().iter().enumerate() {
            assert!((rs - (s[d] - 1.0) / s[d]).abs() < 1e-14);
            assert!(*rs < 1.0);
        }
        let expected_nnz: usize = (0..g.n()).map(|i| g.degree(i) * (g.degree(i).max(1) - 1)).sum();
        for block in [&j.a, &j.b, &j.c] {
            assert!(block.nnz() <= expected_nnz);
        }
        assert_eq!(j.a.nnz(), expected_nnz);
        assert_eq!(j.b.nnz(), expected_nnz);
        for (row, col, v) in j.a.triplets() {
            assert!(v >= 0.0);
            // column k -> i feeds row i -> j with k != j
            assert_eq!(g.index().target(col), g.index().source(row));
            assert_ne!(col, row ^ 1);
        }
        for (_, _, v) in j.b.triplets() {
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn matches_finite_differences() {
        let (g, y, fp) = instance(10, 4.0, 9);
        let j = jacobian_blocks(&g, &fp, &y).unwrap();
        let analytic = j.assemble_dense(4000).unwrap();
        let fd = finite_diff_jacobian(&g, &fp, &y, DEFAULT_FD_STEP).unwrap();
        let err = compare_dense(&analytic, &fd, 1.0);
        assert!(err.max_relative <= 1e-6, "{err:?}");
        let m = j.dim();
        for r in m..2 * m {
            for c in 0..m {
                assert!(fd[(r, c)].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn affine_identity_at_fixed_point() {
        let (g, y, fp) = instance(20, 5.0, 1);
        let aff = affine_averaging(&g, &fp, &y).unwrap();
        assert!(aff.residual(&fp.state.mu) <= AFFINE_RESIDUAL_TOL);
        for (d, b) in aff.offset.iter().enumerate() {
            assert_eq!(*b, y[g.index().source(d)] / aff.s[d]);
        }
    }

    #[test]
    fn affine_uniform_values() {
        let g = generate_connected_erdos_renyi(15, 4.0, 3, 100).unwrap().graph;
        let g = g.with_beta(50.0).unwrap();
        let y = NodeValues::uniform(15, 2.5).unwrap();
        let fp = run_to_convergence(&g, MessageState::zeros(g.message_count()), &y, RunOptions::default())
            .unwrap();
        assert!(fp.state.mu.iter().all(|&m| (m - 2.5).abs() < 1e-12));
        let aff = affine_averaging(&g, &fp, &y).unwrap();
        assert!(aff.residual(&vec![2.5; g.message_count()]) < 1e-13);
    }

    #[test]
    fn stale_fixed_point_is_rejected() {
        let (g, y, mut fp) = instance(12, 4.0, 2);
        fp.state.mu[0] += 1.0;
        assert!(affine_averaging(&g, &fp, &y).is_err());
    }
}
