//! Eigenvalue machinery for the linearized operator.
//!
//! Small instances get a full nonsymmetric eigendecomposition; large ones
//! get matrix-free power iteration on the averaging kernel, applied through
//! the same per-node sums as a CP round so one application costs `O(|E|)`.

use std::io::Write;

use faer::{linalg::solvers::Eigen, Mat};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::cp::excluded_sums;
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::rng;
use crate::sparse::DENSE_BUDGET;

#[derive(Debug, Clone, Copy)]
pub struct PowerOptions {
    /// Convergence threshold on the eigen-residual `|A v - lambda v| / |lambda|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerResult {
    /// Signed dominant eigenvalue estimate.
    pub eigenvalue: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// `|A v - lambda v|_2 / |lambda|` for the unit vector `v`.
    pub residual: f64,
    pub converged: bool,
}

impl PowerResult {
    pub fn modulus(&self) -> f64 {
        self.eigenvalue.abs()
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power iteration for the dominant real eigenvalue of a linear operator.
///
/// The start vector has i.i.d. uniform `(0, 1)` entries from `seed`, so it
/// overlaps the Perron vector of any nonnegative irreducible operator.
/// Exhausting `max_iter` returns `converged = false`. If the iterates never
/// line up with their image (a complex pair or a `±lambda` pair on the
/// spectral circle), the result is [`Error::NoDominantEigenvalue`].
pub fn power_iteration(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    dim: usize,
    opts: PowerOptions,
    seed: u64,
) -> Result<PowerResult> {
    if dim == 0 {
        return Err(invalid("dim", "operator dimension must be positive"));
    }
    let mut r = rng::stream(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| r.gen::<f64>() + f64::MIN_POSITIVE).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; dim];
    let mut eigenvalue = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        apply(&v, &mut w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(PowerResult {
                eigenvalue: 0.0,
                vector: v,
                iterations,
                residual: 0.0,
                converged: true,
            });
        }
        let rq: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let sign = if rq < 0.0 { -1.0 } else { 1.0 };
        eigenvalue = sign * nw;
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - eigenvalue * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / nw;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = sign * wi / nw;
        }
        if residual <= opts.tol {
            return Ok(PowerResult {
                eigenvalue,
                vector: v,
                iterations,
                residual,
                converged: true,
            });
        }
    }
    if residual > 0.5 {
        return Err(Error::NoDominantEigenvalue {
            modulus: eigenvalue.abs(),
            residual,
        });
    }
    Ok(PowerResult {
        eigenvalue,
        vector: v,
        iterations,
        residual,
        converged: false,
    })
}

/// Which Jacobian block a matrix-free operator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Block {
    A,
    B,
}

/// Matrix-free `A` or `B` for given topology messages.
#[derive(Debug, Clone)]
pub struct KernelOperator<'g> {
    graph: &'g Graph,
    block: Block,
    // A: K_c; B: 1 / (1 + S_d / (beta Q_d))^2 per row.
    weight: Vec<f64>,
    s: Vec<f64>,
}

impl<'g> KernelOperator<'g> {
    pub fn new(graph: &'g Graph, k: &[f64], block: Block) -> Result<Self> {
        if k.len() != graph.message_count() {
            return Err(Error::LengthMismatch {
                what: "K messages",
                expected: graph.message_count(),
                actual: k.len(),
            });
        }
        let s = excluded_sums(graph, k);
        let weight = match block {
            Block::A => k.to_vec(),
            Block::B => s
                .iter()
                .enumerate()
                .map(|(d, sd)| {
                    let t = 1.0 + sd / (graph.beta() * graph.coupling_of(d));
                    1.0 / (t * t)
                })
                .collect(),
        };
        Ok(Self {
            graph,
            block,
            weight,
            s,
        })
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let idx = self.graph.index();
        let n = self.graph.n();
        let mut node = vec![0.0; n];
        match self.block {
            Block::A => {
                for (i, acc) in node.iter_mut().enumerate() {
                    for &c in idx.incoming(i) {
                        *acc += self.weight[c] * x[c];
                    }
                }
                for (d, o) in out.iter_mut().enumerate() {
                    let r = d ^ 1;
                    *o = (node[idx.source(d)] - self.weight[r] * x[r]) / self.s[d];
                }
            }
            Block::B => {
                for (i, acc) in node.iter_mut().enumerate() {
                    for &c in idx.incoming(i) {
                        *acc += x[c];
                    }
                }
                for (d, o) in out.iter_mut().enumerate() {
                    *o = self.weight[d] * (node[idx.source(d)] - x[d ^ 1]);
                }
            }
        }
    }

    pub fn power_iteration(&self, opts: PowerOptions, seed: u64) -> Result<PowerResult> {
        power_iteration(|x, out| self.apply(x, out), self.dim(), opts, seed)
    }
}

/// Full eigendecomposition of a real square matrix.
#[derive(Debug, Clone)]
pub struct DenseSpectrum {
    pub values: Vec<Complex64>,
    /// Unit-norm eigenvectors as columns, in the order of `values`.
    pub vectors: Mat<Complex64>,
}

impl DenseSpectrum {
    pub fn vector(&self, j: usize) -> Vec<Complex64> {
        (0..self.vectors.nrows()).map(|i| self.vectors[(i, j)]).collect()
    }

    pub fn max_modulus(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Indices sorted by decreasing modulus.
    pub fn order_by_modulus(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].norm().total_cmp(&self.values[a].norm()));
        idx
    }

    /// Number of eigenvalues with a nonzero imaginary part above `tol`.
    pub fn complex_count(&self, tol: f64) -> usize {
        self.values.iter().filter(|z| z.im.abs() > tol).count()
    }
}

pub fn dense_spectrum(m: &Mat<f64>) -> Result<DenseSpectrum> {
    dense_spectrum_with_budget(m, DENSE_BUDGET)
}

pub fn dense_spectrum_with_budget(m: &Mat<f64>, budget: usize) -> Result<DenseSpectrum> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(invalid("matrix", format!("must be square, got {}x{}", n, m.ncols())));
    }
    if n > budget {
        return Err(Error::DenseBudget { dim: n, budget });
    }
    if n == 0 {
        return Ok(DenseSpectrum {
            values: Vec::new(),
            vectors: Mat::zeros(0, 0),
        });
    }
    let evd = Eigen::new_from_real(m.as_ref())
        .map_err(|e| Error::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S();
    let u = evd.U();
    let values: Vec<Complex64> = (0..n).map(|i| s[i]).collect();
    let mut vectors = Mat::<Complex64>::zeros(n, n);
    for j in 0..n {
        let norm = (0..n).map(|i| u[(i, j)].norm_sqr()).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for i in 0..n {
            vectors[(i, j)] = u[(i, j)] * scale;
        }
    }
    Ok(DenseSpectrum { values, vectors })
}

/// Euclidean length of the first `mu_dim` coordinates of `v / |v|`.
pub fn mu_subspace_projection(v: &[Complex64], mu_dim: usize) -> Result<f64> {
    if mu_dim > v.len() {
        return Err(invalid("mu_dim", format!("{mu_dim} exceeds vector length {}", v.len())));
    }
    let total: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    if total == 0.0 {
        return Err(invalid("eigenvector", "zero vector has no projection"));
    }
    let head: f64 = v[..mu_dim].iter().map(|z| z.norm_sqr()).sum();
    Ok((head / total).sqrt().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpectralMethod {
    Dense,
    Power,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    /// `(re, im)` pairs, largest modulus first; a single entry in power mode.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Projection of each eigenvector onto the `mu` coordinates; empty when
    /// the operator has no `mu`/`K` split.
    pub projections: Vec<f64>,
    pub method: SpectralMethod,
    pub residual: f64,
    pub iterations: usize,
}

impl SpectralReport {
    /// Dense report; `mu_dim` selects the coordinates counted as `mu`.
    pub fn from_dense(spec: &DenseSpectrum, mu_dim: Option<usize>) -> Result<Self> {
        let order = spec.order_by_modulus();
        let mut eigenvalues = Vec::with_capacity(order.len());
        let mut projections = Vec::new();
        for &j in &order {
            eigenvalues.push((spec.values[j].re, spec.values[j].im));
            if let Some(md) = mu_dim {
                projections.push(mu_subspace_projection(&spec.vector(j), md)?);
            }
        }
        Ok(Self {
            eigenvalues,
            projections,
            method: SpectralMethod::Dense,
            residual: 0.0,
            iterations: 0,
        })
    }

    pub fn from_power(res: &PowerResult) -> Self {
        Self {
            eigenvalues: vec![(res.eigenvalue, 0.0)],
            projections: Vec::new(),
            method: SpectralMethod::Power,
            residual: res.residual,
            iterations: res.iterations,
        }
    }

    pub fn max_modulus(&self) -> f64 {
        self.eigenvalues
            .iter()
            .map(|&(re, im)| re.hypot(im))
            .fold(0.0, f64::max)
    }

    /// Dense: `index,re,im,modulus,mu_projection` rows. Power: one summary line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        match self.method {
            SpectralMethod::Dense => {
                writeln!(out, "index,re,im,modulus,mu_projection")?;
                for (i, &(re, im)) in self.eigenvalues.iter().enumerate() {
                    let proj = self.projections.get(i).map_or(String::new(), |p| format!("{p:.17e}"));
                    writeln!(out, "{i},{re:.17e},{im:.17e},{:.17e},{proj}", re.hypot(im))?;
                }
            }
            SpectralMethod::Power => {
                writeln!(out, "method,modulus,residual,iterations")?;
                writeln!(
                    out,
                    "power,{:.17e},{:.3e},{}",
                    self.max_modulus(),
                    self.residual,
                    self.iterations
                )?;
            }
        }
        Ok(())
    }
}

/// How the transient is cut off before estimating the asymptotic ratio.
#[derive(Debug, Clone, Copy)]
pub struct TransientPolicy {
    /// Consecutive per-step ratios that must agree before the tail starts.
    pub stable_run: usize,
    /// Relative spread `max/min - 1` allowed within that run.
    pub stable_spread: f64,
    /// Minimum number of ratios in the averaging window.
    pub min_window: usize,
    /// Window length cap (`None`: everything above the noise floor).
    pub max_window: Option<usize>,
    /// Errors at or below `floor_factor * eps * e_0` are treated as noise.
    pub floor_factor: f64,
}

impl Default for TransientPolicy {
    fn default() -> Self {
        Self {
            stable_run: 20,
            stable_spread: 0.01,
            min_window: 50,
            max_window: None,
            floor_factor: 1e2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRatio {
    pub q: f64,
    /// Ratio indices `[start, end)`; ratio `n` is `e_{n+1} / e_n`.
    pub window: (usize, usize),
    pub per_step_ratios: Vec<f64>,
}

/// Geometric-mean contraction factor of an error history's tail.
pub fn convergence_ratio(errors: &[f64], policy: TransientPolicy) -> Result<ConvergenceRatio> {
    let e0 = errors.iter().copied().find(|e| *e > 0.0).unwrap_or(0.0);
    let floor = policy.floor_factor * f64::EPSILON * e0;
    // usable prefix: strictly above the floor
    let usable = errors.iter().take_while(|&&e| e > floor && e.is_finite()).count();
    if usable < 2 {
        return Err(Error::Numerical("error history too short".into()));
    }
    let ratios: Vec<f64> = errors[..usable].windows(2).map(|w| w[1] / w[0]).collect();
    let run = policy.stable_run.max(1);
    let start = (0..ratios.len().saturating_sub(run - 1))
        .find(|&s| {
            let w = &ratios[s..s + run];
            let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            lo > 0.0 && hi / lo - 1.0 < policy.stable_spread
        })
        .ok_or_else(|| {
            Error::Numerical("per-step ratios never stabilized above the noise floor".into())
        })?;
    let mut end = ratios.len();
    if let Some(cap) = policy.max_window {
        end = end.min(start + cap);
    }
    if end - start < policy.min_window {
        return Err(Error::Numerical(format!(
            "only {} post-transient ratios above the noise floor, need {}",
            end - start,
            policy.min_window
        )));
    }
    // telescoped geometric mean of e_{k+1}/e_k for k in [start, end)
    let q = (errors[end] / errors[start]).powf(1.0 / (end - start) as f64);
    Ok(ConvergenceRatio {
        q,
        window: (start, end),
        per_step_ratios: ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_identity() {
        let res = power_iteration(|x, y| y.copy_from_slice(x), 5, PowerOptions::default(), 3).unwrap();
        assert!(res.converged);
        assert!((res.eigenvalue - 1.0).abs() < 1e-15);
        assert_eq!(res.iterations, 1);
        // the start vector is returned unchanged (up to rounding)
        let mut r = rng::stream(3);
        let start: Vec<f64> = (0..5).map(|_| r.gen::<f64>() + f64::MIN_POSITIVE).collect();
        let ns = norm2(&start);
        for (a, b) in res.vector.iter().zip(&start) {
            assert!((a - b / ns).abs() < 1e-15);
        }
    }

    #[test]
    fn power_diagonal() {
        let d = [0.5, 0.9985];
        let opts = PowerOptions {
            tol: 1e-12,
            ..PowerOptions::default()
        };
        let res = power_iteration(
            |x, y| {
                y[0] = d[0] * x[0];
                y[1] = d[1] * x[1];
            },
            2,
            opts,
            1,
        )
        .unwrap();
        assert!((res.eigenvalue - 0.9985).abs() < 1e-12);
    }

    #[test]
    fn power_negative_dominant() {
        let res = power_iteration(
            |x, y| {
                y[0] = -2.0 * x[0];
                y[1] = 0.5 * x[1];
            },
            2,
            PowerOptions::default(),
            5,
        )
        .unwrap();
        assert!((res.eigenvalue + 2.0).abs() < 1e-10);
    }

    #[test]
    fn power_rotation_is_refused() {
        let opts = PowerOptions {
            tol: 1e-10,
            max_iter: 500,
        };
        let res = power_iteration(
            |x, y| {
                y[0] = -x[1];
                y[1] = x[0];
            },
            2,
            opts,
            0,
        );
        assert!(matches!(res, Err(Error::NoDominantEigenvalue { .. })));
    }

    #[test]
    fn power_zero_dim() {
        assert!(power_iteration(|_, _| {}, 0, PowerOptions::default(), 0).is_err());
    }

    #[test]
    fn dense_rotation() {
        let mut m = Mat::zeros(2, 2);
        m[(0, 1)] = -1.0;
        m[(1, 0)] = 1.0;
        let s = dense_spectrum(&m).unwrap();
        let mut ims: Vec<f64> = s.values.iter().map(|z| z.im).collect();
        ims.sort_by(f64::total_cmp);
        assert!((ims[0] + 1.0).abs() < 1e-14 && (ims[1] - 1.0).abs() < 1e-14);
        assert!(s.values.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14 && z.re.abs() < 1e-14));
        assert_eq!(s.complex_count(1e-12), 2);
        for j in 0..2 {
            let v = s.vector(j);
            let nrm: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            assert!((nrm - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_budget() {
        let m = Mat::<f64>::zeros(5, 5);
        assert!(matches!(
            dense_spectrum_with_budget(&m, 4),
            Err(Error::DenseBudget { dim: 5, budget: 4 })
        ));
    }

    #[test]
    fn dense_eigenpairs_satisfy_definition() {
        let mut m = Mat::zeros(4, 4);
        let entries = [
            (0, 1, 0.3), (1, 2, 0.5), (2, 0, 0.7), (3, 3, 0.1), (0, 3, 0.2), (2, 2, 0.05),
        ];
        for (r, c, v) in entries {
            m[(r, c)] = v;
        }
        let s = dense_spectrum(&m).unwrap();
        for j in 0..4 {
            let v = s.vector(j);
            for i in 0..4 {
                let mv: Complex64 = (0..4).map(|k| v[k] * m[(i, k)]).sum();
                assert!((mv - s.values[j] * v[i]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_extremes() {
        let mu_only = vec![Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8), Complex64::default(), Complex64::default()];
        let k_only = vec![Complex64::default(), Complex64::default(), Complex64::new(3.0, 0.0), Complex64::new(0.0, -4.0)];
        assert!((mu_subspace_projection(&mu_only, 2).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mu_subspace_projection(&k_only, 2).unwrap(), 0.0);
        let mixed = vec![Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)];
        assert!((mu_subspace_projection(&mixed, 1).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(mu_subspace_projection(&[Complex64::default(); 2], 1).is_err());
    }

    #[test]
    fn ratio_of_geometric_history() {
        let errors: Vec<f64> = (0..2000).map(|n| 0.9985f64.powi(n)).collect();
        let r = convergence_ratio(&errors, TransientPolicy::default()).unwrap();
        assert!((r.q - 0.9985).abs() < 1e-12);
        assert_eq!(r.window.0, 0);
    }

    #[test]
    fn ratio_skips_oscillating_transient() {
        // 40 steps of alternating growth/decay, then clean 0.95 decay
        let mut errors = vec![1.0];
        for n in 0..40 {
            let f = if n % 2 == 0 { 1.3 } else { 0.5 };
            errors.push(errors.last().unwrap() * f);
        }
        for _ in 0..400 {
            errors.push(errors.last().unwrap() * 0.95);
        }
        let r = convergence_ratio(&errors, TransientPolicy::default()).unwrap();
        assert!(r.window.0 >= 39);
        assert!((r.q - 0.95).abs() < 1e-12);
    }

    #[test]
    fn ratio_history_too_short() {
        let errors: Vec<f64> = (0..30).map(|n| 0.9f64.powi(n)).collect();
        assert!(convergence_ratio(&errors, TransientPolicy::default()).is_err());
        // floor reached after ~ 300 steps at 0.9: only the first part is usable
        let errors: Vec<f64> = (0..5000).map(|n| 0.5f64.powi(n)).collect();
        assert!(convergence_ratio(&errors, TransientPolicy::default()).is_err());
    }

    #[test]
    fn kernel_operator_matches_csr() {
        use crate::graph::{assign_couplings, generate_erdos_renyi};
        use crate::linearize::{averaging_kernel, topology_kernel};
        let g = generate_erdos_renyi(30, 5.0, 7).unwrap().graph;
        let g = assign_couplings(&g, 0.5, 2.0, 8).unwrap().with_beta(100.0).unwrap();
        let k: Vec<f64> = {
            let mut r = rng::stream(1);
            (0..g.message_count()).map(|_| 100.0 * r.gen::<f64>()).collect()
        };
        let x: Vec<f64> = {
            let mut r = rng::stream(2);
            (0..g.message_count()).map(|_| r.gen::<f64>() - 0.5).collect()
        };
        for (block, csr) in [(Block::A, averaging_kernel(&g, &k)), (Block::B, topology_kernel(&g, &k))] {
            let op = KernelOperator::new(&g, &k, block).unwrap();
            let mut free = vec![0.0; x.len()];
            op.apply(&x, &mut free);
            let stored = csr.mul_vec(&x);
            for (a, b) in free.iter().zip(&stored) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
