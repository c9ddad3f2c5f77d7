//! Exact marginal modes of the Gauss-Markov model.
//!
//! The density `exp(-|x - y|^2 - beta sum_{ij} Q_ij (x_i - x_j)^2)` is
//! maximized where `(I + beta L_Q) x = y`, with `L_Q` the weighted Laplacian.
//! The system matrix is symmetric positive definite with eigenvalues >= 1,
//! so Jacobi-preconditioned conjugate gradients always applies.

use crate::error::{Error, Result};
use crate::graph::{weighted_laplacian, Graph, NodeValues};
use crate::sparse::CsrMatrix;

/// Target relative residual.
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ModeSolution {
    pub x: Vec<f64>,
    /// `|y - (I + beta L) x|_2 / |y|_2`.
    pub relative_residual: f64,
    /// `|y - (I + beta L) x|_2 / (|I + beta L|_1 |x|_2 + |y|_2)`.
    pub backward_error: f64,
    pub iterations: usize,
}

struct ShiftedLaplacian {
    laplacian: CsrMatrix,
    beta: f64,
}

impl ShiftedLaplacian {
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.laplacian.matvec(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + self.beta * *o;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.laplacian.nrows())
            .map(|i| 1.0 + self.beta * self.laplacian.get(i, i))
            .collect()
    }

    /// Induced 1-norm (max column sum) of `I + beta L`.
    fn norm1(&self) -> f64 {
        // symmetric, so row sums of absolute values suffice
        (0..self.laplacian.nrows())
            .map(|i| {
                self.laplacian
                    .row(i)
                    .map(|(c, v)| if c == i { (1.0 + self.beta * v).abs() } else { (self.beta * v).abs() })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `(I + beta L_Q) x = y`.
///
/// Succeeds once the relative residual is at most [`ORACLE_TOL`]; when the
/// conditioning (roughly `beta * lambda_max(L_Q)`) puts that out of reach of
/// double precision, a backward error at most `ORACLE_TOL` is accepted
/// instead.
pub fn solve_modes(g: &Graph, y: &NodeValues) -> Result<ModeSolution> {
    y.check_for(g)?;
    let n = g.n();
    let op = ShiftedLaplacian {
        laplacian: weighted_laplacian(g),
        beta: g.beta(),
    };
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let b = y.as_slice();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        return Ok(ModeSolution {
            x: vec![0.0; n],
            relative_residual: 0.0,
            backward_error: 0.0,
            iterations: 0,
        });
    }
    let a_norm = op.norm1();

    let mut x: Vec<f64> = b.iter().zip(&inv_diag).map(|(bi, di)| bi * di).collect();
    let mut ax = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];

    let true_residual = |x: &[f64], ax: &mut [f64], r: &mut [f64]| {
        op.apply(x, ax);
        for i in 0..n {
            r[i] = b[i] - ax[i];
        }
        norm2(r)
    };

    let max_iter = 20 * n + 1000;
    let mut iterations = 0;
    let mut best = (f64::INFINITY, x.clone());
    // Restarted from the true residual so rounding in the recurrence cannot
    // hide a stalled solve.
    for _restart in 0..4 {
        let res = true_residual(&x, &mut ax, &mut r);
        if res < best.0 {
            best = (res, x.clone());
        }
        if res <= ORACLE_TOL * b_norm {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while iterations < max_iter {
            iterations += 1;
            op.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            if norm2(&r) <= 0.1 * ORACLE_TOL * b_norm {
                break;
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_next = dot(&r, &z);
            let gamma = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + gamma * p[i];
            }
        }
    }
    let res = true_residual(&x, &mut ax, &mut r);
    if res < best.0 {
        best = (res, x);
    }
    let (res, x) = best;
    let relative_residual = res / b_norm;
    let backward_error = res / (a_norm * norm2(&x) + b_norm);
    if relative_residual > ORACLE_TOL && backward_error > ORACLE_TOL {
        return Err(Error::Numerical(format!(
            "mode solve stalled: relative residual {relative_residual:e}, backward error {backward_error:e}"
        )));
    }
    Ok(ModeSolution {
        x,
        relative_residual,
        backward_error,
        iterations,
    })
}

/// The exact per-node modes; see [`solve_modes`].
pub fn exact_marginal_modes(g: &Graph, y: &NodeValues) -> Result<Vec<f64>> {
    solve_modes(g, y).map(|s| s.x)
}
