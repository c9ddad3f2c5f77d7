//! Instance builders and independent reference computations shared by the
//! integration tests. Nothing here calls the library code under test for
//! the quantity it checks: the linear solve, the finite-difference Jacobian
//! and the eigenvalue matching are written out directly.

#![allow(dead_code)]

use cprop::cp::{init_messages, run_to_convergence, step, FixedPoint, InitScheme, MessageState, RunOptions};
use cprop::graph::{assign_couplings, generate_connected_erdos_renyi, Graph, NodeValues};
use cprop::rng::derive_seed;
use num_complex::Complex64;

/// Connected `G(n, c/n)` with couplings `U[0.5, 2)`, values `U[0, 10)`.
pub fn instance(n: usize, c: f64, beta: f64, seed: u64) -> (Graph, NodeValues) {
    instance_with(n, c, beta, seed, (0.5, 2.0), (0.0, 10.0))
}

pub fn instance_with(
    n: usize,
    c: f64,
    beta: f64,
    seed: u64,
    q: (f64, f64),
    y: (f64, f64),
) -> (Graph, NodeValues) {
    let sample = generate_connected_erdos_renyi(n, c, derive_seed(seed, 1), 10_000).unwrap();
    let g = assign_couplings(&sample.graph, q.0, q.1, derive_seed(seed, 2))
        .unwrap()
        .with_beta(beta)
        .unwrap();
    let values = NodeValues::random(n, y.0, y.1, derive_seed(seed, 3)).unwrap();
    (g, values)
}

pub fn converge(g: &Graph, y: &NodeValues, tol: f64) -> FixedPoint {
    let fp = run_to_convergence(
        g,
        init_messages(g, InitScheme::Zero).unwrap(),
        y,
        RunOptions {
            tol,
            max_iter: 5_000_000,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert!(fp.converged, "no convergence: residual {}", fp.residual);
    fp
}

/// `(I + beta L_Q) x = y` by Gaussian elimination with partial pivoting.
pub fn dense_modes(g: &Graph, y: &NodeValues) -> Vec<f64> {
    let n = g.n();
    let mut m = vec![vec![0.0; n]; n];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (&(i, j), &q) in g.edges().iter().zip(g.couplings()) {
        let w = g.beta() * q;
        m[i][i] += w;
        m[j][j] += w;
        m[i][j] -= w;
        m[j][i] -= w;
    }
    solve(m, y.as_slice().to_vec())
}

/// Dense real solve by Gaussian elimination with partial pivoting.
pub fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        b.swap(col, pivot);
        let p = m[col][col];
        assert!(p != 0.0, "singular system");
        for r in col + 1..n {
            let f = m[r][col] / p;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x
}

/// Central differences of one CP round at `base`, row-major `2m x 2m`,
/// `mu` coordinates first; coordinate `x` moves by `h * max(1, |x|)`.
pub fn central_difference(g: &Graph, base: &MessageState, y: &NodeValues, h: f64) -> Vec<Vec<f64>> {
    let m = g.message_count();
    let mut jac = vec![vec![0.0; 2 * m]; 2 * m];
    for col in 0..2 * m {
        let read = |s: &MessageState| if col < m { s.mu[col] } else { s.k[col - m] };
        let x0 = read(base);
        let dx = h * x0.abs().max(1.0);
        let shifted = |delta: f64| {
            let mut s = base.clone();
            if col < m {
                s.mu[col] = x0 + delta;
            } else {
                s.k[col - m] = x0 + delta;
            }
            (read(&s), step(g, &s, y))
        };
        let (xp, plus) = shifted(dx);
        let (xm, minus) = shifted(-dx);
        let width = xp - xm;
        for row in 0..m {
            jac[row][col] = (plus.mu[row] - minus.mu[row]) / width;
            jac[m + row][col] = (plus.k[row] - minus.k[row]) / width;
        }
    }
    jac
}

/// Greedy one-to-one matching of two eigenvalue multisets; returns the
/// largest distance between matched pairs.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len(), "multisets differ in size");
    let mut used = vec![false; b.len()];
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&x, &y| a[y].norm().total_cmp(&a[x].norm()));
    let mut worst: f64 = 0.0;
    for i in order {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, z)| (j, (z - a[i]).norm()))
            .min_by(|p, q| p.1.total_cmp(&q.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(d);
    }
    worst
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
