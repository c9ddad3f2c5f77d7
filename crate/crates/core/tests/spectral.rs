mod common;

use common::{converge, instance, multiset_distance, solve};
use cprop::cp::converge_topology;
use cprop::experiments::{affine_ratio, ROUNDOFF_TAIL};
use cprop::linearize::{averaging_kernel, jacobian_blocks, topology_kernel};
use cprop::spectral::{dense_spectrum, mu_subspace_projection, Block, KernelOperator, PowerOptions, TransientPolicy};
use num_complex::Complex64;

const POWER: PowerOptions = PowerOptions {
    tol: 1e-13,
    max_iter: 2_000_000,
};

#[test]
fn dense_and_power_agree() {
    for (seed, &(n, c)) in [(20, 8.0), (30, 14.0), (40, 10.0), (50, 8.0), (60, 6.0)].iter().enumerate() {
        let (g, _) = instance(n, c, 100.0, 500 + seed as u64);
        let k = converge_topology(&g, 1e-14, 100_000).unwrap().k;
        for (block, m) in [(Block::A, averaging_kernel(&g, &k)), (Block::B, topology_kernel(&g, &k))] {
            let dense = dense_spectrum(&m.to_dense(4000).unwrap()).unwrap().max_modulus();
            let power = KernelOperator::new(&g, &k, block).unwrap().power_iteration(POWER, 9).unwrap();
            assert!(power.converged);
            assert!(
                (dense - power.modulus()).abs() <= 1e-8,
                "{block:?} n = {n}: dense {dense} vs power {}",
                power.modulus()
            );
        }
    }
}

#[test]
fn full_spectrum_splits_into_the_diagonal_blocks() {
    for seed in 0..3u64 {
        let (g, y) = instance(20, 8.0, 100.0, 600 + seed);
        let fp = converge(&g, &y, 1e-13);
        let blocks = jacobian_blocks(&g, &fp, &y).unwrap();
        let r = dense_spectrum(&blocks.assemble_dense(4000).unwrap()).unwrap();
        let a = dense_spectrum(&blocks.a.to_dense(4000).unwrap()).unwrap();
        let b = dense_spectrum(&blocks.b.to_dense(4000).unwrap()).unwrap();
        let union: Vec<Complex64> = a.values.iter().chain(&b.values).copied().collect();
        let mut moduli_r: Vec<f64> = r.values.iter().map(|z| z.norm()).collect();
        let mut moduli_u: Vec<f64> = union.iter().map(|z| z.norm()).collect();
        moduli_r.sort_by(f64::total_cmp);
        moduli_u.sort_by(f64::total_cmp);
        let worst = moduli_r
            .iter()
            .zip(&moduli_u)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-8, "moduli differ by {worst:e}");
        // and as complex numbers
        let d = multiset_distance(&r.values, &union);
        assert!(d <= 1e-8, "eigenvalues differ by {d:e}");
    }
}

#[test]
fn topology_eigenvectors_lift_into_the_full_jacobian() {
    let (g, y) = instance(20, 8.0, 100.0, 700);
    let fp = converge(&g, &y, 1e-13);
    let blocks = jacobian_blocks(&g, &fp, &y).unwrap();
    let m = blocks.dim();
    let b = dense_spectrum(&blocks.b.to_dense(4000).unwrap()).unwrap();
    let lead = b.order_by_modulus()[0];
    let lambda = b.values[lead];
    assert!(lambda.im.abs() <= 1e-12, "leading B eigenvalue {lambda} is not real");
    let lambda = lambda.re;
    // B is nonnegative, so its Perron vector can be taken real
    let raw = b.vector(lead);
    let phase = raw.iter().max_by(|p, q| p.norm().total_cmp(&q.norm())).unwrap().conj();
    let v_k: Vec<f64> = raw.iter().map(|z| (z * phase).re).collect();

    // (lambda I - A) w_mu = C v_K
    let a = blocks.a.to_dense(4000).unwrap();
    let cv = blocks.c.mul_vec(&v_k);
    let system: Vec<Vec<f64>> = (0..m)
        .map(|r| (0..m).map(|c| if r == c { lambda - a[(r, c)] } else { -a[(r, c)] }).collect())
        .collect();
    let w_mu = solve(system, cv);
    let w: Vec<f64> = w_mu.iter().chain(&v_k).copied().collect();

    let full = blocks.assemble_dense(4000).unwrap();
    let scale = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let residual = (0..2 * m)
        .map(|r| {
            let rw: f64 = (0..2 * m).map(|c| full[(r, c)] * w[c]).sum();
            (rw - lambda * w[r]).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    assert!(residual <= 1e-10 * scale, "residual {residual:e}");

    // the dense eigenvector of R for the same eigenvalue has the same mu share
    let r = dense_spectrum(&full).unwrap();
    let j = (0..r.values.len())
        .min_by(|&p, &q| (r.values[p] - lambda).norm().total_cmp(&(r.values[q] - lambda).norm()))
        .unwrap();
    let lifted: Vec<Complex64> = w.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let p_lift = mu_subspace_projection(&lifted, m).unwrap();
    let p_dense = mu_subspace_projection(&r.vector(j), m).unwrap();
    assert!((p_lift - p_dense).abs() <= 1e-6, "{p_lift} vs {p_dense}");
    assert!(p_lift < 1.0);
}

#[test]
fn leading_eigenvector_lives_in_the_mu_coordinates() {
    for seed in 0..3u64 {
        let (g, y) = instance(20, 8.0, 100.0, 800 + seed);
        let fp = converge(&g, &y, 1e-13);
        let blocks = jacobian_blocks(&g, &fp, &y).unwrap();
        let r = dense_spectrum(&blocks.assemble_dense(4000).unwrap()).unwrap();
        let lead = r.order_by_modulus()[0];
        let p = mu_subspace_projection(&r.vector(lead), blocks.dim()).unwrap();
        assert!(p > 0.99, "projection {p}");
    }
}

#[test]
fn measured_ratio_matches_lambda_a_and_is_window_stable() {
    let (g, y) = instance(50, 8.0, 100.0, 900);
    let k = converge_topology(&g, 1e-14, 100_000).unwrap().k;
    let lambda = KernelOperator::new(&g, &k, Block::A).unwrap().power_iteration(POWER, 1).unwrap().modulus();
    let q = affine_ratio(&g, &k, &y, 1_000_000, ROUNDOFF_TAIL).unwrap();
    assert!((q.q - lambda).abs() <= 1e-3, "q {} vs lambda {lambda}", q.q);
    let window = q.window.1 - q.window.0;
    for cap in [window / 2, window / 4] {
        let policy = TransientPolicy {
            max_window: Some(cap.max(ROUNDOFF_TAIL.min_window)),
            ..ROUNDOFF_TAIL
        };
        let alt = affine_ratio(&g, &k, &y, 1_000_000, policy).unwrap();
        // ratios compared as contraction rates 1 - q
        let rel = ((1.0 - alt.q) - (1.0 - q.q)).abs() / (1.0 - q.q);
        assert!(rel <= 0.2, "window {cap}: {} vs {}", alt.q, q.q);
    }
}
