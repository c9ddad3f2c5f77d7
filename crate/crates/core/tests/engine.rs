mod common;

use common::{converge, dense_modes, instance, instance_with, max_abs_diff};
use cprop::cp::{beliefs, init_messages, run_to_convergence, step, InitScheme, Propagator, RunOptions};
use cprop::graph::{assign_couplings, generate_erdos_renyi, weighted_laplacian, NodeValues};
use cprop::linearize::averaging_kernel;
use cprop::oracle::exact_marginal_modes;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn messages_stay_bounded_and_in_the_hull(
        n in 2usize..30,
        c_frac in 0.1f64..1.0,
        beta_exp in 0i32..4,
        seed in any::<u64>(),
    ) {
        let c = (c_frac * n as f64).max(1.0).min(n as f64);
        let beta = 10f64.powi(beta_exp);
        let sample = generate_erdos_renyi(n, c, seed).unwrap();
        let g = assign_couplings(&sample.graph, 0.5, 2.0, seed ^ 1).unwrap().with_beta(beta).unwrap();
        let y = NodeValues::random(n, -5.0, 5.0, seed ^ 2).unwrap();
        let (lo, hi) = (y.min(), y.max());
        let mut prop = Propagator::new(&g, y.clone(), init_messages(&g, InitScheme::Zero).unwrap()).unwrap();
        for _ in 0..300 {
            prop.advance();
            let s = prop.state();
            for d in 0..g.message_count() {
                let cap = beta * g.coupling_of(d);
                prop_assert!(s.k[d] >= 0.0 && s.k[d] < cap, "K[{}] = {} vs cap {}", d, s.k[d], cap);
                prop_assert!(s.mu[d] >= lo && s.mu[d] <= hi, "mu[{}] = {} outside [{}, {}]", d, s.mu[d], lo, hi);
            }
            for b in prop.beliefs() {
                prop_assert!(b >= lo && b <= hi);
            }
        }
    }

    #[test]
    fn laplacian_quadratic_form(n in 2usize..25, seed in any::<u64>(), x_seed in any::<u64>()) {
        let sample = generate_erdos_renyi(n, (n as f64 / 2.0).max(1.0), seed).unwrap();
        let g = assign_couplings(&sample.graph, 0.5, 2.0, seed ^ 7).unwrap();
        let x = NodeValues::random(n, -1.0, 1.0, x_seed).unwrap();
        let x = x.as_slice();
        let l = weighted_laplacian(&g);
        let lx = l.mul_vec(x);
        let form: f64 = x.iter().zip(&lx).map(|(a, b)| a * b).sum();
        let direct: f64 = g
            .edges()
            .iter()
            .zip(g.couplings())
            .map(|(&(i, j), q)| q * (x[i] - x[j]).powi(2))
            .sum();
        prop_assert!((form - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        prop_assert!(l.row_sums().iter().all(|s| s.abs() <= 1e-12));
    }
}

#[test]
fn converged_beliefs_match_the_dense_solve() {
    let tol = 1e-12;
    for (t, &beta) in [10.0, 100.0, 1000.0].iter().enumerate() {
        for rep in 0..3u64 {
            let (g, y) = instance(40 + 20 * rep as usize, 6.0, beta, 100 * t as u64 + rep);
            let fp = converge(&g, &y, tol);
            let b = beliefs(&g, &fp.state, &y);
            let exact = dense_modes(&g, &y);
            // a contraction with factor |A|_inf leaves at most tol / (1 - |A|_inf)
            // of error behind a step of size tol; the factor 100 absorbs rounding
            let a_norm = averaging_kernel(&g, &fp.state.k).row_sums().into_iter().fold(0.0, f64::max);
            let bound = 100.0 * tol / (1.0 - a_norm);
            let err = max_abs_diff(&b, &exact);
            assert!(err <= bound, "beta {beta}: error {err:e} above {bound:e}");
            assert!(err <= 1e-7);
        }
    }
}

#[test]
fn library_oracle_matches_the_dense_solve() {
    for seed in 0..5 {
        let (g, y) = instance(60, 8.0, 1000.0, seed);
        let cg = exact_marginal_modes(&g, &y).unwrap();
        let lu = dense_modes(&g, &y);
        assert!(max_abs_diff(&cg, &lu) <= 1e-9);
    }
}

#[test]
fn beliefs_approach_the_mean_as_beta_grows() {
    // the exact modes deviate from the mean by O(1 / beta)
    let spread = |beta: f64| {
        let (g, y) = instance(30, 8.0, beta, 5);
        let fp = converge(&g, &y, 1e-9);
        let mean = y.mean();
        beliefs(&g, &fp.state, &y).iter().map(|b| (b - mean).abs()).fold(0.0, f64::max)
    };
    let (s2, s4) = (spread(1e2), spread(1e4));
    assert!(s4 <= 1e-2, "{s4}");
    assert!(s2 / s4 > 50.0, "{s2} vs {s4}");
}

#[test]
fn runs_are_bit_reproducible() {
    let (g, y) = instance(50, 8.0, 100.0, 11);
    let run = || converge(&g, &y, 1e-11);
    let a = run();
    let b = run();
    assert_eq!(a.state, b.state);
    assert_eq!(a.iterations, b.iterations);
    assert_eq!(a.residual.to_bits(), b.residual.to_bits());
}

#[test]
fn parallel_rounds_equal_sequential_rounds() {
    // large enough for the parallel path to engage
    let (g, y) = instance_with(5000, 8.0, 100.0, 3, (0.5, 2.0), (0.0, 10.0));
    let mut seq = Propagator::new(&g, y.clone(), init_messages(&g, InitScheme::Zero).unwrap()).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let mut par = Propagator::new(&g, y.clone(), init_messages(&g, InitScheme::Zero).unwrap())
        .unwrap()
        .parallel(true);
    for _ in 0..50 {
        let r1 = seq.advance();
        let r2 = pool.install(|| par.advance());
        assert_eq!(r1.to_bits(), r2.to_bits());
    }
    assert_eq!(seq.state(), par.state());
}

#[test]
fn fixed_point_is_stationary() {
    let (g, y) = instance(25, 8.0, 100.0, 2);
    let fp = converge(&g, &y, 1e-11);
    let next = step(&g, &fp.state, &y);
    assert!(next.max_abs_diff(&fp.state) <= 1e-11);
}

#[test]
fn uniform_values_are_a_fixed_belief_from_round_one() {
    let (g, _) = instance(30, 6.0, 100.0, 8);
    let y = NodeValues::uniform(30, 2.5).unwrap();
    let fp = run_to_convergence(&g, init_messages(&g, InitScheme::Zero).unwrap(), &y, RunOptions {
        max_iter: 1,
        ..RunOptions::default()
    })
    .unwrap();
    for b in beliefs(&g, &fp.state, &y) {
        assert!((b - 2.5).abs() <= 1e-15);
    }
}
