//! Cross-module invariants: the tail-projection identity behind the
//! small-market distances, and scheduler independence of the solvers.

use bsdelab::bsde::{solve_bsde, solution_diff, weighted_norms, DriverSpec};
use bsdelab::frame::gram_schmidt_frame;
use bsdelab::hedging::{attainable_claim, build_market, solve_hedge};
use bsdelab::kernel::CovarianceKernel;
use bsdelab::measure::{FiniteMeasure, Maturity};
use bsdelab::stochastic::martingale_path;
use bsdelab::tree::{BranchingDesign, Clock, Predictable, ScenarioTree, DEFAULT_NODE_CAP};

fn m(v: f64) -> Maturity {
    Maturity::new(v).unwrap()
}

fn build(steps: usize, delta: f64, factors: usize) -> ScenarioTree {
    ScenarioTree::build(
        Clock::uniform(steps, delta).unwrap(),
        factors,
        BranchingDesign::FullBinary,
        DEFAULT_NODE_CAP,
    )
    .unwrap()
}

/// For a driver that does not depend on `(y, h)`, the small-market integrand
/// is the frame truncation of the full one, so the weighted `H` distance
/// decomposes through per-node tail norms.
#[test]
fn h_distance_equals_weighted_tail_norms() {
    let tree = build(3, 0.2, 3);
    let kernel = CovarianceKernel::poly(vec![
        vec![1.0, 0.2],
        vec![0.1, 0.9],
        vec![0.05, -0.6, 0.8],
    ]);
    let driver = DriverSpec::zero(3);
    let beta = 4.0;
    let points = [m(0.2), m(0.5), m(0.8), m(1.0)];

    // A claim mixing the maturities.
    let weights = [1.0, -0.6, 0.4, 0.9];
    let paths: Vec<_> = points
        .iter()
        .map(|&x| martingale_path(&tree, &kernel, x).unwrap())
        .collect();
    let xi: Vec<f64> = (0..tree.leaf_count())
        .map(|leaf| {
            paths
                .iter()
                .zip(&weights)
                .map(|(p, w)| w * p.terminal()[leaf])
                .sum::<f64>()
                .tanh()
        })
        .collect();

    let full = solve_bsde(&tree, &kernel, &driver, &xi, &points).unwrap();
    let k_levels = driver.k_levels(tree.clock());
    for n in 1..points.len() {
        let small = solve_bsde(&tree, &kernel, &driver, &xi, &points[..n]).unwrap();
        let (y, mats, coeffs, resid) = solution_diff(&full, &small);
        let h_dist = weighted_norms(&tree, &kernel, &driver, beta, &y, &mats, &coeffs, &resid).h_sq;

        // Independent route: per-node tail of the full integrand beyond the
        // first n frame members.
        let mut tail_sum = 0.0;
        for s in 1..=tree.steps() {
            let weight = (beta * k_levels[s - 1]).exp();
            let da = tree.clock().delta(s);
            for v in 0..tree.level_len(s - 1) {
                let frame = gram_schmidt_frame(&kernel, s, v, &points).unwrap();
                let h_measure = full.integrand_measure(s, v);
                let tail = frame.tail_norm_sq(&h_measure, n).unwrap();
                tail_sum += weight * tree.path_prob(s - 1, v) * tail * da;
            }
        }
        assert!(
            (h_dist - tail_sum).abs() <= 1e-9 * (1.0 + h_dist.abs()),
            "n={n}: h distance {h_dist} vs tail route {tail_sum}"
        );
    }
}

/// The backward solvers and the hedge construction produce bit-identical
/// results under different thread pools.
#[test]
fn solvers_independent_of_thread_count() {
    let tree = build(3, 0.2, 2);
    let kernel = CovarianceKernel::poly(vec![vec![1.0, 0.2], vec![0.1, 0.9]]);
    let points = vec![m(0.25), m(0.75), m(1.0)];
    let lambda = vec![FiniteMeasure::dirac(m(0.25), 0.4); 3];
    let market = build_market(tree, kernel, points.clone(), lambda).unwrap();
    let holdings = Predictable::from_steps(
        (1..=3)
            .map(|s| {
                (0..market.tree().level_len(s - 1))
                    .map(|_| FiniteMeasure::from_coeffs(&points, &[0.7, -0.4, 0.1 * s as f64]))
                    .collect()
            })
            .collect(),
    );
    let xi = attainable_claim(&market, &holdings, 0.5);

    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| solve_hedge(&market, xi.terminal(), 2).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.fs.initial_value.to_bits(), b.fs.initial_value.to_bits());
    assert_eq!(a.strategy.cost, b.strategy.cost);
    assert_eq!(a.strategy.bank, b.strategy.bank);
    assert_eq!(a.total_risk.to_bits(), b.total_risk.to_bits());
}
