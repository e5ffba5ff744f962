//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its runtime. Tolerances are pinned in the assertions.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::time::Instant;
use utilmax::config::Config;
use utilmax::demo::{self, PI_SQUARED_OVER_SIX};
use utilmax::engine::{
    expected_utility_of, solve, solve_with, verify_optimality, verify_uniqueness, SolveError,
    SolveOptions,
};
use utilmax::geometry::{self, dot};
use utilmax::measure::{envelope_check, martingale_measure, price_claim, Claim};
use utilmax::tree::{NodeSpec, ScenarioTree};
use utilmax::utility::UtilitySpec;

fn binomial_tree() -> ScenarioTree {
    demo::example73_tree()
}

/// Random arbitrage-free trees: per node the increments carry strictly
/// positive convex weights summing to zero, so zero lies in the relative
/// interior of the support hull by construction.
struct RandomTree {
    tree: ScenarioTree,
}

/// Increments on a dyadic lattice with an exactly vanishing strictly
/// positive combination, so zero sits in the relative interior of the hull
/// with no float fuzz: the exact-arithmetic arbitrage check must accept.
fn random_na_increments(rng: &mut ChaCha8Rng, d: usize, branches: usize) -> Vec<Vec<f64>> {
    loop {
        let dyadic = |rng: &mut ChaCha8Rng| -> f64 { rng.random_range(-16i32..=16) as f64 / 16.0 };
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| dyadic(rng)).collect() };
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(branches);
        if branches == 2 {
            let y = draw(rng);
            let s = rng.random_range(2i32..=16) as f64 / 8.0;
            ys.push(y.clone());
            ys.push(y.iter().map(|v| -s * v).collect());
        } else {
            let y1 = draw(rng);
            let y2 = draw(rng);
            let a = rng.random_range(2i32..=16) as f64 / 8.0;
            let b = rng.random_range(2i32..=16) as f64 / 8.0;
            // products and sums of these dyadics are exact in binary floats
            let y3: Vec<f64> =
                y1.iter().zip(y2.iter()).map(|(p, q)| -(a * p + b * q)).collect();
            ys.push(y1);
            ys.push(y2);
            ys.push(y3);
        }
        let distinct = ys
            .iter()
            .all(|y| y.iter().any(|v| v.abs() > 0.05))
            && (0..ys.len()).all(|i| {
                (i + 1..ys.len()).all(|j| {
                    ys[i].iter().zip(ys[j].iter()).any(|(a, b)| (a - b).abs() > 0.05)
                })
            });
        if distinct {
            return ys;
        }
    }
}

fn random_tree(seed: u64) -> RandomTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(1..=3usize);
    let d = rng.random_range(1..=2usize);
    let mut specs =
        vec![NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0; d] }];
    let mut frontier = vec![0usize]; // indices into specs
    let mut next_id = 1i64;
    for _t in 0..horizon {
        let mut new_frontier = Vec::new();
        for &pix in &frontier {
            let branches = rng.random_range(2..=3usize);
            let ys = random_na_increments(&mut rng, d, branches);
            let weights: Vec<f64> =
                (0..branches).map(|_| rng.random_range(1..=5) as f64).collect();
            let total: f64 = weights.iter().sum();
            for (y, w) in ys.iter().zip(weights.iter()) {
                let prices: Vec<f64> =
                    specs[pix].prices.iter().zip(y.iter()).map(|(p, v)| p + v).collect();
                specs.push(NodeSpec {
                    id: next_id,
                    parent: Some(specs[pix].id),
                    prob: w / total,
                    prices,
                });
                new_frontier.push(specs.len() - 1);
                next_id += 1;
            }
        }
        frontier = new_frontier;
    }
    let tree = ScenarioTree::from_parts(d, horizon, specs, 1_000_000).unwrap();
    RandomTree { tree }
}

static SERIAL: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Runs the timed body alone; the harness is parallel and the stated
/// runtime budgets are per-criterion wall clock.
fn serialized<T>(body: impl FnOnce() -> T) -> T {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    body()
}

fn pass(criterion: usize, label: &str, t0: Instant) {
    println!("criterion {criterion} ({label}): PASS ({:.2} s)", t0.elapsed().as_secs_f64());
}

#[test]
fn criterion_1_example73_reproduction() {
    serialized(|| {
    let t0 = Instant::now();
    let cfg = Config::default();
    let rep = demo::run_example73(250, 50, &[200.0], &cfg).unwrap();

    let mut prev = 0.0;
    for (k, row) in rep.rows.iter().enumerate() {
        let n = k + 1;
        let partial: f64 = (1..=n).map(|j| 1.0 / (j as f64 * j as f64)).sum();
        assert!(
            (row.expected_utility - partial).abs() <= 1e-12,
            "EU({n}) = {} vs {partial}",
            row.expected_utility
        );
        assert!(row.expected_utility > prev, "not strictly increasing at n = {n}");
        prev = row.expected_utility;
    }

    let s = &rep.solves[0];
    assert!(s.boundary_hit, "no boundary optimum reported at phi_max = 200");
    assert!(
        (s.root_value - PI_SQUARED_OVER_SIX).abs() <= 5e-3,
        "root {} vs pi^2/6 {}",
        s.root_value,
        PI_SQUARED_OVER_SIX
    );
    assert!(t0.elapsed().as_secs_f64() < 1.0, "runtime {:?}", t0.elapsed());
    pass(1, "Example 7.3 reproduction", t0);
    })
}

#[test]
fn criterion_2_closed_form_binomial() {
    serialized(|| {
    let t0 = Instant::now();
    let tree = binomial_tree();
    let u = UtilitySpec::exponential(1.0);
    let cfg =
        Config { n_grid: 1025, phi_max: 8.0, max_refine_rounds: 0, ..Config::default() };
    let r = solve(&tree, &u, 0.0, &cfg).unwrap();

    let phi_star = 3f64.ln() / 2.0;
    let value_star = 1.0 - 3f64.sqrt() / 2.0;
    assert!(
        (r.strategy[&0].ambient[0] - phi_star).abs() <= 1e-6,
        "phi {} vs {phi_star}",
        r.strategy[&0].ambient[0]
    );
    assert!((r.root_value - value_star).abs() <= 1e-6, "root {}", r.root_value);

    let m = martingale_measure(&r, &tree, &u, &cfg, false).unwrap();
    assert!((m.leaf_q[&1] - 0.5).abs() <= 1e-8);
    assert!((m.leaf_q[&2] - 0.5).abs() <= 1e-8);
    assert!(m.martingale_residuals[&0][0].abs() <= 1e-8);
    assert!(t0.elapsed().as_secs_f64() < 1.0, "runtime {:?}", t0.elapsed());
    pass(2, "closed-form binomial oracle", t0);
    })
}

#[test]
fn criterion_3_brute_force_equivalence() {
    serialized(|| {
    let t0 = Instant::now();
    let u = UtilitySpec::exponential(1.0);
    let cfg = Config { n_grid: 129, phi_max: 6.0, ..Config::default() };
    for seed in 0..20u64 {
        let rt = random_tree(seed);
        let capital = (seed as f64 % 3.0) - 1.0;
        let r = solve(&rt.tree, &u, capital, &cfg)
            .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        let rep =
            verify_optimality(&r, &rt.tree, &u, None, 10_000, 3.0, 42 + seed).unwrap();
        assert!(
            rep.max_advantage <= 1e-9,
            "seed {seed}: competitor beats root by {}",
            rep.max_advantage
        );
        if let Some(lb) = rep.lattice_best {
            assert!(lb <= r.root_value + 1e-9, "seed {seed}: lattice {lb} vs {}", r.root_value);
        }
    }
    assert!(t0.elapsed().as_secs_f64() < 60.0, "runtime {:?}", t0.elapsed());
    pass(3, "brute-force equivalence on 20 random trees", t0);
    })
}

#[test]
fn criterion_4_na_certification() {
    serialized(|| {
    let t0 = Instant::now();
    let cfg = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    for seed in 100..120u64 {
        let rt = random_tree(seed);
        let rep = geometry::validate_tree(&rt.tree, cfg.rank_tol, cfg.sphere_tol, cfg.seed);
        assert_eq!(rep.verdict, "no_arbitrage", "seed {seed}");
        for cert in &rep.certificates {
            assert!(cert.kappa > 0.0 && cert.beta > 0.0, "seed {seed} node {}", cert.node);
            // dense direction sweep can never find a direction whose
            // down-mass at the certified beta is below kappa
            let ix = rt.tree.index_of(cert.node).unwrap();
            let dist = rt.tree.conditional_dist(ix).unwrap();
            let (sub, _) = geometry::support_subspace(&dist, cfg.rank_tol);
            let coords: Vec<(Vec<f64>, f64)> =
                dist.increments.iter().map(|(y, p)| (sub.coords(y), *p)).collect();
            for _ in 0..10_000 {
                let p: Vec<f64> = {
                    let v: Vec<f64> =
                        (0..sub.dim()).map(|_| rng.random_range(-1.0f64..1.0)).collect();
                    let n = dot(&v, &v).sqrt();
                    if n < 1e-9 {
                        continue;
                    }
                    v.iter().map(|x| x / n).collect()
                };
                let mass: f64 = coords
                    .iter()
                    .filter(|(z, _)| dot(&p, z) < -cert.beta)
                    .map(|(_, pr)| pr)
                    .sum();
                assert!(
                    mass >= cert.kappa - 1e-12,
                    "seed {seed} node {}: direction {p:?} has mass {mass} < kappa {}",
                    cert.node,
                    cert.kappa
                );
            }
        }

        // seed an arbitrage node: shift one interior node's children so all
        // increments gain a strictly positive first component
        let ix = rt.tree.non_leaf_indices().next().unwrap();
        let bump: f64 = rt
            .tree
            .children(ix)
            .iter()
            .map(|&c| rt.tree.increment(c)[0].abs())
            .fold(0.0, f64::max)
            + 1.0;
        let mut specs = Vec::new();
        for i in 0..rt.tree.len() {
            let n = rt.tree.node(i);
            let mut prices = n.prices.clone();
            // shifting every strict descendant of ix moves the increments
            // into the open half-space {y_0 > 0} at ix only
            let mut anc = n.parent;
            let mut under = false;
            while let Some(p) = anc {
                if p == ix {
                    under = true;
                    break;
                }
                anc = rt.tree.node(p).parent;
            }
            if under || n.parent == Some(ix) {
                prices[0] += bump;
            }
            specs.push(NodeSpec {
                id: n.id,
                parent: n.parent.map(|p| rt.tree.node(p).id),
                prob: n.branch_prob,
                prices,
            });
        }
        let bad = ScenarioTree::from_parts(rt.tree.d(), rt.tree.horizon(), specs, 1_000_000)
            .unwrap();
        let rep = geometry::validate_tree(&bad, cfg.rank_tol, cfg.sphere_tol, cfg.seed);
        assert_eq!(rep.verdict, "arbitrage", "seed {seed}");
        let f = rep.arbitrage.unwrap();
        assert_eq!(f.node, bad.node(ix).id);
        let bix = bad.index_of(f.node).unwrap();
        let dist = bad.conditional_dist(bix).unwrap();
        let mut strict = false;
        for (y, _) in &dist.increments {
            let pay = dot(&f.witness, y);
            assert!(pay >= -1e-9, "witness not nonnegative: {pay}");
            if pay > 1e-9 {
                strict = true;
            }
        }
        assert!(strict, "witness has no strictly positive payoff");
    }
    assert!(t0.elapsed().as_secs_f64() < 10.0, "runtime {:?}", t0.elapsed());
    pass(4, "quantitative no-arbitrage certification", t0);
    })
}

#[test]
fn criterion_5_first_order_and_envelope() {
    serialized(|| {
    let t0 = Instant::now();
    let u = UtilitySpec::exponential(1.0);
    let cfg = Config { n_grid: 129, phi_max: 6.0, ..Config::default() };
    for seed in 0..20u64 {
        let rt = random_tree(seed);
        let r = solve(&rt.tree, &u, 0.0, &cfg).unwrap();
        if r.diagnostics.boundary_hit {
            continue; // first-order conditions only claimed at interior optima
        }
        let m = martingale_measure(&r, &rt.tree, &u, &cfg, false).unwrap();
        assert!(m.max_residual <= 1e-6, "seed {seed}: residual {}", m.max_residual);

        for n in rt.tree.non_leaf_indices() {
            let id = rt.tree.node(n).id;
            let e = envelope_check(&r, &rt.tree, &u, &cfg, id, 1e-4).unwrap();
            assert!(e.gap <= 1e-4, "seed {seed} node {id}: envelope gap {}", e.gap);
        }
    }
    pass(5, "first-order and envelope identities", t0);
    })
}

#[test]
fn criterion_6_structural_invariants() {
    serialized(|| {
    let t0 = Instant::now();

    // concavity/monotonicity of every stored value function, and the chain
    // inequality on the grid, across random trees
    let u = UtilitySpec::exponential(1.0);
    let cfg = Config { n_grid: 129, phi_max: 6.0, ..Config::default() };
    for seed in 0..10u64 {
        let rt = random_tree(seed);
        let r = solve(&rt.tree, &u, 0.0, &cfg).unwrap();
        for (id, f) in &r.value_fns {
            let xs = f.breakpoints();
            let ys = f.values();
            let mut prev = f64::INFINITY;
            for i in 1..xs.len() {
                let s = (ys[i] - ys[i - 1]) / (xs[i] - xs[i - 1]);
                assert!(s >= -1e-9, "node {id}: decreasing value function");
                assert!(s <= prev + 1e-7, "node {id}: convex kink");
                prev = s;
            }
        }
        for n in rt.tree.non_leaf_indices() {
            let id = rt.tree.node(n).id;
            let f = &r.value_fns[&id];
            for &x in f.breakpoints().iter().step_by(8) {
                let mix: f64 = rt
                    .tree
                    .children(n)
                    .iter()
                    .map(|&c| {
                        rt.tree.node(c).branch_prob * r.value_fns[&rt.tree.node(c).id].eval(x)
                    })
                    .sum();
                let tol = 1e-9 * (1.0 + mix.abs());
                assert!(f.eval(x) >= mix - tol, "chain at node {id}, x = {x}");
                assert!(
                    mix >= u.eval(x) - 1e-9 * (1.0 + u.eval(x).abs()),
                    "chain to U at node {id}, x = {x}"
                );
            }
        }
    }

    // scaling inequalities propagate to the value functions when the
    // utility passes the growth check (exponent 0.8 from threshold 10)
    let u_pow = UtilitySpec::linear_below_power_above(0.5);
    let rep = utilmax::check_ae_plus(&u_pow, 0.8, 10.0, &utilmax::SamplingPlan::default());
    assert!(rep.passed);
    let (gamma, c_const) = (0.8, rep.constant_c);
    let rt = random_tree(3);
    let cfg_pow = Config { n_grid: 257, phi_max: 6.0, ..Config::default() };
    let r = solve(&rt.tree, &u_pow, 0.0, &cfg_pow).unwrap();
    for f in r.value_fns.values() {
        let tol = f.interp_error_bound() * 6.0 + 1e-9;
        let hi = *f.breakpoints().last().unwrap();
        for &x in f.breakpoints().iter().step_by(4) {
            for lambda in [1.0, 1.5, 2.0, 4.0] {
                if x <= 0.0 || lambda * x > hi {
                    continue;
                }
                let lhs = f.eval(lambda * x);
                let pow = lambda.powf(gamma);
                assert!(
                    lhs <= lambda * f.eval(x) + c_const * pow + tol,
                    "first scaling bound fails at x={x}, lambda={lambda}"
                );
                assert!(
                    lhs <= pow * f.eval(x) + c_const * pow + tol,
                    "second scaling bound fails at x={x}, lambda={lambda}"
                );
            }
        }
    }

    // optimal strategies live in the support subspace; strictly concave
    // restarts agree
    let tree = binomial_tree();
    let u = UtilitySpec::exponential(1.0);
    let cfg_b = Config { n_grid: 257, phi_max: 8.0, ..Config::default() };
    let uniq = verify_uniqueness(&tree, &u, 0.0, &cfg_b, 5).unwrap();
    assert!(uniq.max_off_subspace <= 1e-10, "off-subspace {}", uniq.max_off_subspace);
    assert!(uniq.max_deviation <= 1e-6, "restart deviation {}", uniq.max_deviation);

    let rt = random_tree(7);
    let uniq = verify_uniqueness(&rt.tree, &u, 0.5, &cfg, 4).unwrap();
    assert!(uniq.max_off_subspace <= 1e-10);
    assert!(uniq.max_deviation <= 1e-6, "restart deviation {}", uniq.max_deviation);

    pass(6, "structural invariants", t0);
    })
}

#[test]
fn criterion_7_pricing() {
    serialized(|| {
    let t0 = Instant::now();
    let tree = binomial_tree();
    let u = UtilitySpec::exponential(1.0);
    let cfg = Config { n_grid: 257, phi_max: 8.0, price_tol: 1e-9, ..Config::default() };

    // complete market: the call pays (1, 0); replication with phi = 1/2
    // costs 1/2 under the unique martingale measure
    let call = Claim { payoffs: [(1i64, 1.0), (2i64, 0.0)].into_iter().collect(), bound: 1.0 };
    let p = price_claim(&tree, &u, 0.0, &call, &cfg).unwrap();
    assert!((p.price - 0.5).abs() <= 1e-6, "call price {}", p.price);
    assert!(p.iterations <= 60);

    let b = 0.7;
    let cash = Claim { payoffs: [(1i64, b), (2i64, b)].into_iter().collect(), bound: 1.0 };
    let p = price_claim(&tree, &u, 0.0, &cash, &cfg).unwrap();
    assert!((p.price - b).abs() <= 1e-8, "cash price {}", p.price);
    assert!(p.iterations <= 60);
    pass(7, "indifference pricing", t0);
    })
}

#[test]
fn criterion_8_cone_constraints() {
    serialized(|| {
    let t0 = Instant::now();
    // downward drift with short sales forbidden: hold nothing, and the
    // increment keeps its physical drift -1/2 under Q = P
    let tree = ScenarioTree::from_parts(
        1,
        1,
        vec![
            NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
            NodeSpec { id: 1, parent: Some(0), prob: 0.25, prices: vec![1.0] },
            NodeSpec { id: 2, parent: Some(0), prob: 0.75, prices: vec![-1.0] },
        ],
        1000,
    )
    .unwrap();
    let u = UtilitySpec::exponential(1.0);
    let cfg = Config { n_grid: 257, phi_max: 8.0, ..Config::default() };
    let opts = SolveOptions { cone: Some(vec![vec![1.0]]), ..Default::default() };
    let r = solve_with(&tree, &u, 0.0, &cfg, &opts).unwrap();
    assert!(r.strategy[&0].ambient[0].abs() <= 1e-9, "phi {}", r.strategy[&0].ambient[0]);
    let s = utilmax::supermartingale_check(&r, &tree, &u, &cfg).unwrap();
    assert!((s.residuals[&0][0] + 0.5).abs() <= 1e-9, "residual {:?}", s.residuals[&0]);
    assert!(s.max_violation <= 1e-6, "supermartingale violated: {}", s.max_violation);
    pass(8, "cone-constrained supermartingale", t0);
    })
}

#[test]
fn criterion_9_density_bounds() {
    serialized(|| {
    let t0 = Instant::now();
    // marginal utility is constant below zero for both variants, so optimal
    // positions run large; a wide box keeps the optima interior
    let cfg =
        Config { n_grid: 513, phi_max: 4000.0, max_refine_rounds: 0, ..Config::default() };

    // marginal utility capped at 1: bounded density
    let u_above = UtilitySpec::linear_below_power_above(0.5);
    // marginal utility at least 1: density floor
    let u_below =
        UtilitySpec::piecewise_linear(vec![-2.0, -1.0, 0.0], vec![4.0, 3.0, 2.0, 1.0]);

    let mut checked = 0;
    for seed in 0..20u64 {
        let rt = random_tree(seed);

        let r = solve(&rt.tree, &u_above, 0.5, &cfg).unwrap();
        if !r.diagnostics.boundary_hit {
            let m = martingale_measure(&r, &rt.tree, &u_above, &cfg, false).unwrap();
            assert!(
                m.density_bounds.1 <= 1.0 / m.marginal_norm + 1e-12,
                "seed {seed}: density {} above bound {}",
                m.density_bounds.1,
                1.0 / m.marginal_norm
            );
            assert!(m.density_bounds.1.is_finite());
            checked += 1;
        }

        let r = solve(&rt.tree, &u_below, 0.5, &cfg).unwrap();
        if !r.diagnostics.boundary_hit {
            let m = martingale_measure(&r, &rt.tree, &u_below, &cfg, false).unwrap();
            assert!(
                m.density_bounds.0 >= 1.0 / m.marginal_norm - 1e-12,
                "seed {seed}: density {} below floor {}",
                m.density_bounds.0,
                1.0 / m.marginal_norm
            );
            assert!(m.density_bounds.0 > 0.0);
        }
    }
    assert!(checked >= 15, "too many boundary solves: {checked}");
    pass(9, "density bounds", t0);
    })
}

#[test]
fn arbitrage_solve_is_refused_with_witness() {
    // companion to criterion 4: the solver itself refuses arbitrage trees
    let tree = ScenarioTree::from_parts(
        1,
        1,
        vec![
            NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
            NodeSpec { id: 1, parent: Some(0), prob: 0.5, prices: vec![1.0] },
            NodeSpec { id: 2, parent: Some(0), prob: 0.5, prices: vec![2.0] },
        ],
        1000,
    )
    .unwrap();
    let u = UtilitySpec::exponential(1.0);
    match solve(&tree, &u, 0.0, &Config::default()) {
        Err(SolveError::ArbitrageDetected { node: 0, witness }) => assert!(witness[0] > 0.0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn example73_strategy_table_via_engine_evaluation() {
    // EU(n S_1) computed through the engine's strategy evaluator matches the
    // hand formula (3 U(n) + U(-n)) / 4 = partial sum
    let tree = binomial_tree();
    let u = UtilitySpec::example73(120);
    for n in [1usize, 7, 50, 100] {
        let mut phi = BTreeMap::new();
        phi.insert(0i64, vec![n as f64]);
        let eu = expected_utility_of(&tree, &u, None, 0.0, &phi).unwrap();
        let partial: f64 = (1..=n).map(|j| 1.0 / (j as f64 * j as f64)).sum();
        assert!((eu - partial).abs() <= 1e-12, "n = {n}");
    }
}
