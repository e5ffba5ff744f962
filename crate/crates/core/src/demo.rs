//! Built-in non-attainment demonstration: a one-step market with upside
//! probability 3/4 and the kinked utility whose expected utility of the
//! integer holding n is exactly the partial sum of 1/j^2. The supremum
//! pi^2/6 is approached but never attained, so the solver must report a
//! boundary optimum for every strategy box.

use crate::config::Config;
use crate::engine::{self, SolveError, SolveResult};
use crate::tree::{NodeSpec, ScenarioTree};
use crate::utility::UtilitySpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PI_SQUARED_OVER_SIX: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

/// One-step market: S0 = 0, S1 = +1 with probability 3/4, -1 with 1/4.
pub fn example73_tree() -> ScenarioTree {
    ScenarioTree::from_parts(
        1,
        1,
        vec![
            NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
            NodeSpec { id: 1, parent: Some(0), prob: 0.75, prices: vec![1.0] },
            NodeSpec { id: 2, parent: Some(0), prob: 0.25, prices: vec![-1.0] },
        ],
        1000,
    )
    .expect("static tree is valid")
}

pub fn partial_sum(n: usize) -> f64 {
    (1..=n).map(|j| 1.0 / (j as f64 * j as f64)).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRow {
    pub n: usize,
    pub expected_utility: f64,
    pub partial_sum: f64,
    pub gap_to_limit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    pub rows: Vec<DemoRow>,
    pub limit: f64,
    /// One solve per strategy box in the schedule.
    pub solves: Vec<DemoSolve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoSolve {
    pub phi_max: f64,
    pub root_value: f64,
    pub gap_to_limit: f64,
    pub boundary_hit: bool,
    pub strategy: f64,
}

/// Tabulates EU(n S_1) for n = 1..=table_n via exact strategy evaluation and
/// runs one solve per phi_max in the schedule. `n` is the utility truncation
/// depth and must exceed every phi_max probed.
pub fn run_example73(
    n: usize,
    table_n: usize,
    phi_schedule: &[f64],
    config: &Config,
) -> Result<DemoReport, SolveError> {
    if n < 2 {
        return Err(SolveError::BadInput("truncation depth must be at least 2".into()));
    }
    let tree = example73_tree();
    let u = UtilitySpec::example73(n);

    let mut rows = Vec::with_capacity(table_n);
    for k in 1..=table_n {
        let mut phi = BTreeMap::new();
        phi.insert(0i64, vec![k as f64]);
        let eu = engine::expected_utility_of(&tree, &u, None, 0.0, &phi)?;
        let ps = partial_sum(k);
        debug_assert!((eu - ps).abs() <= 1e-12);
        rows.push(DemoRow {
            n: k,
            expected_utility: eu,
            partial_sum: ps,
            gap_to_limit: PI_SQUARED_OVER_SIX - eu,
        });
    }

    let mut solves = Vec::new();
    for &phi_max in phi_schedule {
        let mut cfg = config.clone();
        cfg.phi_max = phi_max;
        let r: SolveResult = engine::solve(&tree, &u, 0.0, &cfg)?;
        solves.push(DemoSolve {
            phi_max,
            root_value: r.root_value,
            gap_to_limit: PI_SQUARED_OVER_SIX - r.root_value,
            boundary_hit: r.diagnostics.boundary_hit,
            strategy: r.strategy[&0].ambient[0],
        });
    }
    Ok(DemoReport { rows, limit: PI_SQUARED_OVER_SIX, solves })
}
