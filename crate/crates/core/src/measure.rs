//! Measure extraction and utility-based pricing. The density of the
//! candidate martingale measure is the normalized marginal utility of
//! optimal terminal wealth; its conditional increment expectations vanish
//! at interior optima, turning the optimizer into a pricing measure.

use crate::config::Config;
use crate::engine::{
    self, make_subproblem, solve_with, SolveError, SolveOptions, SolveResult, TerminalEval,
};
use crate::simplex::{self, LpNum, LpProblem, Rel};
use crate::tree::ScenarioTree;
use crate::utility::UtilitySpec;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("solve hit the strategy box at nodes {0:?}; first-order conditions do not apply (pass force to override)")]
    BoundaryOptimum(Vec<i64>),
    #[error("marginal utility vanishes at leaf {0}: the measure is only absolutely continuous")]
    ZeroDerivative(i64),
    #[error("price bisection could not bracket the indifference point within |p| <= {0}")]
    BracketFailure(f64),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// A bounded contingent claim: payoff per leaf id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Claim {
    pub payoffs: BTreeMap<i64, f64>,
    /// Declared bound with |payoff| <= bound.
    pub bound: f64,
}

impl Claim {
    pub fn validate(&self, tree: &ScenarioTree) -> Result<(), SolveError> {
        if !self.bound.is_finite() || self.bound < 0.0 {
            return Err(SolveError::BadInput(format!("claim bound {} invalid", self.bound)));
        }
        for (id, b) in &self.payoffs {
            if !b.is_finite() {
                return Err(SolveError::BadInput(format!("claim payoff at {id} not finite")));
            }
            if b.abs() > self.bound + 1e-12 {
                return Err(SolveError::BadInput(format!(
                    "claim payoff {b} at {id} exceeds declared bound {}",
                    self.bound
                )));
            }
            match tree.index_of(*id) {
                Some(ix) if tree.is_leaf(ix) => {}
                _ => return Err(SolveError::BadInput(format!("claim node {id} is not a leaf"))),
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, SolveError> {
        serde_json::from_str(s).map_err(|e| SolveError::BadInput(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubdiffReport {
    /// Whether derivative selections within the subdifferential intervals
    /// can zero all conditional increment expectations (up to fo_tol).
    pub feasible: bool,
    pub selection: BTreeMap<i64, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureReport {
    /// dQ/dP per leaf id.
    pub density: BTreeMap<i64, f64>,
    /// Q-probability per leaf id.
    pub leaf_q: BTreeMap<i64, f64>,
    /// E_Q[dS | node] per non-leaf node id.
    pub martingale_residuals: BTreeMap<i64, Vec<f64>>,
    pub density_bounds: (f64, f64),
    pub max_residual: f64,
    /// Expected marginal utility E[U'(V_T)], the density normalizer.
    pub marginal_norm: f64,
    /// Subdifferential feasibility certificate, for kinked utilities.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subdifferential: Option<SubdiffReport>,
}

/// Extracts the candidate equivalent martingale measure from a solved
/// strategy: density proportional to marginal utility at terminal wealth.
pub fn martingale_measure(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    config: &Config,
    force: bool,
) -> Result<MeasureReport, MeasureError> {
    martingale_measure_with(result, tree, u, None, config, force)
}

pub fn martingale_measure_with(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    claim: Option<&Claim>,
    config: &Config,
    force: bool,
) -> Result<MeasureReport, MeasureError> {
    if result.diagnostics.boundary_hit && !force {
        return Err(MeasureError::BoundaryOptimum(result.diagnostics.boundary_nodes.clone()));
    }
    let offsets = claim.map(|c| c.payoffs.clone());
    let term = TerminalEval::new(tree, u, offsets.as_ref())?;

    let mut marginal = BTreeMap::new();
    let mut norm = 0.0;
    for l in tree.leaves() {
        let id = tree.node(l).id;
        let w = result.wealth[&id];
        let du = term.dleft(l, w);
        if !(du > 0.0) {
            return Err(MeasureError::ZeroDerivative(id));
        }
        marginal.insert(id, du);
        norm += tree.path_prob(l) * du;
    }

    let mut density = BTreeMap::new();
    let mut leaf_q = BTreeMap::new();
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in tree.leaves() {
        let id = tree.node(l).id;
        let d = marginal[&id] / norm;
        dmin = dmin.min(d);
        dmax = dmax.max(d);
        density.insert(id, d);
        leaf_q.insert(id, tree.path_prob(l) * d);
    }

    // conditional increment expectations under Q, aggregated from the leaves
    let mut residuals = BTreeMap::new();
    let mut max_residual = 0.0f64;
    for n in tree.non_leaf_indices() {
        let mut q_tot = 0.0;
        let mut num = vec![0.0; tree.d()];
        for &c in tree.children(n) {
            let y = tree.increment(c);
            let qc = q_mass_under(tree, &leaf_q, c);
            q_tot += qc;
            for (s, yi) in num.iter_mut().zip(y.iter()) {
                *s += qc * yi;
            }
        }
        let r: Vec<f64> = num.iter().map(|v| v / q_tot).collect();
        for v in &r {
            max_residual = max_residual.max(v.abs());
        }
        residuals.insert(tree.node(n).id, r);
    }

    // at kinks the pointwise left derivative is only one selection; certify
    // the optimality condition as feasibility over the whole subdifferential
    let subdifferential = if u.is_smooth() {
        None
    } else {
        Some(subdiff_feasibility(result, tree, &term, config.fo_tol))
    };

    Ok(MeasureReport {
        density,
        leaf_q,
        martingale_residuals: residuals,
        density_bounds: (dmin, dmax),
        max_residual,
        marginal_norm: norm,
        subdifferential,
    })
}

fn q_mass_under(tree: &ScenarioTree, leaf_q: &BTreeMap<i64, f64>, node: usize) -> f64 {
    if tree.is_leaf(node) {
        return leaf_q[&tree.node(node).id];
    }
    tree.children(node).iter().map(|&c| q_mass_under(tree, leaf_q, c)).sum()
}

/// Feasibility of derivative selections g_l in [U'_+(w_l), U'_-(w_l)] making
/// every conditional increment expectation vanish within fo_tol. Decided
/// exactly over rationals; the tolerance absorbs the strategy's own residual.
fn subdiff_feasibility(
    result: &SolveResult,
    tree: &ScenarioTree,
    term: &TerminalEval,
    fo_tol: f64,
) -> SubdiffReport {
    let leaves: Vec<usize> = tree.leaves().collect();
    let nl = leaves.len();
    let rat = |v: f64| <BigRational as LpNum>::from_f64(v);

    let mut p = LpProblem::<BigRational>::new(nl);
    let mut lo = Vec::with_capacity(nl);
    let mut hi = Vec::with_capacity(nl);
    for &l in &leaves {
        let w = result.wealth[&tree.node(l).id];
        lo.push(term.dright(l, w)); // right slope <= left slope by concavity
        hi.push(term.dleft(l, w));
    }
    for (j, (&l, &h)) in lo.iter().zip(hi.iter()).enumerate() {
        let mut row = vec![<BigRational as LpNum>::zero(); nl];
        row[j] = <BigRational as LpNum>::one();
        p.push_row(row.clone(), Rel::Ge, rat(l));
        p.push_row(row, Rel::Le, rat(h));
    }
    // per node and asset: |sum_l pp_l g_l dS_j| <= fo_tol * scale
    for n in tree.non_leaf_indices() {
        for j in 0..tree.d() {
            let mut row = vec![<BigRational as LpNum>::zero(); nl];
            let mut scale = 0.0;
            for (slot, &l) in leaves.iter().enumerate() {
                if let Some(c) = child_on_path(tree, n, l) {
                    let y = tree.increment(c);
                    row[slot] = rat(tree.path_prob(l) * y[j]);
                    scale += tree.path_prob(l) * hi[slot] * y[j].abs();
                }
            }
            let tol = rat(fo_tol * scale.max(1e-300));
            p.push_row(row.clone(), Rel::Le, tol.clone());
            p.push_row(row, Rel::Ge, tol.neg());
        }
    }
    match simplex::rational_feasible(&p) {
        Some(g) => {
            let selection =
                leaves.iter().zip(g.iter()).map(|(&l, v)| (tree.node(l).id, *v)).collect();
            SubdiffReport { feasible: true, selection }
        }
        None => SubdiffReport { feasible: false, selection: BTreeMap::new() },
    }
}

/// The child of `node` on the path to `leaf`, if the leaf sits under it.
fn child_on_path(tree: &ScenarioTree, node: usize, leaf: usize) -> Option<usize> {
    let mut cur = leaf;
    let mut prev = None;
    loop {
        if cur == node {
            return prev;
        }
        match tree.node(cur).parent {
            Some(p) => {
                prev = Some(cur);
                cur = p;
            }
            None => return None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub node: i64,
    /// Central finite difference of the re-solved subtree value at the
    /// realized wealth.
    pub lhs: f64,
    /// E[marginal utility of the re-polished subtree | node].
    pub rhs: f64,
    pub gap: f64,
}

/// Envelope check at a node: the derivative of the optimal subtree value in
/// wealth equals the conditional expectation of terminal marginal utility.
/// Both sides come from exact-utility subtree re-solves seeded by the stored
/// strategy.
pub fn envelope_check(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    config: &Config,
    node_id: i64,
    h: f64,
) -> Result<EnvelopeReport, MeasureError> {
    envelope_check_with(result, tree, u, None, config, node_id, h)
}

pub fn envelope_check_with(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    claim: Option<&Claim>,
    config: &Config,
    node_id: i64,
    h: f64,
) -> Result<EnvelopeReport, MeasureError> {
    let ix = tree
        .index_of(node_id)
        .ok_or_else(|| SolveError::BadInput(format!("unknown node {node_id}")))?;
    let offsets = claim.map(|c| c.payoffs.clone());
    let term = TerminalEval::new(tree, u, offsets.as_ref())?;
    let subspaces = engine::all_subspaces(tree, config)?;
    let w = result.wealth[&node_id];

    let value_at = |x: f64| -> f64 {
        let mut sub = make_subproblem(tree, &term, &subspaces, None, config, ix, x);
        sub.set_strategies(&|n| result.strategy.get(&tree.node(n).id).map(|s| s.coords.clone()));
        sub.polish(config.max_polish_sweeps, config.polish_tol.min(1e-11), false);
        sub.value()
    };
    let lhs = (value_at(w + h) - value_at(w - h)) / (2.0 * h);

    let mut sub = make_subproblem(tree, &term, &subspaces, None, config, ix, w);
    sub.set_strategies(&|n| result.strategy.get(&tree.node(n).id).map(|s| s.coords.clone()));
    sub.polish(config.max_polish_sweeps, config.polish_tol.min(1e-11), false);
    let rhs = sub.marginal();

    Ok(EnvelopeReport { node: node_id, lhs, rhs, gap: (lhs - rhs).abs() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceReport {
    pub price: f64,
    pub iterations: usize,
    /// Final value mismatch u(B, c + p) - u(0, c).
    pub residual: f64,
}

/// Indifference price of a bounded claim: the payment p making the seller's
/// optimal utility with the claim from capital c + p equal the plain optimal
/// utility from c. Monotone bisection on p; each probe is a full solve with
/// leaf-shifted terminal utility.
pub fn price_claim(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    capital: f64,
    claim: &Claim,
    config: &Config,
) -> Result<PriceReport, MeasureError> {
    claim.validate(tree)?;
    let base = engine::solve(tree, u, capital, config)?;
    let target = base.root_value;

    let probe = |p: f64| -> Result<f64, MeasureError> {
        let opts = SolveOptions { leaf_offsets: Some(claim.payoffs.clone()), ..Default::default() };
        let r = solve_with(tree, u, capital + p, config, &opts)?;
        Ok(r.root_value - target)
    };

    // a bound-width bracket works for bounded claims
    let mut lo = -claim.bound;
    let mut hi = claim.bound;
    let (mut flo, mut fhi) = (probe(lo)?, probe(hi)?);
    let mut widen = 0;
    while flo > 0.0 || fhi < 0.0 {
        if widen >= 2 {
            return Err(MeasureError::BracketFailure(hi));
        }
        lo = 2.0 * lo - 1.0;
        hi = 2.0 * hi + 1.0;
        flo = probe(lo)?;
        fhi = probe(hi)?;
        widen += 1;
    }

    let mut iterations = 0usize;
    while hi - lo > config.price_tol && iterations < 60 {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    let price = 0.5 * (lo + hi);
    Ok(PriceReport { price, iterations, residual: probe(price)? })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    /// E_Q[dS | node] per non-leaf node id; nonpositive componentwise at a
    /// short-sales-forbidden optimum.
    pub residuals: BTreeMap<i64, Vec<f64>>,
    pub max_violation: f64,
    /// Largest |residual| on components with strictly positive holdings,
    /// which must vanish by complementary slackness.
    pub max_slack_violation: f64,
}

/// Verifies the supermartingale property of the measure extracted from a
/// cone-constrained solve with nonnegativity rays.
pub fn supermartingale_check(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    config: &Config,
) -> Result<SupermartingaleReport, MeasureError> {
    let report = martingale_measure(result, tree, u, config, true)?;
    let mut max_violation = 0.0f64;
    let mut max_slack = 0.0f64;
    for n in tree.non_leaf_indices() {
        let id = tree.node(n).id;
        let r = &report.martingale_residuals[&id];
        let phi = &result.strategy[&id].ambient;
        for (j, v) in r.iter().enumerate() {
            max_violation = max_violation.max(*v);
            if phi[j] > 1e-9 {
                max_slack = max_slack.max(v.abs());
            }
        }
    }
    Ok(SupermartingaleReport {
        residuals: report.martingale_residuals,
        max_violation,
        max_slack_violation: max_slack,
    })
}
