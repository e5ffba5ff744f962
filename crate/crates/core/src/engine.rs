//! Backward-induction solver: computes the value function at every node on a
//! shared wealth grid, reads off an optimal strategy in a forward pass, then
//! sharpens the strategy by exact-utility coordinate ascent over the whole
//! tree. The grid stage establishes shape (attainment, boundary behavior,
//! value-function geometry); the polish stage drives first-order residuals to
//! roundoff so measure extraction and pricing meet tight tolerances.

use crate::config::{AePolicy, Config};
use crate::geometry::{check_na, dot, support_subspace, NaOutcome, Subspace};
use crate::onestep::{solve_one_step, OneStepError, OneStepProblem, OneStepSolution};
use crate::pl::{PLConcave, PlError};
use crate::tree::{ScenarioTree, TreeError};
use crate::utility::{check_ae_minus, check_ae_plus, CheckReport, SamplingPlan, UtilitySpec};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("arbitrage detected at node {node}: no maximizer exists")]
    ArbitrageDetected { node: i64, witness: Vec<f64> },
    #[error("root value keeps growing with the strategy box (+{growth:.3e} per doubling): expected utility appears unbounded")]
    ValueDiverged { growth: f64 },
    #[error("grid refinement did not converge after {rounds} rounds (last change {last_change:.3e})")]
    GridNotConverged { rounds: usize, last_change: f64 },
    #[error("declared elasticity check '{which}' failed (max violation {max_violation:.3e}) under strict policy")]
    AeCheckFailed { which: &'static str, max_violation: f64 },
    #[error(transparent)]
    OneStep(#[from] OneStepError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Pl(#[from] PlError),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Optional solve inputs beyond tree/utility/capital.
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    /// Generating rays of a polyhedral constraint cone.
    pub cone: Option<Vec<Vec<f64>>>,
    /// Claim payoffs by leaf id; terminal utility becomes x -> U(x - B(leaf)).
    pub leaf_offsets: Option<BTreeMap<i64, f64>>,
    /// Strategy-perturbation seed applied before polishing (restart probes).
    pub jitter_seed: Option<u64>,
    /// Reverse the polish sweep order (restart probes).
    pub reverse_sweep: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineRound {
    pub n_grid: usize,
    pub root_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceProbe {
    pub phi_values: Vec<f64>,
    pub root_values: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub boundary_hit: bool,
    pub boundary_nodes: Vec<i64>,
    pub refine_history: Vec<RefineRound>,
    pub grid_converged: bool,
    pub polish_sweeps: usize,
    pub polish_residual: f64,
    pub wealth_range: (f64, f64),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae_plus: Option<CheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae_minus: Option<CheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceProbe>,
}

/// Holdings applied from a node towards its children.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeStrategy {
    /// Decision coordinates: support-subspace coordinates, or cone ray
    /// weights when a cone is active.
    pub coords: Vec<f64>,
    pub ambient: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    /// Value function per node id.
    pub value_fns: BTreeMap<i64, PLConcave>,
    /// Strategy per non-leaf node id (constant across its children).
    pub strategy: BTreeMap<i64, NodeStrategy>,
    /// Realized wealth per node id along the optimal strategy.
    pub wealth: BTreeMap<i64, f64>,
    /// Exact expected terminal utility of the returned strategy.
    pub root_value: f64,
    /// Grid value function evaluated at the capital, for comparison.
    pub dp_root_value: f64,
    pub capital: f64,
    pub diagnostics: Diagnostics,
}

// ---------------------------------------------------------------------------
// terminal utility with optional per-leaf claim shifts
// ---------------------------------------------------------------------------

#[derive(Clone)]
pub(crate) struct TerminalEval<'a> {
    pub u: &'a UtilitySpec,
    /// Offset per node index (only leaves are read).
    pub offsets: Option<Vec<f64>>,
}

impl<'a> TerminalEval<'a> {
    pub fn new(
        tree: &ScenarioTree,
        u: &'a UtilitySpec,
        leaf_offsets: Option<&BTreeMap<i64, f64>>,
    ) -> Result<Self, SolveError> {
        let offsets = match leaf_offsets {
            None => None,
            Some(map) => {
                let mut v = vec![0.0; tree.len()];
                for (id, b) in map {
                    let ix = tree
                        .index_of(*id)
                        .ok_or_else(|| SolveError::BadInput(format!("unknown leaf id {id}")))?;
                    if !tree.is_leaf(ix) {
                        return Err(SolveError::BadInput(format!("node {id} is not a leaf")));
                    }
                    if !b.is_finite() {
                        return Err(SolveError::BadInput(format!(
                            "claim payoff at {id} is not finite"
                        )));
                    }
                    v[ix] = *b;
                }
                Some(v)
            }
        };
        Ok(TerminalEval { u, offsets })
    }

    fn offset(&self, leaf: usize) -> f64 {
        self.offsets.as_ref().map_or(0.0, |v| v[leaf])
    }

    pub fn eval(&self, leaf: usize, x: f64) -> f64 {
        self.u.eval(x - self.offset(leaf))
    }

    pub fn dleft(&self, leaf: usize, x: f64) -> f64 {
        self.u.left_derivative(x - self.offset(leaf))
    }

    pub fn dright(&self, leaf: usize, x: f64) -> f64 {
        self.u.right_derivative(x - self.offset(leaf))
    }
}

// ---------------------------------------------------------------------------
// exact-utility subproblem: strategies over a subtree, polished in place
// ---------------------------------------------------------------------------

struct NodeDecision {
    node: usize,
    /// Payoff coefficients per child in tree child order: wealth change per
    /// unit along each decision dimension.
    edge_coef: Vec<Vec<f64>>,
    /// Leaves under this node: (leaf index, child slot on the path,
    /// probability conditional on the subproblem root... given this node).
    leaves: Vec<(usize, usize, f64)>,
    nonneg: bool,
    k: usize,
}

pub(crate) struct Subproblem<'a> {
    tree: &'a ScenarioTree,
    term: &'a TerminalEval<'a>,
    cone: Option<&'a [Vec<f64>]>,
    phi_max: f64,
    root: usize,
    decisions: Vec<NodeDecision>,
    /// Decision values parallel to `decisions`.
    pub dec: Vec<Vec<f64>>,
    wealth: Vec<f64>,
    /// Leaves of the subtree with root-conditional probabilities.
    root_leaves: Vec<(usize, f64)>,
}

impl<'a> Subproblem<'a> {
    pub fn new(
        tree: &'a ScenarioTree,
        term: &'a TerminalEval<'a>,
        subspaces: &[Option<Subspace>],
        cone: Option<&'a [Vec<f64>]>,
        phi_max: f64,
        root: usize,
        x0: f64,
    ) -> Self {
        let mut cond_prob = vec![0.0; tree.len()];
        cond_prob[root] = 1.0;
        let mut stack = vec![root];
        let mut sub_nodes = Vec::new();
        while let Some(n) = stack.pop() {
            sub_nodes.push(n);
            for &c in tree.children(n) {
                cond_prob[c] = cond_prob[n] * tree.node(c).branch_prob;
                stack.push(c);
            }
        }
        sub_nodes.sort_by_key(|&n| (tree.node(n).time, tree.node(n).id));

        let mut decisions = Vec::new();
        let mut dec = Vec::new();
        for &n in &sub_nodes {
            if tree.is_leaf(n) {
                continue;
            }
            let k = match cone {
                Some(rays) => rays.len(),
                None => subspaces[n].as_ref().map_or(0, |s| s.dim()),
            };
            let edge_coef: Vec<Vec<f64>> = tree
                .children(n)
                .iter()
                .map(|&c| {
                    let y = tree.increment(c);
                    match cone {
                        Some(rays) => rays.iter().map(|r| dot(r, &y)).collect(),
                        None => subspaces[n].as_ref().unwrap().coords(&y),
                    }
                })
                .collect();
            let mut leaves = Vec::new();
            for (slot, &c) in tree.children(n).iter().enumerate() {
                let mut st = vec![c];
                while let Some(m) = st.pop() {
                    if tree.is_leaf(m) {
                        leaves.push((m, slot, cond_prob[m] / cond_prob[n]));
                    } else {
                        st.extend_from_slice(tree.children(m));
                    }
                }
            }
            leaves.sort_by_key(|l| l.0);
            decisions.push(NodeDecision { node: n, edge_coef, leaves, nonneg: cone.is_some(), k });
            dec.push(vec![0.0; k]);
        }

        let root_leaves: Vec<(usize, f64)> = sub_nodes
            .iter()
            .filter(|&&n| tree.is_leaf(n))
            .map(|&n| (n, cond_prob[n]))
            .collect();

        let mut s = Subproblem {
            tree,
            term,
            cone,
            phi_max,
            root,
            decisions,
            dec,
            wealth: vec![f64::NAN; tree.len()],
            root_leaves,
        };
        s.wealth[root] = x0;
        s.propagate(root);
        s
    }

    fn decision_index(&self, node: usize) -> Option<usize> {
        self.decisions.iter().position(|d| d.node == node)
    }

    /// Overwrites strategies from decision coordinates keyed by node index.
    pub fn set_strategies(&mut self, get: &dyn Fn(usize) -> Option<Vec<f64>>) {
        for (i, d) in self.decisions.iter().enumerate() {
            if let Some(v) = get(d.node) {
                debug_assert_eq!(v.len(), d.k);
                self.dec[i] = v;
            }
        }
        self.propagate(self.root);
    }

    /// Recomputes wealth below `from`.
    pub fn propagate(&mut self, from: usize) {
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if self.tree.is_leaf(n) {
                continue;
            }
            if let Some(di) = self.decision_index(n) {
                for (slot, &c) in self.tree.children(n).iter().enumerate() {
                    self.wealth[c] =
                        self.wealth[n] + dot(&self.dec[di], &self.decisions[di].edge_coef[slot]);
                    stack.push(c);
                }
            }
        }
    }

    /// Conditional expected terminal utility at the subproblem root.
    pub fn value(&self) -> f64 {
        self.root_leaves
            .iter()
            .map(|&(l, p)| p * self.term.eval(l, self.wealth[l]))
            .sum()
    }

    /// E[U'(terminal wealth) | root], left-derivative convention.
    pub fn marginal(&self) -> f64 {
        self.root_leaves
            .iter()
            .map(|&(l, p)| p * self.term.dleft(l, self.wealth[l]))
            .sum()
    }

    /// One-sided derivative of expected utility in decision coordinate
    /// (di, j); `upper` selects the increasing-s side.
    fn dir_derivative(&self, di: usize, j: usize, upper: bool) -> f64 {
        let d = &self.decisions[di];
        let mut g = 0.0;
        for &(leaf, slot, p) in &d.leaves {
            let e = d.edge_coef[slot][j];
            if e == 0.0 {
                continue;
            }
            let w = self.wealth[leaf];
            let du = if (e > 0.0) == upper {
                self.term.dright(leaf, w)
            } else {
                self.term.dleft(leaf, w)
            };
            g += p * du * e;
        }
        g
    }

    /// Feasible interval for coordinate (di, j) with the others held fixed.
    fn coord_bounds(&self, di: usize, j: usize) -> (f64, f64) {
        match self.cone {
            None => (-self.phi_max, self.phi_max),
            Some(rays) => {
                // mu_j >= 0 and every ambient component inside the box
                let ambient = self.ambient_of(di);
                let cur = self.dec[di][j];
                let (mut lo, mut hi) = (0.0f64, 1e15f64);
                for (l, &r) in rays[j].iter().enumerate() {
                    if r == 0.0 {
                        continue;
                    }
                    let base = ambient[l] - cur * r;
                    let a = (-self.phi_max - base) / r;
                    let b = (self.phi_max - base) / r;
                    let (a, b) = if a <= b { (a, b) } else { (b, a) };
                    lo = lo.max(a);
                    hi = hi.min(b);
                }
                (lo, hi.max(lo))
            }
        }
    }

    pub fn ambient_of(&self, di: usize) -> Vec<f64> {
        match self.cone {
            Some(rays) => {
                let d = rays[0].len();
                let mut out = vec![0.0; d];
                for (w, r) in self.dec[di].iter().zip(rays.iter()) {
                    for (o, ri) in out.iter_mut().zip(r.iter()) {
                        *o += w * ri;
                    }
                }
                out
            }
            None => Vec::new(),
        }
    }

    /// Exact concave line search in one coordinate: bisection on the
    /// one-sided derivatives, over cached per-leaf wealth offsets.
    fn optimize_coord(&mut self, di: usize, j: usize) {
        let (lo, hi) = self.coord_bounds(di, j);
        if !(hi > lo) {
            return;
        }
        let cur = self.dec[di][j].clamp(lo, hi);
        // leaf wealth under this node is affine in the coordinate:
        // w_l(s) = base_l + s * e_l
        let d = &self.decisions[di];
        let cells: Vec<(usize, f64, f64, f64)> = d
            .leaves
            .iter()
            .filter(|&&(_, slot, _)| d.edge_coef[slot][j] != 0.0)
            .map(|&(leaf, slot, p)| {
                let e = d.edge_coef[slot][j];
                (leaf, p, e, self.wealth[leaf] - cur * e)
            })
            .collect();
        if cells.is_empty() {
            return;
        }
        let term = self.term;
        let deriv = |s: f64, upper: bool| -> f64 {
            cells
                .iter()
                .map(|&(leaf, p, e, base)| {
                    let w = base + s * e;
                    let du = if (e > 0.0) == upper { term.dright(leaf, w) } else { term.dleft(leaf, w) };
                    p * du * e
                })
                .sum()
        };
        let target = if deriv(lo, true) <= 0.0 {
            lo // maximum at the lower bound
        } else if deriv(hi, false) >= 0.0 {
            hi // maximum at the upper bound
        } else {
            let (mut a, mut b) = (lo, hi);
            if deriv(cur, true) > 0.0 {
                a = cur;
            } else if deriv(cur, false) < 0.0 {
                b = cur;
            } else {
                return; // incumbent already stationary
            }
            loop {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break 0.5 * (a + b);
                }
                if deriv(m, true) > 0.0 {
                    a = m;
                } else if deriv(m, false) < 0.0 {
                    b = m;
                } else {
                    break m;
                }
            }
        };
        if target != cur {
            self.dec[di][j] = target;
            let node = self.decisions[di].node;
            self.propagate(node);
        }
    }

    /// Exact concave line search along a joint displacement of all
    /// decisions, staying inside the feasible box. Returns whether the point
    /// moved. Valid without a cone, where the bounds are separable.
    fn line_search_along(&mut self, delta: &[Vec<f64>]) -> bool {
        // feasible range of the step and per-leaf wealth slopes
        let (mut t_lo, mut t_hi) = (-1e6f64, 1e6f64);
        for (di, dv) in delta.iter().enumerate() {
            for (j, &dj) in dv.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let (lo, hi) = self.coord_bounds(di, j);
                let s = self.dec[di][j];
                let (a, b) = ((lo - s) / dj, (hi - s) / dj);
                let (a, b) = if a <= b { (a, b) } else { (b, a) };
                t_lo = t_lo.max(a);
                t_hi = t_hi.min(b);
            }
        }
        if !(t_hi > t_lo) {
            return false;
        }
        let t_lo = t_lo.min(0.0).max(-1e6);
        let t_hi = t_hi.max(0.0).min(1e6);
        let mut q = vec![0.0f64; self.wealth.len()];
        for (di, d) in self.decisions.iter().enumerate() {
            for &(leaf, slot, _) in &d.leaves {
                q[leaf] += dot(&delta[di], &d.edge_coef[slot]);
            }
        }
        let term = self.term;
        let wealth = &self.wealth;
        let leaves = &self.root_leaves;
        let deriv = |t: f64, upper: bool| -> f64 {
            leaves
                .iter()
                .map(|&(leaf, p)| {
                    let e = q[leaf];
                    if e == 0.0 {
                        return 0.0;
                    }
                    let w = wealth[leaf] + t * e;
                    let du =
                        if (e > 0.0) == upper { term.dright(leaf, w) } else { term.dleft(leaf, w) };
                    p * du * e
                })
                .sum()
        };
        let t = if deriv(0.0, true) <= 0.0 && deriv(0.0, false) >= 0.0 {
            return false; // already stationary along this line
        } else if deriv(t_hi, false) >= 0.0 {
            t_hi
        } else if deriv(t_lo, true) <= 0.0 {
            t_lo
        } else {
            let (mut a, mut b) = (t_lo, t_hi);
            loop {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break 0.5 * (a + b);
                }
                if deriv(m, true) > 0.0 {
                    a = m;
                } else if deriv(m, false) < 0.0 {
                    b = m;
                } else {
                    break m;
                }
            }
        };
        if t != 0.0 {
            for (dv, dd) in self.dec.iter_mut().zip(delta.iter()) {
                for (v, d) in dv.iter_mut().zip(dd.iter()) {
                    *v += t * d;
                }
            }
            let root = self.root;
            self.propagate(root);
            true
        } else {
            false
        }
    }

    /// Largest normalized first-order residual: for each decision direction,
    /// the conditional expectation E[U' dW] scaled by E[U'] and the payoff
    /// magnitude, with directions blocked by an active bound excused.
    pub fn residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (di, d) in self.decisions.iter().enumerate() {
            let denom: f64 = d
                .leaves
                .iter()
                .map(|&(l, _, p)| p * self.term.dleft(l, self.wealth[l]))
                .sum();
            if !(denom > 0.0) {
                continue;
            }
            for j in 0..d.k {
                let scale = d
                    .edge_coef
                    .iter()
                    .map(|e| e[j].abs())
                    .fold(0.0f64, f64::max)
                    .max(1e-300);
                let (lo, hi) = self.coord_bounds(di, j);
                let s = self.dec[di][j];
                let up = self.dir_derivative(di, j, true);
                let down = self.dir_derivative(di, j, false);
                let end_tol = 1e-9 * (1.0 + hi.abs().max(lo.abs()));
                let r = if (s - lo).abs() <= end_tol {
                    up.max(0.0)
                } else if (s - hi).abs() <= end_tol {
                    (-down).max(0.0)
                } else if up > 0.0 {
                    up
                } else if down < 0.0 {
                    -down
                } else {
                    0.0
                };
                worst = worst.max(r / (denom * scale));
            }
        }
        worst
    }

    /// Coordinate-ascent sweeps with a joint line search along each sweep's
    /// displacement, until the residual settles or the budget runs out.
    /// Returns (sweeps used, final residual).
    pub fn polish(&mut self, max_sweeps: usize, tol: f64, reverse: bool) -> (usize, f64) {
        let order: Vec<usize> = if reverse {
            (0..self.decisions.len()).rev().collect()
        } else {
            (0..self.decisions.len()).collect()
        };
        let mut sweeps = 0;
        let mut res = self.residual();
        let mut stagnant = 0usize;
        let mut best = res;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b97f4a7c15);
        while res > tol && sweeps < max_sweeps {
            let before = self.dec.clone();
            for &di in &order {
                let k = self.decisions[di].k;
                for j in 0..k {
                    self.optimize_coord(di, j);
                }
            }
            let mut moved = false;
            if self.cone.is_none() {
                let delta: Vec<Vec<f64>> = self
                    .dec
                    .iter()
                    .zip(before.iter())
                    .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x - y).collect())
                    .collect();
                if delta.iter().flatten().any(|v| v.abs() > 0.0) {
                    moved = true;
                    self.line_search_along(&delta);
                }
                if !moved {
                    // kinked utilities can pin coordinate ascent at a corner
                    // only a diagonal move can leave; probe random joint
                    // directions with exact line searches
                    for _ in 0..16 {
                        let probe: Vec<Vec<f64>> = self
                            .dec
                            .iter()
                            .map(|v| v.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                            .collect();
                        if self.line_search_along(&probe) {
                            moved = true;
                            break;
                        }
                    }
                }
            }
            sweeps += 1;
            res = self.residual();
            if res < 0.5 * best {
                best = res;
                stagnant = 0;
            } else {
                stagnant += 1;
                if stagnant >= 40 || (!moved && self.dec == before) {
                    break; // no longer improving at this precision
                }
            }
        }
        (sweeps, res)
    }

    /// Nodes pressed against the phi_max box with a strictly improving
    /// outward direction (non-attainment indicator). Cone faces at zero do
    /// not count; they are legitimate constrained optima.
    pub fn box_bound_nodes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (di, d) in self.decisions.iter().enumerate() {
            let mut hit = false;
            for j in 0..d.k {
                let (lo, hi) = self.coord_bounds(di, j);
                let s = self.dec[di][j];
                let tol = 1e-9 * (1.0 + self.phi_max);
                if (s - hi).abs() <= tol && self.dir_derivative(di, j, false) > 1e-10 {
                    hit = true;
                }
                if !d.nonneg && (s - lo).abs() <= tol && self.dir_derivative(di, j, true) < -1e-10 {
                    hit = true;
                }
            }
            if hit {
                out.push(d.node);
            }
        }
        out
    }

    pub fn wealth_at(&self, node: usize) -> f64 {
        self.wealth[node]
    }

    pub fn strategy_of(&self, node: usize) -> Option<&[f64]> {
        self.decision_index(node).map(|di| self.dec[di].as_slice())
    }
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

fn node_subspaces(
    tree: &ScenarioTree,
    config: &Config,
) -> Result<Vec<Option<Subspace>>, SolveError> {
    let mut out: Vec<Option<Subspace>> = (0..tree.len()).map(|_| None).collect();
    for ix in tree.non_leaf_indices() {
        let dist = tree.conditional_dist(ix)?;
        let (subspace, _offset) = support_subspace(&dist, config.rank_tol);
        match check_na(&dist, &subspace) {
            NaOutcome::Arbitrage { witness } => {
                return Err(SolveError::ArbitrageDetected { node: tree.node(ix).id, witness });
            }
            NaOutcome::NoArbitrage => out[ix] = Some(subspace),
        }
    }
    Ok(out)
}

fn ae_reports(
    u: &UtilitySpec,
    policy: AePolicy,
) -> Result<(Option<CheckReport>, Option<CheckReport>), SolveError> {
    if policy == AePolicy::Off {
        return Ok((None, None));
    }
    let plan = SamplingPlan::default();
    let mut plus = None;
    let mut minus = None;
    if let (Some(g), Some(xt)) = (u.ae.gamma, u.ae.xtilde) {
        let r = check_ae_plus(u, g, xt, &plan);
        if !r.passed && policy == AePolicy::Strict {
            return Err(SolveError::AeCheckFailed { which: "plus", max_violation: r.max_violation });
        }
        plus = Some(r);
    }
    if let (Some(a), Some(xt)) = (u.ae.alpha, u.ae.xtilde) {
        let r = check_ae_minus(u, a, xt, &plan);
        if !r.passed && policy == AePolicy::Strict {
            return Err(SolveError::AeCheckFailed {
                which: "minus",
                max_violation: r.max_violation,
            });
        }
        minus = Some(r);
    }
    Ok((plus, minus))
}

/// Reach of the wealth process inside the strategy box, for grid sizing.
fn wealth_reach(
    tree: &ScenarioTree,
    subspaces: &[Option<Subspace>],
    phi_max: f64,
    cone: bool,
) -> f64 {
    let mut total = 0.0;
    for t in 0..tree.horizon() {
        let mut worst = 0.0f64;
        for &n in tree.nodes_at(t) {
            if tree.is_leaf(n) {
                continue;
            }
            let k = if cone { tree.d() } else { subspaces[n].as_ref().map_or(0, |s| s.dim()) };
            for &c in tree.children(n) {
                let y = tree.increment(c);
                worst = worst.max((k as f64).sqrt() * dot(&y, &y).sqrt());
            }
        }
        total += phi_max * worst;
    }
    total
}

fn build_grid(
    tree: &ScenarioTree,
    term: &TerminalEval,
    capital: f64,
    reach: f64,
    n_grid: usize,
    override_range: Option<(f64, f64)>,
) -> Vec<f64> {
    let max_off = term
        .offsets
        .as_ref()
        .map(|v| v.iter().fold(0.0f64, |a, b| a.max(b.abs())))
        .unwrap_or(0.0);
    let mut radius = match override_range {
        Some((lo, hi)) => (capital - lo).abs().max((hi - capital).abs()),
        None => reach.max(1.0),
    };
    // shrink until the terminal utility stays finite over the grid
    let leaf = tree.leaves().next().unwrap();
    let finite = |r: f64| {
        term.eval(leaf, capital - r - max_off).is_finite()
            && term.eval(leaf, capital + r + max_off).is_finite()
    };
    while radius > 1.0 && !finite(radius) {
        radius *= 0.5;
    }
    let m = (n_grid - 1) / 2;
    let h = radius / m as f64;
    (0..n_grid).map(|i| capital + (i as f64 - m as f64) * h).collect()
}

struct GridSolve {
    vfn: Vec<Option<Arc<PLConcave>>>,
    sol: Vec<Option<OneStepSolution>>,
    grid: Vec<f64>,
}

fn backward_pass(
    tree: &ScenarioTree,
    term: &TerminalEval,
    subspaces: &[Option<Subspace>],
    cone: Option<&[Vec<f64>]>,
    phi_max: f64,
    slope_cap: f64,
    grid: Vec<f64>,
    threads: usize,
) -> Result<GridSolve, SolveError> {
    let mut vfn: Vec<Option<Arc<PLConcave>>> = (0..tree.len()).map(|_| None).collect();
    let mut sol: Vec<Option<OneStepSolution>> = (0..tree.len()).map(|_| None).collect();

    // leaf value functions; shared when no claim shifts are present
    if term.offsets.is_none() {
        let leaf0 = tree.leaves().next().unwrap();
        let shared =
            Arc::new(PLConcave::from_fn_slope_capped(&|x| term.eval(leaf0, x), &grid, slope_cap)?);
        for l in tree.leaves() {
            vfn[l] = Some(shared.clone());
        }
    } else {
        for l in tree.leaves() {
            vfn[l] = Some(Arc::new(PLConcave::from_fn_slope_capped(
                &|x| term.eval(l, x),
                &grid,
                slope_cap,
            )?));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SolveError::BadInput(format!("thread pool: {e}")))?;

    for t in (0..tree.horizon()).rev() {
        let nodes: Vec<usize> =
            tree.nodes_at(t).iter().copied().filter(|&n| !tree.is_leaf(n)).collect();
        let results: Vec<(usize, Result<OneStepSolution, OneStepError>)> = pool.install(|| {
            use rayon::prelude::*;
            nodes
                .par_iter()
                .map(|&n| {
                    let children: Vec<(f64, Vec<f64>, Arc<PLConcave>)> = tree
                        .children(n)
                        .iter()
                        .map(|&c| {
                            (
                                tree.node(c).branch_prob,
                                tree.increment(c),
                                vfn[c].as_ref().unwrap().clone(),
                            )
                        })
                        .collect();
                    let r = OneStepProblem::new(
                        children,
                        subspaces[n].as_ref().unwrap().clone(),
                        cone.map(|r| r.to_vec()),
                        phi_max,
                        grid.clone(),
                    )
                    .and_then(|p| solve_one_step(&p));
                    (n, r)
                })
                .collect()
        });
        for (n, r) in results {
            let s = r?;
            vfn[n] = Some(Arc::new(s.g.clone()));
            sol[n] = Some(s);
        }
    }
    Ok(GridSolve { vfn, sol, grid })
}

/// Exact expected terminal utility of an explicit ambient strategy keyed by
/// non-leaf node id.
pub fn expected_utility_of(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    leaf_offsets: Option<&BTreeMap<i64, f64>>,
    capital: f64,
    ambient_strategy: &BTreeMap<i64, Vec<f64>>,
) -> Result<f64, SolveError> {
    let term = TerminalEval::new(tree, u, leaf_offsets)?;
    let mut wealth = vec![f64::NAN; tree.len()];
    wealth[tree.root()] = capital;
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by_key(|&n| tree.node(n).time);
    for n in order {
        if tree.is_leaf(n) {
            continue;
        }
        let phi = ambient_strategy.get(&tree.node(n).id).ok_or_else(|| {
            SolveError::BadInput(format!("missing strategy at node {}", tree.node(n).id))
        })?;
        if phi.len() != tree.d() {
            return Err(SolveError::BadInput("strategy dimension mismatch".into()));
        }
        for &c in tree.children(n) {
            wealth[c] = wealth[n] + dot(phi, &tree.increment(c));
        }
    }
    Ok(tree.leaves().map(|l| tree.path_prob(l) * term.eval(l, wealth[l])).sum())
}

pub fn solve(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    capital: f64,
    config: &Config,
) -> Result<SolveResult, SolveError> {
    solve_with(tree, u, capital, config, &SolveOptions::default())
}

pub fn solve_with(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    capital: f64,
    config: &Config,
    opts: &SolveOptions,
) -> Result<SolveResult, SolveError> {
    config.validate().map_err(SolveError::BadInput)?;
    u.validate().map_err(|e| SolveError::BadInput(e.to_string()))?;
    if !capital.is_finite() {
        return Err(SolveError::BadInput(format!("capital {capital} is not finite")));
    }
    if let Some(rays) = &opts.cone {
        if rays.is_empty() || rays.iter().any(|r| r.len() != tree.d() || dot(r, r) == 0.0) {
            return Err(SolveError::BadInput("cone rays must be nonzero vectors in R^d".into()));
        }
    }

    let term = TerminalEval::new(tree, u, opts.leaf_offsets.as_ref())?;
    let subspaces = node_subspaces(tree, config)?;
    let (ae_plus, ae_minus) = ae_reports(u, config.ae_policy)?;
    let reach = wealth_reach(tree, &subspaces, config.phi_max, opts.cone.is_some());

    let mut n_grid = config.odd_grid();
    let mut history: Vec<RefineRound> = Vec::new();
    let mut last: Option<(GridSolve, Subproblem, f64, usize, f64)> = None;
    let max_solves = config.max_refine_rounds.max(1) + 1;
    let mut converged = config.max_refine_rounds == 0;

    for _ in 0..max_solves {
        let grid = build_grid(tree, &term, capital, reach, n_grid, config.wealth_range);
        let gs = backward_pass(
            tree,
            &term,
            &subspaces,
            opts.cone.as_deref(),
            config.phi_max,
            config.slope_cap,
            grid,
            config.threads,
        )?;

        // forward pass: nearest-grid strategies seed the polish
        let mut init: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        {
            let h = gs.grid[1] - gs.grid[0];
            let grid0 = gs.grid[0];
            let n_pts = gs.grid.len();
            let mut wealth_tmp: Vec<f64> = vec![f64::NAN; tree.len()];
            wealth_tmp[tree.root()] = capital;
            let mut order: Vec<usize> = (0..tree.len()).collect();
            order.sort_by_key(|&n| (tree.node(n).time, tree.node(n).id));
            for n in order {
                if tree.is_leaf(n) {
                    continue;
                }
                let x = wealth_tmp[n];
                let ix = (((x - grid0) / h).round() as i64).clamp(0, n_pts as i64 - 1) as usize;
                let dec = gs.sol[n].as_ref().unwrap().dec[ix].clone();
                for &c in tree.children(n) {
                    let y = tree.increment(c);
                    let pay = match &opts.cone {
                        Some(rays) => {
                            rays.iter().zip(dec.iter()).map(|(r, w)| w * dot(r, &y)).sum::<f64>()
                        }
                        None => dot(&dec, &subspaces[n].as_ref().unwrap().coords(&y)),
                    };
                    wealth_tmp[c] = x + pay;
                }
                init.insert(n, dec);
            }
        }

        let mut sub = Subproblem::new(
            tree,
            &term,
            &subspaces,
            opts.cone.as_deref(),
            config.phi_max,
            tree.root(),
            capital,
        );
        sub.set_strategies(&|n| init.get(&n).cloned());
        if let Some(seed) = opts.jitter_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 0.05 * config.phi_max.min(10.0);
            for (d, vs) in sub.decisions.iter().zip(sub.dec.iter_mut()) {
                for v in vs.iter_mut() {
                    *v += rng.random_range(-scale..scale);
                    if d.nonneg {
                        *v = v.max(0.0);
                    }
                    *v = v.clamp(-config.phi_max, config.phi_max);
                }
            }
            let root = sub.root;
            sub.propagate(root);
        }
        let (sweeps, res) = sub.polish(config.max_polish_sweeps, config.polish_tol, opts.reverse_sweep);
        let root_value = sub.value();
        history.push(RefineRound { n_grid, root_value });

        let done = match &last {
            Some((_, _, prev, _, _)) => (root_value - prev).abs() < config.value_tol,
            None => false,
        };
        last = Some((gs, sub, root_value, sweeps, res));
        if done || config.max_refine_rounds == 0 {
            converged = true;
            break;
        }
        n_grid = 2 * n_grid - 1;
    }

    let (gs, sub, root_value, sweeps, res) = last.unwrap();
    if !converged {
        let last_change = if history.len() >= 2 {
            (history[history.len() - 1].root_value - history[history.len() - 2].root_value).abs()
        } else {
            f64::INFINITY
        };
        return Err(SolveError::GridNotConverged { rounds: history.len(), last_change });
    }

    let mut value_fns = BTreeMap::new();
    for n in 0..tree.len() {
        if let Some(f) = &gs.vfn[n] {
            value_fns.insert(tree.node(n).id, (**f).clone());
        }
    }
    let mut strategy = BTreeMap::new();
    let mut wealth = BTreeMap::new();
    for n in 0..tree.len() {
        wealth.insert(tree.node(n).id, sub.wealth_at(n));
        if !tree.is_leaf(n) {
            let coords = sub.strategy_of(n).unwrap().to_vec();
            let ambient = match &opts.cone {
                Some(rays) => {
                    let mut out = vec![0.0; tree.d()];
                    for (w, r) in coords.iter().zip(rays.iter()) {
                        for (o, ri) in out.iter_mut().zip(r.iter()) {
                            *o += w * ri;
                        }
                    }
                    out
                }
                None => subspaces[n].as_ref().unwrap().from_coords(&coords),
            };
            strategy.insert(tree.node(n).id, NodeStrategy { coords, ambient });
        }
    }

    let boundary: Vec<i64> = sub.box_bound_nodes().iter().map(|&n| tree.node(n).id).collect();
    let dp_root_value = gs.vfn[tree.root()].as_ref().unwrap().eval(capital);

    let mut diagnostics = Diagnostics {
        boundary_hit: !boundary.is_empty(),
        boundary_nodes: boundary,
        refine_history: history,
        grid_converged: converged,
        polish_sweeps: sweeps,
        polish_residual: res,
        wealth_range: (gs.grid[0], gs.grid[gs.grid.len() - 1]),
        ae_plus,
        ae_minus,
        divergence: None,
    };

    if config.detect_divergence && diagnostics.boundary_hit {
        let probe = divergence_probe(tree, u, capital, config, opts, root_value)?;
        let diverged = probe.diverged;
        let growth =
            probe.root_values.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
        diagnostics.divergence = Some(probe);
        if diverged {
            return Err(SolveError::ValueDiverged { growth });
        }
    }

    Ok(SolveResult {
        value_fns,
        strategy,
        wealth,
        root_value,
        dp_root_value,
        capital,
        diagnostics,
    })
}

fn divergence_probe(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    capital: f64,
    config: &Config,
    opts: &SolveOptions,
    base_root: f64,
) -> Result<DivergenceProbe, SolveError> {
    let mut phi_values = vec![config.phi_max];
    let mut root_values = vec![base_root];
    let mut cfg = config.clone();
    cfg.detect_divergence = false;
    cfg.max_refine_rounds = 0;
    for mult in [2.0, 4.0] {
        cfg.phi_max = config.phi_max * mult;
        let r = solve_with(tree, u, capital, &cfg, opts)?;
        phi_values.push(cfg.phi_max);
        root_values.push(r.root_value);
    }
    let g1 = root_values[1] - root_values[0];
    let g2 = root_values[2] - root_values[1];
    let diverged = g1 > config.divergence_tol && g2 > config.divergence_tol;
    Ok(DivergenceProbe { phi_values, root_values, diverged })
}

// ---------------------------------------------------------------------------
// verification reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub trials: usize,
    pub root_value: f64,
    pub best_random: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice_best: Option<f64>,
    /// Largest competitor advantage over the root value (negative = none).
    pub max_advantage: f64,
}

/// Evaluates random predictable strategies, and every strategy on a 0.05
/// lattice over [-3,3] when the tree is tiny, against the solved root value.
pub fn verify_optimality(
    result: &SolveResult,
    tree: &ScenarioTree,
    u: &UtilitySpec,
    leaf_offsets: Option<&BTreeMap<i64, f64>>,
    trials: usize,
    bound: f64,
    seed: u64,
) -> Result<OptimalityReport, SolveError> {
    let term = TerminalEval::new(tree, u, leaf_offsets)?;
    let non_leaf: Vec<usize> = {
        let mut v: Vec<usize> = tree.non_leaf_indices().collect();
        v.sort_by_key(|&n| (tree.node(n).time, tree.node(n).id));
        v
    };
    let d = tree.d();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by_key(|&n| tree.node(n).time);

    let mut slot_of = vec![usize::MAX; tree.len()];
    for (s, &n) in non_leaf.iter().enumerate() {
        slot_of[n] = s;
    }

    let eu_of = |phis: &[f64]| -> f64 {
        let mut wealth = vec![f64::NAN; tree.len()];
        wealth[tree.root()] = result.capital;
        for &n in &order {
            if tree.is_leaf(n) {
                continue;
            }
            let phi = &phis[slot_of[n] * d..slot_of[n] * d + d];
            for &c in tree.children(n) {
                wealth[c] = wealth[n] + dot(phi, &tree.increment(c));
            }
        }
        tree.leaves().map(|l| tree.path_prob(l) * term.eval(l, wealth[l])).sum()
    };

    let total_dim = non_leaf.len() * d;
    let mut best_random = f64::NEG_INFINITY;
    let mut flat = vec![0.0; total_dim];
    for _ in 0..trials {
        for v in flat.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        best_random = best_random.max(eu_of(&flat));
    }

    let lattice_best = if total_dim <= 3 {
        let step = 0.05f64;
        let m = (6.0 / step).round() as usize + 1;
        let mut best = f64::NEG_INFINITY;
        let mut idx = vec![0usize; total_dim];
        loop {
            for (f, &i) in flat.iter_mut().zip(idx.iter()) {
                *f = -3.0 + i as f64 * step;
            }
            best = best.max(eu_of(&flat));
            let mut carry = true;
            for p in idx.iter_mut() {
                if carry {
                    *p += 1;
                    if *p >= m {
                        *p = 0;
                    } else {
                        carry = false;
                    }
                }
            }
            if carry {
                break;
            }
        }
        Some(best)
    } else {
        None
    };

    let best = best_random.max(lattice_best.unwrap_or(f64::NEG_INFINITY));
    Ok(OptimalityReport {
        trials,
        root_value: result.root_value,
        best_random,
        lattice_best,
        max_advantage: best - result.root_value,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub runs: usize,
    /// Largest pairwise strategy deviation (ambient sup-norm) across runs.
    pub max_deviation: f64,
    /// Largest component outside the support subspace across runs.
    pub max_off_subspace: f64,
}

/// Re-solves under restart perturbations (doubled grid, jittered starting
/// strategies, reversed sweep order). Strictly concave utilities must land
/// on the same strategy every time.
pub fn verify_uniqueness(
    tree: &ScenarioTree,
    u: &UtilitySpec,
    capital: f64,
    config: &Config,
    restarts: usize,
) -> Result<UniquenessReport, SolveError> {
    let mut runs = vec![solve(tree, u, capital, config)?];
    if restarts > 1 {
        let mut cfg2 = config.clone();
        cfg2.n_grid = 2 * config.odd_grid() - 1;
        runs.push(solve(tree, u, capital, &cfg2)?);
    }
    for i in 0..restarts.saturating_sub(2) {
        let opts = SolveOptions {
            jitter_seed: Some(config.seed.wrapping_add(i as u64 + 1)),
            reverse_sweep: i % 2 == 0,
            ..Default::default()
        };
        runs.push(solve_with(tree, u, capital, config, &opts)?);
    }

    let mut max_dev = 0.0f64;
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            for (id, sa) in &runs[a].strategy {
                let sb = &runs[b].strategy[id];
                for (x, y) in sa.ambient.iter().zip(sb.ambient.iter()) {
                    max_dev = max_dev.max((x - y).abs());
                }
            }
        }
    }

    let mut max_off = 0.0f64;
    for ix in tree.non_leaf_indices() {
        let dist = tree.conditional_dist(ix)?;
        let (sub, _) = support_subspace(&dist, config.rank_tol);
        for r in &runs {
            let phi = &r.strategy[&tree.node(ix).id].ambient;
            let pr = sub.project(phi);
            for (x, y) in phi.iter().zip(pr.iter()) {
                max_off = max_off.max((x - y).abs());
            }
        }
    }

    Ok(UniquenessReport { runs: runs.len(), max_deviation: max_dev, max_off_subspace: max_off })
}

/// Builds an exact-utility subproblem rooted at a node, for re-solving and
/// envelope checks.
pub(crate) fn make_subproblem<'a>(
    tree: &'a ScenarioTree,
    term: &'a TerminalEval<'a>,
    subspaces: &[Option<Subspace>],
    cone: Option<&'a [Vec<f64>]>,
    config: &Config,
    root_ix: usize,
    x0: f64,
) -> Subproblem<'a> {
    Subproblem::new(tree, term, subspaces, cone, config.phi_max, root_ix, x0)
}

pub(crate) fn all_subspaces(
    tree: &ScenarioTree,
    config: &Config,
) -> Result<Vec<Option<Subspace>>, SolveError> {
    let mut out: Vec<Option<Subspace>> = (0..tree.len()).map(|_| None).collect();
    for ix in tree.non_leaf_indices() {
        let dist = tree.conditional_dist(ix)?;
        let (s, _) = support_subspace(&dist, config.rank_tol);
        out[ix] = Some(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::NodeSpec;

    pub(crate) fn binomial_tree(p_up: f64, up: f64, down: f64) -> ScenarioTree {
        ScenarioTree::from_parts(
            1,
            1,
            vec![
                NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
                NodeSpec { id: 1, parent: Some(0), prob: p_up, prices: vec![up] },
                NodeSpec { id: 2, parent: Some(0), prob: 1.0 - p_up, prices: vec![down] },
            ],
            1000,
        )
        .unwrap()
    }

    fn quick_config() -> Config {
        Config { n_grid: 257, phi_max: 8.0, ..Config::default() }
    }

    #[test]
    fn binomial_exponential_closed_form() {
        // oracle: min over phi of (3/4)e^{-phi} + (1/4)e^{phi} = sqrt(3)/2 at
        // phi = ln(3)/2, so the optimal expected utility is 1 - sqrt(3)/2
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::exponential(1.0);
        let r = solve(&tree, &u, 0.0, &quick_config()).unwrap();
        let phi = &r.strategy[&0];
        assert!((phi.ambient[0] - 3f64.ln() / 2.0).abs() < 1e-9, "{}", phi.ambient[0]);
        assert!((r.root_value - (1.0 - 3f64.sqrt() / 2.0)).abs() < 1e-12);
        assert!(!r.diagnostics.boundary_hit);
        assert!(r.diagnostics.grid_converged);
        // wealth bookkeeping: child wealth = parent wealth + <phi, dS>
        assert_eq!(r.wealth[&0], 0.0);
        assert!((r.wealth[&1] - phi.ambient[0]).abs() < 1e-12);
        assert!((r.wealth[&2] + phi.ambient[0]).abs() < 1e-12);
        // the grid value agrees with the polished value up to PL error
        assert!((r.dp_root_value - r.root_value).abs() < 1e-3);
    }

    #[test]
    fn zero_increment_tree_returns_utility_of_capital() {
        let tree = ScenarioTree::from_parts(
            1,
            2,
            vec![
                NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![5.0] },
                NodeSpec { id: 1, parent: Some(0), prob: 1.0, prices: vec![5.0] },
                NodeSpec { id: 2, parent: Some(1), prob: 0.5, prices: vec![5.0] },
                NodeSpec { id: 3, parent: Some(1), prob: 0.5, prices: vec![5.0] },
            ],
            1000,
        )
        .unwrap();
        let u = UtilitySpec::linear_below_power_above(0.5);
        for c in [-1.0, 0.0, 2.5] {
            let r = solve(&tree, &u, c, &quick_config()).unwrap();
            assert!((r.root_value - u.eval(c)).abs() < 1e-12);
            for s in r.strategy.values() {
                assert!(s.ambient.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn arbitrage_tree_is_refused() {
        let tree = binomial_tree(0.5, 2.0, 1.0);
        let u = UtilitySpec::exponential(1.0);
        match solve(&tree, &u, 0.0, &quick_config()) {
            Err(SolveError::ArbitrageDetected { node: 0, witness }) => {
                assert!(witness[0] > 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn example73_boundary_and_partial_sum() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let n = 40usize;
        let u = UtilitySpec::example73(n + 1);
        let cfg = Config { n_grid: 129, phi_max: n as f64, ..Config::default() };
        let r = solve(&tree, &u, 0.0, &cfg).unwrap();
        let partial: f64 = (1..=n).map(|j| 1.0 / (j as f64 * j as f64)).sum();
        assert!((r.root_value - partial).abs() <= 1e-12, "{} vs {partial}", r.root_value);
        assert!(r.diagnostics.boundary_hit);
        assert_eq!(r.diagnostics.boundary_nodes, vec![0]);
        assert!((r.strategy[&0].ambient[0] - n as f64).abs() < 1e-9);
    }

    #[test]
    fn divergence_probe_classifies_example73() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::example73(200);
        let cfg = Config {
            n_grid: 129,
            phi_max: 10.0,
            detect_divergence: true,
            ..Config::default()
        };
        match solve(&tree, &u, 0.0, &cfg) {
            Err(SolveError::ValueDiverged { growth }) => assert!(growth > 1e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn claim_shift_changes_terminal_utility() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::exponential(1.0);
        let mut offsets = BTreeMap::new();
        offsets.insert(1, 1.0); // pay 1 in the up state
        offsets.insert(2, 0.0);
        let opts = SolveOptions { leaf_offsets: Some(offsets), ..Default::default() };
        let r = solve_with(&tree, &u, 0.0, &quick_config(), &opts).unwrap();
        // hedging the claim pushes the holding up by the replication delta 1/2
        let unhedged = solve(&tree, &u, 0.0, &quick_config()).unwrap();
        assert!(r.strategy[&0].ambient[0] > unhedged.strategy[&0].ambient[0] + 0.49);
    }

    #[test]
    fn chain_inequality_and_concavity_of_value_fns() {
        // 2-period binomial
        let tree = ScenarioTree::from_parts(
            1,
            2,
            vec![
                NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
                NodeSpec { id: 1, parent: Some(0), prob: 0.6, prices: vec![1.0] },
                NodeSpec { id: 2, parent: Some(0), prob: 0.4, prices: vec![-1.0] },
                NodeSpec { id: 3, parent: Some(1), prob: 0.6, prices: vec![2.0] },
                NodeSpec { id: 4, parent: Some(1), prob: 0.4, prices: vec![0.0] },
                NodeSpec { id: 5, parent: Some(2), prob: 0.6, prices: vec![0.0] },
                NodeSpec { id: 6, parent: Some(2), prob: 0.4, prices: vec![-2.0] },
            ],
            1000,
        )
        .unwrap();
        let u = UtilitySpec::exponential(1.0);
        let r = solve(&tree, &u, 0.0, &quick_config()).unwrap();
        // U_t(x) >= sum_i p_i U_{t+1,i}(x) >= U(x) at grid points
        let u0 = &r.value_fns[&0];
        let u1 = &r.value_fns[&1];
        let u2 = &r.value_fns[&2];
        for &x in u0.breakpoints() {
            let mix = 0.6 * u1.eval(x) + 0.4 * u2.eval(x);
            assert!(u0.eval(x) >= mix - 1e-9, "chain at {x}");
            assert!(mix >= u.eval(x) - 1e-9, "chain leaf at {x}");
        }
    }

    #[test]
    fn verify_optimality_binomial() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::exponential(1.0);
        let r = solve(&tree, &u, 0.0, &quick_config()).unwrap();
        let rep = verify_optimality(&r, &tree, &u, None, 10_000, 5.0, 42).unwrap();
        assert!(rep.max_advantage <= 1e-9, "advantage {}", rep.max_advantage);
        // the lattice contains near-optimal points, so the margin is small
        assert!(rep.lattice_best.unwrap() <= r.root_value + 1e-9);
    }

    #[test]
    fn verify_uniqueness_binomial() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::exponential(1.0);
        let rep = verify_uniqueness(&tree, &u, 0.0, &quick_config(), 5).unwrap();
        assert_eq!(rep.runs, 5);
        assert!(rep.max_deviation < 1e-8, "{}", rep.max_deviation);
        assert!(rep.max_off_subspace < 1e-10);
    }

    #[test]
    fn flat_slope_utility_restarts_agree_on_value() {
        // with a flat-slope segment the optimizer need not be unique, but
        // every restart must land on the same optimal value
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::piecewise_linear(vec![-1.0, 1.0], vec![3.0, 2.0, 1.0]);
        let cfg = quick_config();
        let base = solve(&tree, &u, 0.0, &cfg).unwrap();
        for i in 0..3u64 {
            let opts = SolveOptions { jitter_seed: Some(100 + i), ..Default::default() };
            let r = solve_with(&tree, &u, 0.0, &cfg, &opts).unwrap();
            assert!(
                (r.root_value - base.root_value).abs() <= 1e-9,
                "values differ: {} vs {}",
                r.root_value,
                base.root_value
            );
        }
    }

    #[test]
    fn root_value_monotone_and_concave_in_capital() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::exponential(1.0);
        let cfg = quick_config();
        let vals: Vec<f64> = [-1.0, -0.5, 0.0, 0.5, 1.0]
            .iter()
            .map(|&c| solve(&tree, &u, c, &cfg).unwrap().root_value)
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
        for w in vals.windows(3) {
            assert!(w[1] >= (w[0] + w[2]) / 2.0 - 1e-9);
        }
    }

    #[test]
    fn expected_utility_of_explicit_strategy() {
        let tree = binomial_tree(0.75, 1.0, -1.0);
        let u = UtilitySpec::example73(10);
        let mut phi = BTreeMap::new();
        phi.insert(0i64, vec![3.0]);
        let eu = expected_utility_of(&tree, &u, None, 0.0, &phi).unwrap();
        let partial: f64 = (1..=3).map(|j| 1.0 / (j as f64 * j as f64)).sum();
        assert!((eu - partial).abs() <= 1e-12);
    }
}
