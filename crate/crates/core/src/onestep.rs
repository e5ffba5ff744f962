//! The one-step problem: maximize the expected next-step value
//! G(x) = sup_xi sum_i p_i V_i(x + <xi, y_i>) over strategies xi in the
//! support subspace (optionally restricted to a polyhedral cone), for
//! piecewise-linear concave V_i and a finite increment distribution.
//!
//! Solved exactly per wealth-grid point as a linear program over the
//! supporting lines of the V_i, with delayed cut generation: start from a
//! few bracketing lines, solve, add the supporting lines violated at the
//! LP point, repeat. Terminates because each round adds at least one new
//! line from a finite set, and the final point is certified optimal by the
//! relaxation bound.

use crate::geometry::{dot, Subspace};
use crate::pl::PLConcave;
use crate::simplex::{self, LpOutcome, LpProblem, Rel};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OneStepError {
    #[error("objective unbounded: no-arbitrage precheck was skipped or the box is missing")]
    UnboundedObjective,
    #[error("cone constraints are infeasible; rays do not contain the origin direction")]
    InfeasibleCone,
    #[error("internal LP failure: {0}")]
    Internal(String),
}

/// One outcome of the conditional distribution together with the value
/// function that applies along it. Children with different subtrees carry
/// different value functions, so the problem holds one function per child.
#[derive(Debug, Clone)]
pub struct ChildCase {
    pub prob: f64,
    /// Ambient increment y_i.
    pub incr: Vec<f64>,
    /// Increment expressed against the decision variables: subspace
    /// coordinates, or inner products with the cone rays.
    pub incr_dec: Vec<f64>,
    pub value: Arc<PLConcave>,
}

#[derive(Debug, Clone)]
pub struct OneStepProblem {
    pub children: Vec<ChildCase>,
    pub subspace: Subspace,
    /// Generating rays of the constraint cone, if any.
    pub cone: Option<Vec<Vec<f64>>>,
    pub phi_max: f64,
    /// Wealth evaluation points.
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OneStepSolution {
    /// Exact maximum values on the grid, as a concave nondecreasing function.
    pub g: PLConcave,
    /// Decision variables per grid point (subspace coordinates, or ray
    /// weights in the cone case).
    pub dec: Vec<Vec<f64>>,
    /// Strategy in ambient coordinates per grid point.
    pub xi_ambient: Vec<Vec<f64>>,
    pub attained_interior: Vec<bool>,
}

impl OneStepProblem {
    /// Builds the per-child decision coefficients for a problem.
    pub fn new(
        children: Vec<(f64, Vec<f64>, Arc<PLConcave>)>,
        subspace: Subspace,
        cone: Option<Vec<Vec<f64>>>,
        phi_max: f64,
        grid: Vec<f64>,
    ) -> Result<Self, OneStepError> {
        if let Some(rays) = &cone {
            if rays.iter().any(|r| dot(r, r) == 0.0) {
                return Err(OneStepError::InfeasibleCone);
            }
        }
        let children = children
            .into_iter()
            .map(|(prob, incr, value)| {
                let incr_dec = match &cone {
                    Some(rays) => rays.iter().map(|r| dot(r, &incr)).collect(),
                    None => subspace.coords(&incr),
                };
                ChildCase { prob, incr, incr_dec, value }
            })
            .collect();
        Ok(OneStepProblem { children, subspace, cone, phi_max, grid })
    }

    pub fn n_dec(&self) -> usize {
        match &self.cone {
            Some(rays) => rays.len(),
            None => self.subspace.dim(),
        }
    }

    /// Ambient strategy from decision variables.
    pub fn ambient(&self, dec: &[f64]) -> Vec<f64> {
        match &self.cone {
            Some(rays) => {
                let d = rays[0].len();
                let mut out = vec![0.0; d];
                for (w, r) in dec.iter().zip(rays.iter()) {
                    for (o, ri) in out.iter_mut().zip(r.iter()) {
                        *o += w * ri;
                    }
                }
                out
            }
            None => self.subspace.from_coords(dec),
        }
    }

    /// Exact objective sum_i p_i V_i(x + <dec, incr_dec_i>).
    pub fn objective(&self, x: f64, dec: &[f64]) -> f64 {
        self.children
            .iter()
            .map(|c| c.prob * c.value.eval(x + dot(dec, &c.incr_dec)))
            .sum()
    }

    fn interior(&self, dec: &[f64]) -> bool {
        let edge = self.phi_max * (1.0 - 1e-9) - 1e-12;
        match &self.cone {
            Some(_) => self.ambient(dec).iter().all(|v| v.abs() < edge),
            None => dec.iter().all(|v| v.abs() < edge),
        }
    }
}

/// Supporting lines of `f` active at z (two at a kink).
fn lines_at(f: &PLConcave, z: f64) -> Vec<(f64, f64)> {
    let v = f.eval(z);
    let a1 = f.slope_left_at(z);
    let a2 = f.slope_right_at(z);
    let mut out = vec![(a1, v - a1 * z)];
    if (a2 - a1).abs() > 1e-14 * (1.0 + a1.abs()) {
        out.push((a2, v - a2 * z));
    }
    out
}

fn pow2_at_least(v: f64) -> f64 {
    if v <= 1.0 {
        1.0
    } else {
        2f64.powi(v.log2().ceil() as i32)
    }
}

struct PointSolver<'a> {
    p: &'a OneStepProblem,
    n_dec: usize,
    /// Growing line pool per child.
    pool: Vec<Vec<(f64, f64)>>,
}

impl<'a> PointSolver<'a> {
    fn new(p: &'a OneStepProblem) -> Self {
        PointSolver { p, n_dec: p.n_dec(), pool: vec![Vec::new(); p.children.len()] }
    }

    fn seed_pool(&mut self, x: f64) {
        for (i, c) in self.p.children.iter().enumerate() {
            let reach = self.p.phi_max * c.incr_dec.iter().map(|v| v.abs()).sum::<f64>();
            for z in [x, x - reach, x + reach] {
                for l in lines_at(&c.value, z) {
                    self.add_line(i, l);
                }
            }
        }
    }

    fn add_line(&mut self, child: usize, line: (f64, f64)) -> bool {
        // near-duplicates arise when the same segment is probed at different
        // points; they add nothing and leave the float simplex ill posed
        let exists = self.pool[child].iter().any(|(a, b)| {
            (a - line.0).abs() <= 1e-10 * (1.0 + a.abs())
                && (b - line.1).abs() <= 1e-8 * (1.0 + b.abs())
        });
        if !exists {
            self.pool[child].push(line);
        }
        !exists
    }

    /// Builds and solves the pooled LP; when `min_norm` carries the optimal
    /// value, re-solves for the minimum-l1-norm strategy on the optimal face.
    fn solve_pool(&self, x: f64, min_norm: Option<f64>) -> Result<(Vec<f64>, Vec<f64>), OneStepError> {
        let nc = self.p.children.len();
        let nd = self.n_dec;
        let nt = if min_norm.is_some() && self.p.cone.is_none() { nd } else { 0 };
        let nv = nd + nc + nt;
        let mut lp = LpProblem::<f64>::new(nv);
        for j in 0..nd {
            lp.free[j] = self.p.cone.is_none();
        }
        for j in 0..nc {
            lp.free[nd + j] = true;
        }
        match min_norm {
            None => {
                for (j, c) in self.p.children.iter().enumerate() {
                    lp.objective[nd + j] = c.prob;
                }
            }
            Some(opt) => {
                // pin the objective, then minimize the strategy l1 norm
                let mut row = vec![0.0; nv];
                for (j, c) in self.p.children.iter().enumerate() {
                    row[nd + j] = -c.prob;
                }
                lp.push_row(row, Rel::Le, -(opt - 1e-11 * (1.0 + opt.abs())));
                if nt > 0 {
                    for j in 0..nd {
                        lp.objective[nd + nc + j] = -1.0;
                        let mut r1 = vec![0.0; nv];
                        r1[j] = 1.0;
                        r1[nd + nc + j] = -1.0;
                        lp.push_row(r1, Rel::Le, 0.0);
                        let mut r2 = vec![0.0; nv];
                        r2[j] = -1.0;
                        r2[nd + nc + j] = -1.0;
                        lp.push_row(r2, Rel::Le, 0.0);
                    }
                } else {
                    for j in 0..nd {
                        lp.objective[j] = -1.0;
                    }
                }
            }
        }
        for (i, c) in self.p.children.iter().enumerate() {
            for &(a, b) in &self.pool[i] {
                let mut row = vec![0.0; nv];
                for (j, ic) in c.incr_dec.iter().enumerate() {
                    row[j] = -a * ic;
                }
                row[nd + i] = 1.0;
                let rhs = a * x + b;
                let scale = pow2_at_least(row.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                for v in row.iter_mut() {
                    *v /= scale;
                }
                lp.push_row(row, Rel::Le, rhs / scale);
            }
        }
        // search box
        match &self.p.cone {
            None => {
                for j in 0..nd {
                    let mut r = vec![0.0; nv];
                    r[j] = 1.0;
                    lp.push_row(r.clone(), Rel::Le, self.p.phi_max);
                    r[j] = -1.0;
                    lp.push_row(r, Rel::Le, self.p.phi_max);
                }
            }
            Some(rays) => {
                let d = rays[0].len();
                for l in 0..d {
                    let mut r = vec![0.0; nv];
                    for (j, ray) in rays.iter().enumerate() {
                        r[j] = ray[l];
                    }
                    lp.push_row(r.clone(), Rel::Le, self.p.phi_max);
                    for v in r.iter_mut() {
                        *v = -*v;
                    }
                    lp.push_row(r, Rel::Le, self.p.phi_max);
                }
            }
        }
        // deterministic rhs perturbation breaks vertex degeneracy; the cut
        // verification below works on exact values, so the 1e-11 shift never
        // reaches the reported optimum
        let mut perturbed = lp.clone();
        let n_rows = perturbed.rows.len() as f64;
        for (i, row) in perturbed.rows.iter_mut().enumerate() {
            row.2 += 1e-11 * (1.0 + row.2.abs()) * (i + 1) as f64 / n_rows;
        }
        let mut outcome = simplex::solve(&perturbed);
        if !matches!(outcome, LpOutcome::Optimal { .. }) {
            // the pooled system always contains xi = 0 with v at the true
            // values and the box forbids rays, so any float-side failure is
            // conditioning; exact pivoting settles it
            outcome = simplex::solve_exact_from_f64(&lp);
        }
        match outcome {
            LpOutcome::Optimal { x: sol, .. } => {
                let dec = sol[..nd].to_vec();
                let vs = sol[nd..nd + nc].to_vec();
                Ok((dec, vs))
            }
            LpOutcome::Unbounded => Err(OneStepError::UnboundedObjective),
            LpOutcome::Stalled => Err(OneStepError::Internal("LP stalled".into())),
            LpOutcome::Infeasible => {
                if self.p.cone.is_some() {
                    Err(OneStepError::InfeasibleCone)
                } else {
                    Err(OneStepError::Internal("pooled LP infeasible".into()))
                }
            }
        }
    }

    /// Adds violated supporting lines at the point; returns true if any cut
    /// was added.
    fn add_cuts(&mut self, x: f64, dec: &[f64], vs: &[f64]) -> bool {
        let mut added = false;
        for i in 0..self.p.children.len() {
            let z = x + dot(dec, &self.p.children[i].incr_dec);
            let truth = self.p.children[i].value.eval(z);
            if vs[i] > truth + 1e-9 * (1.0 + truth.abs()) {
                for l in lines_at(&self.p.children[i].value, z) {
                    added |= self.add_line(i, l);
                }
            }
        }
        added
    }

    fn solve_point(&mut self, x: f64) -> Result<(Vec<f64>, f64, bool), OneStepError> {
        self.seed_pool(x);
        let mut dec;
        let mut rounds = 0usize;
        loop {
            let (d, vs) = self.solve_pool(x, None)?;
            if !self.add_cuts(x, &d, &vs) {
                dec = d;
                break;
            }
            rounds += 1;
            if rounds > 400 {
                return Err(OneStepError::Internal("cut generation did not settle".into()));
            }
        }
        // deterministic tie-break: smallest l1 strategy on the optimal face,
        // accepted only when it matches the optimum to roundoff
        let opt = self.p.objective(x, &dec);
        loop {
            let (d, vs) = self.solve_pool(x, Some(opt))?;
            if !self.add_cuts(x, &d, &vs) {
                if self.p.objective(x, &d) >= opt - 1e-12 * (1.0 + opt.abs()) {
                    dec = d;
                }
                break;
            }
            rounds += 1;
            if rounds > 500 {
                break;
            }
        }
        let val = self.p.objective(x, &dec);
        let interior = self.p.interior(&dec);
        Ok((dec, val, interior))
    }
}

pub fn solve_one_step(p: &OneStepProblem) -> Result<OneStepSolution, OneStepError> {
    let n = p.grid.len();
    let mut dec = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut interior = Vec::with_capacity(n);

    if p.n_dec() == 0 {
        // nothing to trade: G(x) = sum_i p_i V_i(x)
        for &x in &p.grid {
            dec.push(Vec::new());
            ys.push(p.objective(x, &[]));
            interior.push(true);
        }
    } else {
        for &x in &p.grid {
            // a fresh line pool per point keeps the LPs tiny; cuts re-seed
            // from the local segments in a handful of rounds
            let mut solver = PointSolver::new(p);
            let (d, v, int) = solver.solve_point(x)?;
            dec.push(d);
            ys.push(v);
            interior.push(int);
        }
    }
    let g = PLConcave::from_points_concavified(&p.grid, &ys)
        .map_err(|e| OneStepError::Internal(format!("value assembly: {e}")))?;
    let xi_ambient = dec.iter().map(|d| p.ambient(d)).collect();
    Ok(OneStepSolution { g, dec, xi_ambient, attained_interior: interior })
}

/// Orthogonal projection of an ambient strategy onto the support subspace.
pub fn project_strategy(xi: &[f64], subspace: &Subspace) -> Vec<f64> {
    subspace.project(xi)
}
