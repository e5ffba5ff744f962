//! Small dense two-phase simplex with Bland's rule, generic over the scalar.
//!
//! Two instantiations are used: exact `BigRational` pivoting for arbitrage
//! detection (inputs are binary floats, hence exactly rational), and `f64`
//! with a 1e-9 feasibility tolerance for the one-step objective LPs where
//! speed matters. Problem sizes here are tiny (tens of rows), so a dense
//! tableau is the right tool.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

pub trait LpNum: Clone + std::fmt::Debug {
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn neg(&self) -> Self;
    /// Strictly positive beyond the scalar's feasibility tolerance.
    fn is_pos(&self) -> bool;
    fn is_neg(&self) -> bool;
    fn lt(&self, o: &Self) -> bool;
}

const F64_TOL: f64 = 1e-9;

impl LpNum for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_pos(&self) -> bool {
        *self > F64_TOL
    }
    fn is_neg(&self) -> bool {
        *self < -F64_TOL
    }
    fn lt(&self, o: &Self) -> bool {
        self < o
    }
}

impl LpNum for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        num_traits::One::one()
    }
    fn from_f64(v: f64) -> Self {
        BigRational::from_float(v).expect("finite float")
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or_else(|| {
            // fall back through a reduced approximation for huge terms
            let n = self.numer().to_f64().unwrap_or(f64::MAX);
            let d = self.denom().to_f64().unwrap_or(f64::MAX);
            n / d
        })
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn neg(&self) -> Self {
        -self
    }
    fn is_pos(&self) -> bool {
        self.numer() > &BigInt::from(0)
    }
    fn is_neg(&self) -> bool {
        self.numer() < &BigInt::from(0)
    }
    fn lt(&self, o: &Self) -> bool {
        self < o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    Le,
    Ge,
    Eq,
}

/// maximize `objective . x` subject to the rows; `free[j]` marks variables
/// without a sign restriction (encoded internally as differences).
#[derive(Debug, Clone)]
pub struct LpProblem<S> {
    pub num_vars: usize,
    pub objective: Vec<S>,
    pub rows: Vec<(Vec<S>, Rel, S)>,
    pub free: Vec<bool>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome<S> {
    Optimal { x: Vec<S>, value: S },
    Infeasible,
    Unbounded,
    /// The float variant stopped making progress inside its tolerance;
    /// callers should re-solve with exact arithmetic.
    Stalled,
}

impl<S: LpNum> LpProblem<S> {
    pub fn new(num_vars: usize) -> Self {
        LpProblem {
            num_vars,
            objective: vec![S::zero(); num_vars],
            rows: Vec::new(),
            free: vec![false; num_vars],
        }
    }

    pub fn push_row(&mut self, coeffs: Vec<S>, rel: Rel, rhs: S) {
        debug_assert_eq!(coeffs.len(), self.num_vars);
        self.rows.push((coeffs, rel, rhs));
    }
}

struct Tableau<S> {
    rows: Vec<Vec<S>>, // m x (n_cols + 1), last entry is rhs
    basis: Vec<usize>,
    n_cols: usize,
    banned: Vec<bool>, // artificial columns once phase 1 is done
}

impl<S: LpNum> Tableau<S> {
    fn pivot(&mut self, r: usize, c: usize) {
        let pivot = self.rows[r][c].clone();
        for v in self.rows[r].iter_mut() {
            *v = v.div(&pivot);
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let factor = row[c].clone();
            if factor.to_f64() == 0.0 {
                continue;
            }
            for (v, p) in row.iter_mut().zip(pivot_row.iter()) {
                *v = v.sub(&factor.mul(p));
            }
        }
        self.basis[r] = c;
    }

    /// Minimizes `cost . x` from the current basic feasible point. Entering
    /// choice is Dantzig's most-negative rule for speed, switching to Bland's
    /// smallest-index rule once the iteration count suggests degeneracy.
    fn run(&mut self, cost: &[S]) -> RunOutcome {
        let m = self.rows.len();
        let bland_after = 4 * (m + self.n_cols) + 64;
        let max_iters = 200 * (m + self.n_cols) + 1000;
        let mut iters = 0usize;
        loop {
            iters += 1;
            if iters > max_iters {
                return RunOutcome::Stalled;
            }
            // reduced costs r_j = c_j - c_B B^-1 A_j
            let mut y = vec![S::zero(); m];
            for (i, &b) in self.basis.iter().enumerate() {
                y[i] = cost[b].clone();
            }
            let bland = iters > bland_after;
            let mut entering: Option<(usize, S)> = None;
            for j in 0..self.n_cols {
                if self.banned[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j].clone();
                for i in 0..m {
                    r = r.sub(&y[i].mul(&self.rows[i][j]));
                }
                if r.is_neg() {
                    if bland {
                        entering = Some((j, r));
                        break; // smallest index
                    }
                    let better = match &entering {
                        None => true,
                        Some((_, best)) => r.lt(best),
                    };
                    if better {
                        entering = Some((j, r));
                    }
                }
            }
            let entering = entering.map(|(j, _)| j);
            let Some(c) = entering else {
                return RunOutcome::Done;
            };
            let mut leaving: Option<(usize, S)> = None;
            for i in 0..m {
                let a = &self.rows[i][c];
                if !a.is_pos() {
                    continue;
                }
                let rhs = self.rows[i][self.n_cols].clone();
                let ratio = rhs.div(a);
                let better = match &leaving {
                    None => true,
                    Some((li, best)) => {
                        ratio.lt(best) || (!best.lt(&ratio) && self.basis[i] < self.basis[*li])
                    }
                };
                if better {
                    leaving = Some((i, ratio));
                }
            }
            let Some((r, _)) = leaving else {
                return RunOutcome::Unbounded;
            };
            self.pivot(r, c);
        }
    }
}

enum RunOutcome {
    Done,
    Unbounded,
    Stalled,
}

/// Solves the problem with a textbook two-phase dense simplex.
pub fn solve<S: LpNum>(p: &LpProblem<S>) -> LpOutcome<S> {
    // standard-form columns: one per nonnegative var, two per free var
    let mut col_of_var: Vec<(usize, Option<usize>)> = Vec::with_capacity(p.num_vars);
    let mut n_std = 0usize;
    for j in 0..p.num_vars {
        if p.free[j] {
            col_of_var.push((n_std, Some(n_std + 1)));
            n_std += 2;
        } else {
            col_of_var.push((n_std, None));
            n_std += 1;
        }
    }
    let m = p.rows.len();
    let n_slack = p.rows.iter().filter(|r| r.1 != Rel::Eq).count();
    let n_cols = n_std + n_slack + m; // artificials for every row, pruned below
    let mut rows: Vec<Vec<S>> = Vec::with_capacity(m);
    let mut basis = vec![0usize; m];
    let mut art_cols = Vec::with_capacity(m);

    let mut slack_ix = n_std;
    for (i, (coeffs, rel, rhs)) in p.rows.iter().enumerate() {
        let mut row = vec![S::zero(); n_cols + 1];
        let flip = rhs.is_neg();
        let sgn = |v: &S| if flip { v.neg() } else { v.clone() };
        for (j, c) in coeffs.iter().enumerate() {
            let (cp, cn) = col_of_var[j];
            row[cp] = sgn(c);
            if let Some(cn) = cn {
                row[cn] = sgn(c).neg();
            }
        }
        row[n_cols] = sgn(rhs);
        let eff_rel = match (rel, flip) {
            (Rel::Le, false) | (Rel::Ge, true) => Rel::Le,
            (Rel::Ge, false) | (Rel::Le, true) => Rel::Ge,
            (Rel::Eq, _) => Rel::Eq,
        };
        match eff_rel {
            Rel::Le => {
                row[slack_ix] = S::one();
                basis[i] = slack_ix;
                slack_ix += 1;
            }
            Rel::Ge => {
                row[slack_ix] = S::one().neg();
                slack_ix += 1;
                let a = n_std + n_slack + i;
                row[a] = S::one();
                basis[i] = a;
                art_cols.push(a);
            }
            Rel::Eq => {
                let a = n_std + n_slack + i;
                row[a] = S::one();
                basis[i] = a;
                art_cols.push(a);
            }
        }
        rows.push(row);
    }

    let mut t = Tableau { rows, basis, n_cols, banned: vec![false; n_cols] };

    // phase 1: minimize the artificial total
    if !art_cols.is_empty() {
        let mut cost = vec![S::zero(); n_cols];
        for &a in &art_cols {
            cost[a] = S::one();
        }
        match t.run(&cost) {
            RunOutcome::Done => {}
            RunOutcome::Stalled => return LpOutcome::Stalled,
            RunOutcome::Unbounded => return LpOutcome::Infeasible, // bounded below; defensive
        }
        let total = t
            .basis
            .iter()
            .enumerate()
            .filter(|(_, b)| art_cols.contains(b))
            .map(|(i, _)| t.rows[i][n_cols].clone())
            .fold(S::zero(), |acc, v| acc.add(&v));
        if total.is_pos() {
            return LpOutcome::Infeasible;
        }
        // drive leftover zero-level artificials out where possible, pivoting
        // on the largest entry to keep the float variant well conditioned
        for i in 0..m {
            if art_cols.contains(&t.basis[i]) {
                let c = (0..n_std + n_slack)
                    .filter(|&c| t.rows[i][c].is_pos() || t.rows[i][c].is_neg())
                    .max_by(|&a, &b| {
                        t.rows[i][a]
                            .to_f64()
                            .abs()
                            .partial_cmp(&t.rows[i][b].to_f64().abs())
                            .unwrap()
                    });
                if let Some(c) = c {
                    t.pivot(i, c);
                }
            }
        }
        for &a in &art_cols {
            t.banned[a] = true;
        }
    }

    // phase 2: minimize the negated objective
    let mut cost = vec![S::zero(); n_cols];
    for j in 0..p.num_vars {
        let (cp, cn) = col_of_var[j];
        cost[cp] = p.objective[j].neg();
        if let Some(cn) = cn {
            cost[cn] = p.objective[j].clone();
        }
    }
    match t.run(&cost) {
        RunOutcome::Done => {}
        RunOutcome::Stalled => return LpOutcome::Stalled,
        RunOutcome::Unbounded => return LpOutcome::Unbounded,
    }

    let mut std_vals = vec![S::zero(); n_cols];
    for (i, &b) in t.basis.iter().enumerate() {
        std_vals[b] = t.rows[i][n_cols].clone();
    }
    let mut x = Vec::with_capacity(p.num_vars);
    for j in 0..p.num_vars {
        let (cp, cn) = col_of_var[j];
        let v = match cn {
            Some(cn) => std_vals[cp].sub(&std_vals[cn]),
            None => std_vals[cp].clone(),
        };
        x.push(v);
    }
    let value = x
        .iter()
        .zip(p.objective.iter())
        .fold(S::zero(), |acc, (xi, ci)| acc.add(&xi.mul(ci)));
    LpOutcome::Optimal { x, value }
}

/// Exact rational feasibility check; returns a witness point when feasible.
pub fn rational_feasible(p: &LpProblem<BigRational>) -> Option<Vec<f64>> {
    match solve(p) {
        LpOutcome::Optimal { x, .. } => Some(x.iter().map(|v| LpNum::to_f64(v)).collect()),
        _ => None,
    }
}

/// Re-solves a float problem with exact rational pivoting. Used as the
/// fallback when the float simplex stalls or misjudges feasibility on
/// ill-conditioned rows.
pub fn solve_exact_from_f64(p: &LpProblem<f64>) -> LpOutcome<f64> {
    let rp = LpProblem::<BigRational> {
        num_vars: p.num_vars,
        objective: p.objective.iter().map(|v| <BigRational as LpNum>::from_f64(*v)).collect(),
        rows: p
            .rows
            .iter()
            .map(|(r, rel, b)| {
                (
                    r.iter().map(|v| <BigRational as LpNum>::from_f64(*v)).collect(),
                    *rel,
                    <BigRational as LpNum>::from_f64(*b),
                )
            })
            .collect(),
        free: p.free.clone(),
    };
    match solve(&rp) {
        LpOutcome::Optimal { x, value } => LpOutcome::Optimal {
            x: x.iter().map(|v| LpNum::to_f64(v)).collect(),
            value: LpNum::to_f64(&value),
        },
        LpOutcome::Infeasible => LpOutcome::Infeasible,
        LpOutcome::Unbounded => LpOutcome::Unbounded,
        LpOutcome::Stalled => LpOutcome::Stalled,
    }
}
