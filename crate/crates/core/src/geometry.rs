//! Conditional-support geometry and quantitative no-arbitrage certificates.
//!
//! At each node the increments span an affine hull; its direction subspace D
//! carries all payoff-relevant strategy components. Absence of arbitrage is
//! decided exactly by rational linear programming, and certified by a pair
//! (beta, kappa): every unit direction in D loses more than beta with
//! conditional probability at least kappa.

use crate::simplex::{self, LpNum, LpProblem, Rel};
use crate::tree::{ConditionalDist, ScenarioTree};
use num_rational::BigRational;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("degenerate support: D = {{0}} at node {0}, certificate is vacuous")]
    DegenerateSupport(i64),
}

/// Orthonormal basis of a vector subspace of R^d.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subspace {
    pub basis: Vec<Vec<f64>>,
}

impl Subspace {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    /// Coordinates of an ambient vector in the basis.
    pub fn coords(&self, v: &[f64]) -> Vec<f64> {
        self.basis.iter().map(|b| dot(b, v)).collect()
    }

    /// Ambient vector from basis coordinates.
    pub fn from_coords(&self, c: &[f64]) -> Vec<f64> {
        let d = self.basis.first().map_or(0, |b| b.len());
        let mut out = vec![0.0; d];
        for (w, b) in c.iter().zip(self.basis.iter()) {
            for (o, bi) in out.iter_mut().zip(b.iter()) {
                *o += w * bi;
            }
        }
        out
    }

    /// Orthogonal projection onto the subspace.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        if self.basis.is_empty() {
            return vec![0.0; v.len()];
        }
        self.from_coords(&self.coords(v))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Direction subspace and offset of the affine hull of the support points.
///
/// The offset is the component of the barycenter orthogonal to the direction
/// subspace; it vanishes exactly when the affine hull is a vector subspace,
/// and a nonzero offset is itself an arbitrage direction.
pub fn support_subspace(dist: &ConditionalDist, rank_tol: f64) -> (Subspace, Vec<f64>) {
    let d = dist.increments[0].0.len();
    let n = dist.increments.len();
    let mut mean = vec![0.0; d];
    for (y, _) in &dist.increments {
        for (m, v) in mean.iter_mut().zip(y.iter()) {
            *m += v / n as f64;
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let scale = dist
        .increments
        .iter()
        .map(|(y, _)| {
            let diff: Vec<f64> = y.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
            norm(&diff)
        })
        .fold(0.0f64, f64::max);
    if scale > 0.0 {
        // modified Gram-Schmidt with a relative rank cutoff
        for (y, _) in &dist.increments {
            let mut v: Vec<f64> = y.iter().zip(mean.iter()).map(|(a, b)| a - b).collect();
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b.iter()) {
                    *vi -= c * bi;
                }
            }
            // second orthogonalization pass for numerical hygiene
            for b in &basis {
                let c = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b.iter()) {
                    *vi -= c * bi;
                }
            }
            let nv = norm(&v);
            if nv > rank_tol * scale {
                basis.push(v.iter().map(|x| x / nv).collect());
                if basis.len() == d {
                    break;
                }
            }
        }
    }
    let sub = Subspace { basis };
    let proj = sub.project(&mean);
    let offset: Vec<f64> = mean.iter().zip(proj.iter()).map(|(a, b)| a - b).collect();
    (sub, offset)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum NaOutcome {
    NoArbitrage,
    /// A strategy with nonnegative payoff against every increment and
    /// strictly positive payoff against at least one.
    Arbitrage { witness: Vec<f64> },
}

/// Decides absence of one-step arbitrage exactly.
///
/// Arbitrage exists iff some xi satisfies <xi, y_i> >= 0 for all support
/// points with at least one strict inequality, normalized here as
/// sum_i <xi, y_i> >= 1. The feasibility LP is solved with exact rational
/// pivoting (floats are rationals), so the verdict carries no tolerance.
/// Equivalently, no-arbitrage holds iff 0 lies in the relative interior of
/// the convex hull of the support, and the verdict is invariant under the
/// projection into D-coordinates.
pub fn check_na(dist: &ConditionalDist, subspace: &Subspace) -> NaOutcome {
    let d = dist.increments[0].0.len();
    let mut p = LpProblem::<BigRational>::new(d);
    p.free = vec![true; d];
    let mut total = vec![<BigRational as LpNum>::zero(); d];
    for (y, _) in &dist.increments {
        let row: Vec<BigRational> = y.iter().map(|v| <BigRational as LpNum>::from_f64(*v)).collect();
        for (t, r) in total.iter_mut().zip(row.iter()) {
            *t = t.add(r);
        }
        p.push_row(row, Rel::Ge, <BigRational as LpNum>::zero());
    }
    p.push_row(total, Rel::Ge, <BigRational as LpNum>::one());
    match simplex::rational_feasible(&p) {
        Some(xi) => {
            // report the witness restricted to its payoff-relevant component
            // when the support already spans a vector subspace
            let w = if subspace.dim() == d { xi } else { normalize_witness(xi) };
            NaOutcome::Arbitrage { witness: w }
        }
        None => NaOutcome::NoArbitrage,
    }
}

fn normalize_witness(xi: Vec<f64>) -> Vec<f64> {
    let n = norm(&xi);
    if n > 0.0 {
        xi.iter().map(|v| v / n).collect()
    } else {
        xi
    }
}

/// Quantitative no-arbitrage certificate at one node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaCertificate {
    pub node: i64,
    pub beta: f64,
    pub kappa: f64,
    /// Unit directions (ambient coordinates) attaining the minimal mass.
    pub witness_directions: Vec<Vec<f64>>,
}

/// kappa(delta) = min over unit p in D of the conditional mass of
/// {<p, Y> < -delta}, together with the minimizing directions in D-coords.
///
/// Exact for dim D <= 2 (finitely many critical angles); dim >= 3 uses a
/// seeded spherical sample with local refinement down to `sphere_tol` in
/// angle. Comparisons leave a 1e-12 relative margin, which can only
/// under-count mass, so reported certificates stay valid.
pub fn kappa_at(coords: &[(Vec<f64>, f64)], dim: usize, delta: f64, sphere_tol: f64, seed: u64) -> (f64, Vec<Vec<f64>>) {
    let margin = 1e-12 * coords.iter().map(|(z, _)| norm(z)).fold(1.0f64, f64::max);
    let mass = |p: &[f64]| -> f64 {
        coords
            .iter()
            .filter(|(z, _)| dot(p, z) < -delta - margin)
            .map(|(_, pr)| pr)
            .sum()
    };
    match dim {
        0 => (0.0, Vec::new()),
        1 => {
            let cands = [vec![1.0], vec![-1.0]];
            best_directions(&cands, &mass)
        }
        2 => {
            let mut angles: Vec<f64> = Vec::new();
            for (z, _) in coords {
                let r = norm(z);
                if r <= delta {
                    continue;
                }
                let phi = z[1].atan2(z[0]);
                // <p(theta), z> = r cos(theta - phi) = -delta
                let a = (-delta / r).acos();
                angles.push(phi + a);
                angles.push(phi - a);
            }
            if angles.is_empty() {
                // no direction sees any mass below -delta
                return (0.0, vec![vec![1.0, 0.0]]);
            }
            angles = angles.iter().map(|t| t.rem_euclid(std::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut cands: Vec<Vec<f64>> = Vec::with_capacity(3 * angles.len());
            for (i, &t) in angles.iter().enumerate() {
                let next = if i + 1 < angles.len() { angles[i + 1] } else { angles[0] + std::f64::consts::TAU };
                let mid = 0.5 * (t + next);
                for a in [t, mid] {
                    cands.push(vec![a.cos(), a.sin()]);
                }
            }
            best_directions(&cands, &mass)
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cands: Vec<Vec<f64>> = Vec::with_capacity(4096);
            // include the support directions themselves and coordinate axes
            for (z, _) in coords {
                let r = norm(z);
                if r > 0.0 {
                    cands.push(z.iter().map(|v| v / r).collect());
                    cands.push(z.iter().map(|v| -v / r).collect());
                }
            }
            for j in 0..dim {
                let mut e = vec![0.0; dim];
                e[j] = 1.0;
                cands.push(e.clone());
                e[j] = -1.0;
                cands.push(e);
            }
            for _ in 0..4096 {
                cands.push(random_unit(&mut rng, dim));
            }
            let (mut best, mut dirs) = best_directions(&cands, &mass);
            // local refinement around the current best direction
            let mut step = 0.5f64;
            let mut center = dirs[0].clone();
            while step > sphere_tol {
                let mut improved = false;
                for _ in 0..64 {
                    let jitter = random_unit(&mut rng, dim);
                    let mut cand: Vec<f64> = center
                        .iter()
                        .zip(jitter.iter())
                        .map(|(c, j)| c + step * j)
                        .collect();
                    let n = norm(&cand);
                    for v in cand.iter_mut() {
                        *v /= n;
                    }
                    let m = mass(&cand);
                    if m < best {
                        best = m;
                        center = cand;
                        improved = true;
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
            if mass(&center) <= best {
                dirs = vec![center];
            }
            (best, dirs)
        }
    }
}

fn best_directions(cands: &[Vec<f64>], mass: &dyn Fn(&[f64]) -> f64) -> (f64, Vec<Vec<f64>>) {
    let mut best = f64::INFINITY;
    let mut dirs = Vec::new();
    for p in cands {
        let m = mass(p);
        if m < best - 1e-15 {
            best = m;
            dirs = vec![p.clone()];
        } else if (m - best).abs() <= 1e-15 && dirs.len() < 8 {
            dirs.push(p.clone());
        }
    }
    (best, dirs)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Builds a certificate by scanning candidate thresholds delta from the
/// finite set of probe inner products and keeping the best delta * kappa
/// score. Any pair with kappa(beta) = kappa > 0 certifies no-arbitrage;
/// the score is a policy choice, not part of the contract.
pub fn na_certificate(
    dist: &ConditionalDist,
    subspace: &Subspace,
    node_id: i64,
    sphere_tol: f64,
    seed: u64,
) -> Result<NaCertificate, GeomError> {
    let dim = subspace.dim();
    if dim == 0 {
        return Err(GeomError::DegenerateSupport(node_id));
    }
    let coords: Vec<(Vec<f64>, f64)> = dist
        .increments
        .iter()
        .map(|(y, p)| (subspace.coords(y), *p))
        .collect();

    // candidate deltas: |<p, z_i>| over probe directions p
    let mut probes: Vec<Vec<f64>> = Vec::new();
    for (z, _) in &coords {
        let r = norm(z);
        if r > 0.0 {
            probes.push(z.iter().map(|v| v / r).collect());
            probes.push(z.iter().map(|v| -v / r).collect());
        }
    }
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        probes.push(e.clone());
        e[j] = -1.0;
        probes.push(e);
    }
    let mut deltas: Vec<f64> = Vec::new();
    for p in &probes {
        for (z, _) in &coords {
            let v = dot(p, z).abs();
            if v > 0.0 {
                deltas.push(v * (1.0 - 1e-9));
            }
        }
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    deltas.dedup_by(|a, b| (*a - *b).abs() <= 1e-15 * a.abs());

    let mut best: Option<(f64, f64, Vec<Vec<f64>>)> = None; // (beta, kappa, dirs)
    for &delta in &deltas {
        let (k, dirs) = kappa_at(&coords, dim, delta, sphere_tol, seed);
        if k > 0.0 {
            let better = match &best {
                None => true,
                Some((b, kb, _)) => delta * k > b * kb,
            };
            if better {
                best = Some((delta, k, dirs));
            }
        }
    }
    if best.is_none() {
        // fall back to a shrinking threshold; under no-arbitrage the mass is
        // positive for every direction once delta is below the inradius
        let scale = coords.iter().map(|(z, _)| norm(z)).fold(1.0f64, f64::max);
        let mut delta = 1e-6 * scale;
        while delta > 1e-13 * scale {
            let (k, dirs) = kappa_at(&coords, dim, delta, sphere_tol, seed);
            if k > 0.0 {
                best = Some((delta, k, dirs));
                break;
            }
            delta *= 0.1;
        }
    }
    let (beta, kappa, dirs) = best.unwrap_or((0.0, 0.0, Vec::new()));
    Ok(NaCertificate {
        node: node_id,
        beta,
        kappa,
        witness_directions: dirs.iter().map(|p| subspace.from_coords(p)).collect(),
    })
}

/// Whole-tree verdict: no-arbitrage must hold at every node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub verdict: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arbitrage: Option<ArbitrageFinding>,
    pub certificates: Vec<NaCertificate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArbitrageFinding {
    pub node: i64,
    pub witness: Vec<f64>,
}

pub fn validate_tree(
    tree: &ScenarioTree,
    rank_tol: f64,
    sphere_tol: f64,
    seed: u64,
) -> ValidationReport {
    let mut certificates = Vec::new();
    let mut ordered: Vec<usize> = tree.non_leaf_indices().collect();
    ordered.sort_by_key(|&i| tree.node(i).id);
    for ix in ordered {
        let dist = tree.conditional_dist(ix).expect("non-leaf");
        let (sub, _offset) = support_subspace(&dist, rank_tol);
        match check_na(&dist, &sub) {
            NaOutcome::Arbitrage { witness } => {
                return ValidationReport {
                    verdict: "arbitrage".into(),
                    arbitrage: Some(ArbitrageFinding { node: tree.node(ix).id, witness }),
                    certificates: Vec::new(),
                };
            }
            NaOutcome::NoArbitrage => {
                if sub.dim() > 0 {
                    let cert =
                        na_certificate(&dist, &sub, tree.node(ix).id, sphere_tol, seed).unwrap();
                    certificates.push(cert);
                }
            }
        }
    }
    ValidationReport { verdict: "no_arbitrage".into(), arbitrage: None, certificates }
}
