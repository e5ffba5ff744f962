//! Solver configuration: grid sizing, search box, tolerances, policies.

use serde::{Deserialize, Serialize};

/// Policy for the asymptotic-elasticity checks declared on a utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AePolicy {
    /// Refuse to solve when a declared check fails.
    Strict,
    /// Record the failure in diagnostics and continue.
    #[default]
    Warn,
    /// Skip the checks entirely.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    /// Number of wealth-grid points (forced odd so the initial capital is a grid point).
    pub n_grid: usize,
    /// Search box for one-step optimizers: |xi_j| <= phi_max in subspace coordinates.
    pub phi_max: f64,
    /// Root-value convergence threshold for grid refinement.
    pub value_tol: f64,
    /// First-order / martingale-residual tolerance.
    pub fo_tol: f64,
    /// Indifference-price bisection tolerance.
    pub price_tol: f64,
    /// Strategy agreement tolerance for uniqueness restarts.
    pub strategy_tol: f64,
    /// Relative rank tolerance for the support-subspace orthogonalization.
    pub rank_tol: f64,
    /// Angular tolerance for certificate searches in dimension >= 3.
    pub sphere_tol: f64,
    /// Root-value growth per phi_max doubling that classifies a solve as divergent.
    pub divergence_tol: f64,
    pub ae_policy: AePolicy,
    /// Maximum grid-doubling rounds before GridNotConverged.
    pub max_refine_rounds: usize,
    /// Run the phi_max-doubling divergence test when a boundary optimum is detected.
    pub detect_divergence: bool,
    /// Hard cap on tree size accepted by the loader.
    pub max_nodes: usize,
    /// Worker threads for the backward pass; 0 = rayon default.
    pub threads: usize,
    /// Seed for randomized verification subcommands.
    pub seed: u64,
    /// Override the derived wealth-grid range.
    pub wealth_range: Option<(f64, f64)>,
    /// Maximum strategy-polish sweeps over the tree.
    pub max_polish_sweeps: usize,
    /// Target conditional first-order residual for the polish stage.
    pub polish_tol: f64,
    /// Slope ceiling for grid value functions: steeper terminal utility is
    /// continued by its tangent line. Keeps the one-step programs numerically
    /// solvable when the utility plunges at the far end of the wealth grid;
    /// the polish stage and all reported values use the exact utility.
    pub slope_cap: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_grid: 513,
            phi_max: 1e3,
            value_tol: 1e-6,
            fo_tol: 1e-6,
            price_tol: 1e-6,
            strategy_tol: 1e-6,
            rank_tol: 1e-9,
            sphere_tol: 1e-4,
            divergence_tol: 1e-3,
            ae_policy: AePolicy::Warn,
            max_refine_rounds: 6,
            detect_divergence: false,
            max_nodes: 1_000_000,
            threads: 0,
            seed: 42,
            wealth_range: None,
            max_polish_sweeps: 500,
            polish_tol: 1e-9,
            slope_cap: 1e6,
        }
    }
}

impl Config {
    /// Checks the basic invariants: positive tolerances, a usable grid.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_grid < 3 {
            return Err(format!("n_grid must be >= 3, got {}", self.n_grid));
        }
        let tols = [
            ("value_tol", self.value_tol),
            ("fo_tol", self.fo_tol),
            ("price_tol", self.price_tol),
            ("strategy_tol", self.strategy_tol),
            ("rank_tol", self.rank_tol),
            ("sphere_tol", self.sphere_tol),
            ("divergence_tol", self.divergence_tol),
            ("polish_tol", self.polish_tol),
            ("slope_cap", self.slope_cap),
        ];
        for (name, v) in tols {
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.phi_max > 0.0) || !self.phi_max.is_finite() {
            return Err(format!("phi_max must be positive and finite, got {}", self.phi_max));
        }
        Ok(())
    }

    /// Grid size rounded up to the next odd count so the capital sits on a grid point.
    pub fn odd_grid(&self) -> usize {
        if self.n_grid % 2 == 0 { self.n_grid + 1 } else { self.n_grid }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(Config::default().validate().is_ok());
    }

    #[test]
    fn rejects_bad_grid_and_tolerances() {
        let mut c = Config::default();
        c.n_grid = 2;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.fo_tol = 0.0;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.phi_max = f64::INFINITY;
        assert!(c.validate().is_err());
    }

    #[test]
    fn odd_grid_rounds_up() {
        let mut c = Config::default();
        c.n_grid = 512;
        assert_eq!(c.odd_grid(), 513);
        c.n_grid = 513;
        assert_eq!(c.odd_grid(), 513);
    }
}
