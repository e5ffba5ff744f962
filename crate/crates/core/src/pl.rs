//! Finite piecewise-linear concave nondecreasing functions: the computational
//! representation of value functions. Exact evaluation, supporting-line form,
//! and discretization of utility specs onto wealth grids.

use crate::utility::UtilitySpec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlError {
    #[error("breakpoints must be strictly increasing and finite")]
    BadBreakpoints,
    #[error("need at least one breakpoint")]
    Empty,
    #[error("slopes increase left to right: not concave (max violation {0:.3e})")]
    NotConcave(f64),
    #[error("negative slope {0:.3e}: not nondecreasing")]
    NotMonotone(f64),
    #[error("utility violates concavity on the grid near x = {0}")]
    NotConcaveOnGrid(f64),
}

/// A concave nondecreasing piecewise-linear function, finite everywhere.
/// Linear extrapolation beyond the first/last breakpoint with the stored
/// end slopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PLConcave {
    xs: Vec<f64>,
    ys: Vec<f64>,
    left_slope: f64,
    right_slope: f64,
}

impl PLConcave {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, left_slope: f64, right_slope: f64) -> Result<Self, PlError> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(PlError::Empty);
        }
        if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
            return Err(PlError::BadBreakpoints);
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PlError::BadBreakpoints);
        }
        let f = PLConcave { xs, ys, left_slope, right_slope };
        f.check_shape()?;
        Ok(f)
    }

    /// Single-segment line through (x0, y0).
    pub fn line(x0: f64, y0: f64, slope: f64) -> Self {
        PLConcave { xs: vec![x0], ys: vec![y0], left_slope: slope, right_slope: slope }
    }

    fn check_shape(&self) -> Result<(), PlError> {
        let slopes = self.all_slopes();
        let scale = slopes.iter().fold(1.0f64, |a, s| a.max(s.abs()));
        for w in slopes.windows(2) {
            if w[1] > w[0] + 1e-9 * scale {
                return Err(PlError::NotConcave(w[1] - w[0]));
            }
        }
        if let Some(&s) = slopes.iter().find(|s| **s < -1e-9 * scale) {
            return Err(PlError::NotMonotone(s));
        }
        Ok(())
    }

    /// Left extrapolation slope, interior chord slopes, right extrapolation slope.
    fn all_slopes(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.xs.len() + 1);
        v.push(self.left_slope);
        for i in 1..self.xs.len() {
            v.push((self.ys[i] - self.ys[i - 1]) / (self.xs[i] - self.xs[i - 1]));
        }
        v.push(self.right_slope);
        v
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    pub fn end_slopes(&self) -> (f64, f64) {
        (self.left_slope, self.right_slope)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0] + self.left_slope * (x - self.xs[0]);
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1] + self.right_slope * (x - self.xs[n - 1]);
        }
        // first index with xs[i] >= x; x strictly inside (xs[i-1], xs[i])
        let i = self.xs.partition_point(|v| *v < x);
        if self.xs[i] == x {
            return self.ys[i];
        }
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let t = (x - x0) / (x1 - x0);
        self.ys[i - 1] + t * (self.ys[i] - self.ys[i - 1])
    }

    /// Slope of the piece (a, b] containing x.
    pub fn slope_left_at(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.left_slope;
        }
        if x > self.xs[n - 1] {
            return self.right_slope;
        }
        let i = self.xs.partition_point(|v| *v < x);
        (self.ys[i] - self.ys[i - 1]) / (self.xs[i] - self.xs[i - 1])
    }

    /// Slope of the piece [a, b) containing x.
    pub fn slope_right_at(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] {
            return self.left_slope;
        }
        if x >= self.xs[n - 1] {
            return self.right_slope;
        }
        let i = self.xs.partition_point(|v| *v <= x);
        (self.ys[i] - self.ys[i - 1]) / (self.xs[i] - self.xs[i - 1])
    }

    /// Minimal list of lines (a, b) with f(x) = min_k (a_k x + b_k) everywhere.
    pub fn sup_lines(&self) -> Vec<(f64, f64)> {
        let mut lines: Vec<(f64, f64)> = Vec::with_capacity(self.xs.len() + 1);
        let push = |a: f64, b: f64, lines: &mut Vec<(f64, f64)>| {
            if let Some(&(pa, pb)) = lines.last() {
                let scale = 1.0 + pa.abs().max(a.abs());
                if (a - pa).abs() <= 1e-12 * scale {
                    // same slope: keep the lower line so the min form is unchanged
                    if b < pb {
                        lines.pop();
                    } else {
                        return;
                    }
                }
            }
            lines.push((a, b));
        };
        push(self.left_slope, self.ys[0] - self.left_slope * self.xs[0], &mut lines);
        for i in 1..self.xs.len() {
            let a = (self.ys[i] - self.ys[i - 1]) / (self.xs[i] - self.xs[i - 1]);
            push(a, self.ys[i] - a * self.xs[i], &mut lines);
        }
        push(self.right_slope, self.ys[self.xs.len() - 1] - self.right_slope * self.xs[self.xs.len() - 1], &mut lines);
        lines
    }

    /// PL interpolant of a utility on a sorted grid. End slopes are outward
    /// difference quotients over one grid cell, clamped so the result stays
    /// concave and nondecreasing.
    pub fn from_utility(u: &UtilitySpec, grid: &[f64]) -> Result<Self, PlError> {
        Self::from_fn(&|x| u.eval(x), grid)
    }

    /// Same as `from_utility` for an arbitrary evaluator (leaf-shifted
    /// terminal functions).
    pub fn from_fn(f: &dyn Fn(f64) -> f64, grid: &[f64]) -> Result<Self, PlError> {
        if grid.len() < 2 {
            return Err(PlError::Empty);
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PlError::BadBreakpoints);
        }
        let ys: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(PlError::BadBreakpoints);
        }
        let n = grid.len();
        let chord = |i: usize| (ys[i + 1] - ys[i]) / (grid[i + 1] - grid[i]);
        let scale = (0..n - 1).fold(1.0f64, |a, i| a.max(chord(i).abs()));
        for i in 0..n - 2 {
            if chord(i + 1) > chord(i) + 1e-9 * scale {
                return Err(PlError::NotConcaveOnGrid(grid[i + 1]));
            }
        }
        let h0 = grid[1] - grid[0];
        let hn = grid[n - 1] - grid[n - 2];
        let left = ((f(grid[0]) - f(grid[0] - h0)) / h0).max(chord(0));
        let right = ((f(grid[n - 1] + hn) - f(grid[n - 1])) / hn).min(chord(n - 2)).max(0.0);
        PLConcave::new(grid.to_vec(), ys, left, right)
    }

    /// Like `from_fn`, but continues the function along its tangent line
    /// wherever it falls steeper than `cap`: a concave majorant with bounded
    /// slopes. Grid cells whose chords exceed the cap are raised right to
    /// left, which also absorbs overflowed evaluations at the far ends.
    pub fn from_fn_slope_capped(
        f: &dyn Fn(f64) -> f64,
        grid: &[f64],
        cap: f64,
    ) -> Result<Self, PlError> {
        if grid.len() < 2 {
            return Err(PlError::Empty);
        }
        if grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(PlError::BadBreakpoints);
        }
        let n = grid.len();
        let mut ys: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
        for i in (0..n - 1).rev() {
            let floor = ys[i + 1] - cap * (grid[i + 1] - grid[i]);
            if !(ys[i] >= floor) {
                ys[i] = floor; // also catches -inf and NaN evaluations
            }
        }
        if ys.iter().any(|v| !v.is_finite()) {
            return Err(PlError::BadBreakpoints);
        }
        let chord = |i: usize, ys: &[f64]| (ys[i + 1] - ys[i]) / (grid[i + 1] - grid[i]);
        let scale = (0..n - 1).fold(1.0f64, |a, i| a.max(chord(i, &ys).abs()));
        for i in 0..n - 2 {
            if chord(i + 1, &ys) > chord(i, &ys) + 1e-9 * scale {
                return Err(PlError::NotConcaveOnGrid(grid[i + 1]));
            }
        }
        let h0 = grid[1] - grid[0];
        let hn = grid[n - 1] - grid[n - 2];
        let out_left = (ys[0] - f(grid[0] - h0)) / h0;
        let left =
            if out_left.is_finite() { out_left.max(chord(0, &ys)) } else { cap }.min(cap);
        let out_right = (f(grid[n - 1] + hn) - ys[n - 1]) / hn;
        let right = if out_right.is_finite() {
            out_right.min(chord(n - 2, &ys)).max(0.0)
        } else {
            chord(n - 2, &ys).max(0.0)
        };
        PLConcave::new(grid.to_vec(), ys, left, right)
    }

    /// Builds the upper concave envelope of sampled points, then truncates to
    /// a nondecreasing function. Used for value functions assembled from
    /// per-point maximizations, where roundoff can leave slope wiggles of LP
    /// tolerance size; the envelope never moves a point by more than that.
    pub fn from_points_concavified(xs: &[f64], ys: &[f64]) -> Result<Self, PlError> {
        assert_eq!(xs.len(), ys.len());
        if xs.is_empty() {
            return Err(PlError::Empty);
        }
        if xs.len() == 1 {
            return Ok(PLConcave::line(xs[0], ys[0], 0.0));
        }
        // upper hull, dropping collinear points
        let mut hull: Vec<(f64, f64)> = Vec::with_capacity(xs.len());
        for (&x, &y) in xs.iter().zip(ys.iter()) {
            while hull.len() >= 2 {
                let (x1, y1) = hull[hull.len() - 2];
                let (x2, y2) = hull[hull.len() - 1];
                // keep (x2,y2) only if it lies strictly above chord (x1,y1)-(x,y)
                let cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                if cross >= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push((x, y));
        }
        // enforce nondecreasing: cut after the peak, extend flat
        let mut peak = hull.len();
        for i in 1..hull.len() {
            if hull[i].1 < hull[i - 1].1 {
                peak = i;
                break;
            }
        }
        let truncated = peak < hull.len();
        hull.truncate(peak);
        if hull.len() == 1 {
            return Ok(PLConcave::line(hull[0].0, hull[0].1, 0.0));
        }
        let hx: Vec<f64> = hull.iter().map(|p| p.0).collect();
        let hy: Vec<f64> = hull.iter().map(|p| p.1).collect();
        let m = hx.len();
        let first = ((hy[1] - hy[0]) / (hx[1] - hx[0])).max(0.0);
        let last = if truncated {
            0.0
        } else {
            ((hy[m - 1] - hy[m - 2]) / (hx[m - 1] - hx[m - 2])).max(0.0)
        };
        PLConcave::new(hx, hy, first, last)
    }

    /// Largest one-cell interpolation-error bound: for a concave function
    /// sampled on this grid, |PL - f| on a cell is at most the slope drop
    /// across the cell times the cell width over 4.
    pub fn interp_error_bound(&self) -> f64 {
        let slopes = self.all_slopes();
        let mut worst = 0.0f64;
        for i in 1..self.xs.len() {
            let h = self.xs[i] - self.xs[i - 1];
            let drop = (slopes[i - 1] - slopes[i + 1]).max(0.0);
            worst = worst.max(drop * h / 4.0);
        }
        worst
    }

    /// Debug dump as CSV rows `x,f(x)`.
    pub fn to_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "x,value")?;
        for (x, y) in self.xs.iter().zip(self.ys.iter()) {
            writeln!(w, "{x},{y}")?;
        }
        Ok(())
    }
}
