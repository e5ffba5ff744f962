//! Python bindings: trees, utilities, solving, measure extraction, and
//! pricing, mirroring the CLI surface.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::collections::BTreeMap;
use utilmax::config::{AePolicy, Config};
use utilmax::engine::{self, SolveOptions, SolveResult};
use utilmax::measure::{self, Claim};
use utilmax::tree::ScenarioTree;
use utilmax::utility::UtilitySpec;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().unbind().into(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.unbind().into()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.unbind().into()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into(),
        serde_json::Value::Array(a) => {
            let list = PyList::empty(py);
            for item in a {
                list.append(json_to_py(py, item)?)?;
            }
            list.unbind().into()
        }
        serde_json::Value::Object(o) => {
            let dict = PyDict::new(py);
            for (k, val) in o {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.unbind().into()
        }
    })
}

fn to_py_report<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(err)?;
    json_to_py(py, &v)
}

/// A validated scenario tree.
#[pyclass(name = "Tree")]
struct Tree {
    inner: ScenarioTree,
}

#[pymethods]
impl Tree {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Tree { inner: ScenarioTree::from_json_str(text, 1_000_000).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.len()
    }

    /// Arbitrage check with per-node certificates, as a dict.
    #[pyo3(signature = (seed = 42))]
    fn validate(&self, py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
        let cfg = Config::default();
        let rep = utilmax::geometry::validate_tree(&self.inner, cfg.rank_tol, cfg.sphere_tol, seed);
        to_py_report(py, &rep)
    }

    fn __repr__(&self) -> String {
        format!(
            "Tree(d={}, horizon={}, nodes={})",
            self.inner.d(),
            self.inner.horizon(),
            self.inner.len()
        )
    }
}

/// A concave nondecreasing utility with U(0) = 0.
#[pyclass(name = "Utility", skip_from_py_object)]
#[derive(Clone)]
struct Utility {
    inner: UtilitySpec,
}

#[pymethods]
impl Utility {
    #[staticmethod]
    fn exponential(a: f64) -> PyResult<Self> {
        let u = UtilitySpec::exponential(a);
        u.validate().map_err(err)?;
        Ok(Utility { inner: u })
    }

    #[staticmethod]
    fn example73(n: usize) -> PyResult<Self> {
        let u = UtilitySpec::example73(n);
        u.validate().map_err(err)?;
        Ok(Utility { inner: u })
    }

    #[staticmethod]
    fn piecewise_linear(breakpoints: Vec<f64>, slopes: Vec<f64>) -> PyResult<Self> {
        let u = UtilitySpec::piecewise_linear(breakpoints, slopes);
        u.validate().map_err(err)?;
        Ok(Utility { inner: u })
    }

    #[staticmethod]
    fn linear_below_power_above(gamma: f64) -> PyResult<Self> {
        let u = UtilitySpec::linear_below_power_above(gamma);
        u.validate().map_err(err)?;
        Ok(Utility { inner: u })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Utility { inner: UtilitySpec::from_json(text).map_err(err)? })
    }

    fn eval(&self, x: f64) -> f64 {
        self.inner.eval(x)
    }

    fn left_derivative(&self, x: f64) -> f64 {
        self.inner.left_derivative(x)
    }

    fn __repr__(&self) -> String {
        format!("Utility({:?})", self.inner.kind)
    }
}

/// Solver handle binding a tree, a utility, and a configuration.
#[pyclass(name = "Solver")]
struct Solver {
    tree: ScenarioTree,
    utility: UtilitySpec,
    config: Config,
    cone: Option<Vec<Vec<f64>>>,
}

#[pymethods]
impl Solver {
    #[new]
    #[pyo3(signature = (tree, utility, phi_max = 1000.0, grid = 513, cone = None,
                        ae_policy = "warn", detect_divergence = false, seed = 42))]
    fn new(
        tree: &Tree,
        utility: &Utility,
        phi_max: f64,
        grid: usize,
        cone: Option<Vec<Vec<f64>>>,
        ae_policy: &str,
        detect_divergence: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let ae_policy = match ae_policy {
            "strict" => AePolicy::Strict,
            "warn" => AePolicy::Warn,
            "off" => AePolicy::Off,
            other => return Err(PyValueError::new_err(format!("unknown ae policy {other:?}"))),
        };
        let config = Config {
            phi_max,
            n_grid: grid,
            ae_policy,
            detect_divergence,
            seed,
            ..Config::default()
        };
        config.validate().map_err(err)?;
        Ok(Solver { tree: tree.inner.clone(), utility: utility.inner.clone(), config, cone })
    }

    fn solve(&self, capital: f64) -> PyResult<Solution> {
        let opts = SolveOptions { cone: self.cone.clone(), ..Default::default() };
        let result =
            engine::solve_with(&self.tree, &self.utility, capital, &self.config, &opts)
                .map_err(err)?;
        Ok(Solution {
            tree: self.tree.clone(),
            utility: self.utility.clone(),
            config: self.config.clone(),
            result,
        })
    }

    /// Indifference price of a bounded claim given as {leaf_id: payoff}.
    #[pyo3(signature = (capital, payoffs, bound, price_tol = 1e-8))]
    fn price(
        &self,
        py: Python<'_>,
        capital: f64,
        payoffs: BTreeMap<i64, f64>,
        bound: f64,
        price_tol: f64,
    ) -> PyResult<Py<PyAny>> {
        let claim = Claim { payoffs, bound };
        let mut cfg = self.config.clone();
        cfg.price_tol = price_tol;
        let rep = measure::price_claim(&self.tree, &self.utility, capital, &claim, &cfg)
            .map_err(err)?;
        to_py_report(py, &rep)
    }
}

/// A solved problem: strategy, wealth, value functions, diagnostics.
#[pyclass(name = "Solution")]
struct Solution {
    tree: ScenarioTree,
    utility: UtilitySpec,
    config: Config,
    result: SolveResult,
}

#[pymethods]
impl Solution {
    #[getter]
    fn root_value(&self) -> f64 {
        self.result.root_value
    }

    #[getter]
    fn dp_root_value(&self) -> f64 {
        self.result.dp_root_value
    }

    #[getter]
    fn capital(&self) -> f64 {
        self.result.capital
    }

    #[getter]
    fn boundary_hit(&self) -> bool {
        self.result.diagnostics.boundary_hit
    }

    /// Holdings per non-leaf node id, in asset coordinates.
    fn strategy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (id, s) in &self.result.strategy {
            d.set_item(id, s.ambient.clone())?;
        }
        Ok(d)
    }

    /// Realized wealth per node id.
    fn wealth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (id, w) in &self.result.wealth {
            d.set_item(id, w)?;
        }
        Ok(d)
    }

    /// Value function at a node as (breakpoints, values).
    fn value_function(&self, node: i64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = self
            .result
            .value_fns
            .get(&node)
            .ok_or_else(|| PyValueError::new_err(format!("no value function at node {node}")))?;
        Ok((f.breakpoints().to_vec(), f.values().to_vec()))
    }

    fn diagnostics(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_report(py, &self.result.diagnostics)
    }

    /// Martingale measure extracted from the optimal strategy.
    #[pyo3(signature = (force = false))]
    fn measure(&self, py: Python<'_>, force: bool) -> PyResult<Py<PyAny>> {
        let m = measure::martingale_measure(&self.result, &self.tree, &self.utility, &self.config, force)
            .map_err(err)?;
        to_py_report(py, &m)
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(root_value={}, boundary_hit={})",
            self.result.root_value,
            if self.result.diagnostics.boundary_hit { "True" } else { "False" }
        )
    }
}

/// Expected terminal utility of an explicit strategy {node_id: [holdings]}.
#[pyfunction]
#[pyo3(signature = (tree, utility, capital, strategy))]
fn expected_utility(
    tree: &Tree,
    utility: &Utility,
    capital: f64,
    strategy: BTreeMap<i64, Vec<f64>>,
) -> PyResult<f64> {
    engine::expected_utility_of(&tree.inner, &utility.inner, None, capital, &strategy).map_err(err)
}

#[pymodule]
fn utilmax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tree>()?;
    m.add_class::<Utility>()?;
    m.add_class::<Solver>()?;
    m.add_class::<Solution>()?;
    m.add_function(wrap_pyfunction!(expected_utility, m)?)?;
    Ok(())
}
