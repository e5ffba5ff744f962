//! Report assembly and emission: deterministic JSON documents embedding the
//! resolved configuration, plus CSV dumps of value functions and strategies.

use crate::config::Config;
use crate::engine::SolveResult;
use crate::measure::MeasureReport;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct SolveReport<'a> {
    pub config: &'a Config,
    pub capital: f64,
    pub root_value: f64,
    pub dp_root_value: f64,
    pub strategy: &'a std::collections::BTreeMap<i64, crate::engine::NodeStrategy>,
    pub wealth: &'a std::collections::BTreeMap<i64, f64>,
    /// Whether the optimum at each non-leaf node stayed off the search box.
    pub attained_interior: std::collections::BTreeMap<i64, bool>,
    pub diagnostics: &'a crate::engine::Diagnostics,
}

impl<'a> SolveReport<'a> {
    pub fn new(config: &'a Config, result: &'a SolveResult) -> Self {
        let attained_interior = result
            .strategy
            .keys()
            .map(|id| (*id, !result.diagnostics.boundary_nodes.contains(id)))
            .collect();
        SolveReport {
            config,
            capital: result.capital,
            root_value: result.root_value,
            dp_root_value: result.dp_root_value,
            strategy: &result.strategy,
            wealth: &result.wealth,
            attained_interior,
            diagnostics: &result.diagnostics,
        }
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable report")
}

/// Writes per-node value-function CSVs, a strategy table, and the wealth
/// table into a directory. Field ordering is fixed so diffs are meaningful.
pub fn dump_csv(dir: &Path, result: &SolveResult) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, f) in &result.value_fns {
        let mut w = std::fs::File::create(dir.join(format!("value_function_{id}.csv")))?;
        f.to_csv(&mut w)?;
    }
    let mut w = std::fs::File::create(dir.join("strategy.csv"))?;
    let d = result.strategy.values().next().map_or(0, |s| s.ambient.len());
    write!(w, "node")?;
    for j in 0..d {
        write!(w, ",phi_{j}")?;
    }
    writeln!(w)?;
    for (id, s) in &result.strategy {
        write!(w, "{id}")?;
        for v in &s.ambient {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    let mut w = std::fs::File::create(dir.join("wealth.csv"))?;
    writeln!(w, "node,wealth")?;
    for (id, v) in &result.wealth {
        writeln!(w, "{id},{v}")?;
    }
    Ok(())
}

/// Appends the measure tables to a CSV directory.
pub fn dump_measure_csv(dir: &Path, report: &MeasureReport) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = std::fs::File::create(dir.join("measure.csv"))?;
    writeln!(w, "leaf,density,q")?;
    for (id, d) in &report.density {
        writeln!(w, "{id},{d},{}", report.leaf_q[id])?;
    }
    let mut w = std::fs::File::create(dir.join("residuals.csv"))?;
    writeln!(w, "node,component,residual")?;
    for (id, r) in &report.martingale_residuals {
        for (j, v) in r.iter().enumerate() {
            writeln!(w, "{id},{j},{v}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::solve;
    use crate::tree::{NodeSpec, ScenarioTree};
    use crate::utility::UtilitySpec;

    #[test]
    fn csv_dump_and_deterministic_json() {
        let tree = ScenarioTree::from_parts(
            1,
            1,
            vec![
                NodeSpec { id: 0, parent: None, prob: 1.0, prices: vec![0.0] },
                NodeSpec { id: 1, parent: Some(0), prob: 0.75, prices: vec![1.0] },
                NodeSpec { id: 2, parent: Some(0), prob: 0.25, prices: vec![-1.0] },
            ],
            1000,
        )
        .unwrap();
        let u = UtilitySpec::exponential(1.0);
        let cfg = Config { n_grid: 65, phi_max: 4.0, ..Config::default() };
        let r = solve(&tree, &u, 0.0, &cfg).unwrap();
        let j1 = to_json_pretty(&SolveReport::new(&cfg, &r));
        let r2 = solve(&tree, &u, 0.0, &cfg).unwrap();
        let j2 = to_json_pretty(&SolveReport::new(&cfg, &r2));
        assert_eq!(j1, j2);
        assert!(j1.contains("\"root_value\""));
        assert!(j1.contains("\"n_grid\": 65"));

        let dir = std::env::temp_dir().join(format!("utilmax_csv_{}", std::process::id()));
        dump_csv(&dir, &r).unwrap();
        let strat = std::fs::read_to_string(dir.join("strategy.csv")).unwrap();
        assert!(strat.starts_with("node,phi_0\n0,0.549306"));
        assert!(dir.join("value_function_0.csv").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
