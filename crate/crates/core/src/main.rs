//! Command-line surface: validate, solve, measure, price, demo, verify.
//! Exit codes: 0 success, 1 input error, 2 arbitrage, 3 divergence or
//! non-attainment under the strict elasticity policy.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use utilmax::config::{AePolicy, Config};
use utilmax::engine::{self, SolveError, SolveOptions};
use utilmax::measure::{self, Claim};
use utilmax::report;
use utilmax::tree::ScenarioTree;
use utilmax::utility::UtilitySpec;
use utilmax::{demo, geometry};

#[derive(Parser)]
#[command(name = "utilmax", version, about = "Expected-utility maximization on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolveArgs {
    /// Scenario tree JSON file.
    tree: PathBuf,
    /// Utility spec JSON file.
    #[arg(long)]
    utility: PathBuf,
    /// Initial capital.
    #[arg(long)]
    capital: f64,
    /// Cone rays JSON file ({"rays": [[...], ...]}).
    #[arg(long)]
    cone: Option<PathBuf>,
    /// Strategy search box half-width.
    #[arg(long)]
    phimax: Option<f64>,
    /// Wealth grid size.
    #[arg(long)]
    grid: Option<usize>,
    /// Elasticity-check policy.
    #[arg(long, value_enum, default_value = "warn")]
    require_ae: AeFlag,
    /// Classify boundary optima by re-solving with a doubled box.
    #[arg(long)]
    detect_divergence: bool,
    /// Skip grid refinement (single backward pass).
    #[arg(long)]
    no_refine: bool,
    /// Directory for CSV dumps of value functions and strategies.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
    /// Random seed for verification subcommands.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum AeFlag {
    Strict,
    Warn,
    Off,
}

impl From<AeFlag> for AePolicy {
    fn from(v: AeFlag) -> Self {
        match v {
            AeFlag::Strict => AePolicy::Strict,
            AeFlag::Warn => AePolicy::Warn,
            AeFlag::Off => AePolicy::Off,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a tree for arbitrage and emit per-node certificates.
    Validate {
        tree: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Solve the utility maximization problem.
    Solve(SolveArgs),
    /// Extract the martingale measure from the optimal strategy.
    Measure {
        #[command(flatten)]
        args: SolveArgs,
        /// Proceed even when the optimum sits on the strategy box.
        #[arg(long)]
        force: bool,
    },
    /// Indifference price of a bounded claim.
    Price {
        #[command(flatten)]
        args: SolveArgs,
        /// Claim JSON file ({"payoffs": {"leaf": value, ...}, "bound": l}).
        #[arg(long)]
        claim: PathBuf,
    },
    /// Built-in demonstrations.
    Demo {
        #[command(subcommand)]
        which: DemoCommand,
    },
    /// Optimality and uniqueness verification reports.
    Verify {
        #[command(flatten)]
        args: SolveArgs,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Non-attainment demo: expected utilities are partial sums of 1/j^2.
    Example73 {
        /// Utility truncation depth.
        #[arg(long, default_value_t = 250)]
        n: usize,
        /// Table rows to print.
        #[arg(long, default_value_t = 50)]
        table: usize,
        /// Strategy-box schedule (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = vec![50.0, 100.0, 200.0])]
        phimax: Vec<f64>,
        #[arg(long, default_value_t = 129)]
        grid: usize,
    },
}

fn config_from(args: &SolveArgs) -> Config {
    let mut cfg = Config::default();
    if let Some(p) = args.phimax {
        cfg.phi_max = p;
    }
    if let Some(g) = args.grid {
        cfg.n_grid = g;
    }
    cfg.ae_policy = args.require_ae.into();
    cfg.detect_divergence = args.detect_divergence;
    if args.no_refine {
        cfg.max_refine_rounds = 0;
    }
    cfg.seed = args.seed;
    if let Ok(t) = std::env::var("UTILMAX_THREADS") {
        if let Ok(t) = t.parse::<usize>() {
            cfg.threads = t;
        }
    }
    cfg
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        let code = match &e {
            SolveError::ArbitrageDetected { .. } => 2,
            SolveError::ValueDiverged { .. } | SolveError::AeCheckFailed { .. } => 3,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<measure::MeasureError> for CliError {
    fn from(e: measure::MeasureError) -> Self {
        match e {
            measure::MeasureError::Solve(s) => s.into(),
            measure::MeasureError::BoundaryOptimum(_) => {
                CliError { code: 3, message: e.to_string() }
            }
            _ => CliError { code: 1, message: e.to_string() },
        }
    }
}

fn load_tree(path: &PathBuf, max_nodes: usize) -> Result<ScenarioTree, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    ScenarioTree::from_json_str(&text, max_nodes)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_utility(path: &PathBuf) -> Result<UtilitySpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    UtilitySpec::from_json(&text).map_err(|e| CliError::input(e.to_string()))
}

fn load_cone(path: &PathBuf) -> Result<Vec<Vec<f64>>, CliError> {
    #[derive(serde::Deserialize)]
    struct ConeJson {
        rays: Vec<Vec<f64>>,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let c: ConeJson = serde_json::from_str(&text).map_err(|e| CliError::input(e.to_string()))?;
    Ok(c.rays)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { tree, seed } => {
            let cfg = Config { seed, ..Config::default() };
            let t = load_tree(&tree, cfg.max_nodes)?;
            let rep = geometry::validate_tree(&t, cfg.rank_tol, cfg.sphere_tol, cfg.seed);
            println!("{}", report::to_json_pretty(&rep));
            if rep.verdict == "arbitrage" {
                return Err(CliError { code: 2, message: "arbitrage found".into() });
            }
            Ok(())
        }
        Command::Solve(args) => {
            let cfg = config_from(&args);
            let t = load_tree(&args.tree, cfg.max_nodes)?;
            let u = load_utility(&args.utility)?;
            let mut opts = SolveOptions::default();
            if let Some(p) = &args.cone {
                opts.cone = Some(load_cone(p)?);
            }
            let r = engine::solve_with(&t, &u, args.capital, &cfg, &opts)?;
            println!("{}", report::to_json_pretty(&report::SolveReport::new(&cfg, &r)));
            if let Some(dir) = &args.csv_dir {
                report::dump_csv(dir, &r).map_err(|e| CliError::input(e.to_string()))?;
            }
            Ok(())
        }
        Command::Measure { args, force } => {
            let cfg = config_from(&args);
            let t = load_tree(&args.tree, cfg.max_nodes)?;
            let u = load_utility(&args.utility)?;
            let mut opts = SolveOptions::default();
            if let Some(p) = &args.cone {
                opts.cone = Some(load_cone(p)?);
            }
            let r = engine::solve_with(&t, &u, args.capital, &cfg, &opts)?;
            let m = measure::martingale_measure(&r, &t, &u, &cfg, force)?;
            println!("{}", report::to_json_pretty(&m));
            if let Some(dir) = &args.csv_dir {
                report::dump_measure_csv(dir, &m).map_err(|e| CliError::input(e.to_string()))?;
            }
            Ok(())
        }
        Command::Price { args, claim } => {
            let cfg = config_from(&args);
            let t = load_tree(&args.tree, cfg.max_nodes)?;
            let u = load_utility(&args.utility)?;
            let text = std::fs::read_to_string(&claim)
                .map_err(|e| CliError::input(format!("{}: {e}", claim.display())))?;
            let c = Claim::from_json(&text).map_err(|e| CliError::input(e.to_string()))?;
            let p = measure::price_claim(&t, &u, args.capital, &c, &cfg)?;
            println!("{}", report::to_json_pretty(&p));
            Ok(())
        }
        Command::Demo { which } => match which {
            DemoCommand::Example73 { n, table, phimax, grid } => {
                let cfg = Config { n_grid: grid, ..Config::default() };
                let rep = demo::run_example73(n, table, &phimax, &cfg)?;
                println!("{:>4} {:>18} {:>18} {:>12}", "n", "EU(n S1)", "partial sum", "gap");
                for row in &rep.rows {
                    println!(
                        "{:>4} {:>18.12} {:>18.12} {:>12.6}",
                        row.n, row.expected_utility, row.partial_sum, row.gap_to_limit
                    );
                }
                println!("limit pi^2/6 = {:.12}", rep.limit);
                for s in &rep.solves {
                    println!(
                        "solve phimax={:>8.1}: root={:.9} gap={:.6} boundary={} phi*={:.1}",
                        s.phi_max, s.root_value, s.gap_to_limit, s.boundary_hit, s.strategy
                    );
                }
                println!("{}", report::to_json_pretty(&rep));
                Ok(())
            }
        },
        Command::Verify { args, trials, restarts } => {
            let cfg = config_from(&args);
            let t = load_tree(&args.tree, cfg.max_nodes)?;
            let u = load_utility(&args.utility)?;
            let r = engine::solve(&t, &u, args.capital, &cfg)?;
            let opt = engine::verify_optimality(&r, &t, &u, None, trials, 5.0, cfg.seed)?;
            let uniq = engine::verify_uniqueness(&t, &u, args.capital, &cfg, restarts)?;
            #[derive(serde::Serialize)]
            struct VerifyReport<'a> {
                config: &'a Config,
                optimality: &'a engine::OptimalityReport,
                uniqueness: &'a engine::UniquenessReport,
            }
            println!(
                "{}",
                report::to_json_pretty(&VerifyReport {
                    config: &cfg,
                    optimality: &opt,
                    uniqueness: &uniq
                })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
