//! `pcv` — estimate, price, hedge, and verify the private-company valuation
//! model from the command line.
//!
//! Configuration precedence: flags > `--config` file > defaults. Reports are
//! CSV (or JSON for parameters) with 17-significant-digit numbers; rerunning
//! a command with identical inputs and seed reproduces the reports byte for
//! byte. Errors leave a one-line JSON object on stderr and a nonzero exit
//! code (2 for operational errors, 1 for failed verification).

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pcv",
    version,
    about = "State-space valuation, pricing, and hedging for private companies"
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config-file key of
/// the same name.
#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Company panel CSV: `t,company,b_tilde,delta_tilde,pays_dividend`.
    #[arg(long, global = true)]
    panel: Option<String>,
    /// Macro series CSV: `t,z1..`.
    #[arg(long = "macro", global = true)]
    macro_file: Option<String>,
    /// Exogenous regressor CSV: `t,psi1..` (default: constant 1).
    #[arg(long, global = true)]
    exog: Option<String>,
    /// Life table CSV: `x,t,tpx`.
    #[arg(long, global = true)]
    lifetable: Option<String>,
    /// Model parameter JSON (as written by `pcv estimate`).
    #[arg(long, global = true)]
    params: Option<String>,
    /// Dividend convention: dividends proportional to book value or to price.
    #[arg(long, global = true, value_parser = ["book", "price"])]
    convention: Option<String>,
    /// RNG seed for Monte Carlo and verification.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo path count.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// EM convergence tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// EM iteration cap.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Output directory for reports (default: stdout).
    #[arg(long, global = true)]
    out: Option<String>,
    /// VAR order of the macro block.
    #[arg(long, global = true)]
    p: Option<usize>,
    /// Time-0 book values, one per company (space separated).
    #[arg(long, global = true, allow_hyphen_values = true)]
    b0: Option<String>,
    /// Presample macro state `z*_0` (ell*p values, newest lag first).
    #[arg(long, global = true, allow_hyphen_values = true)]
    z0_star: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to the panel by maximum likelihood (EM).
    Estimate {
        /// Re-estimate the initial state distribution each iteration.
        #[arg(long)]
        update_initial: bool,
    },
    /// Smoothed latent log price-to-book ratios `m̃_{t|T}`.
    Smooth,
    /// Forecast the observables past the panel under the physical measure.
    Forecast {
        /// Forecast horizon in periods.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Smoothed company values `V_{t|T}`.
    Value,
    /// European call and put prices on each company.
    PriceOption {
        /// Valuation date (default: end of panel).
        #[arg(long)]
        t: Option<usize>,
        /// Option maturity (model period).
        #[arg(long)]
        maturity: Option<usize>,
        /// Strikes (space separated).
        #[arg(long, allow_hyphen_values = true)]
        strike: Option<String>,
    },
    /// Single premium of an equity-linked life insurance contract.
    PriceInsurance {
        /// Valuation date (default: end of panel).
        #[arg(long)]
        t: Option<usize>,
        /// Contract maturity (model period).
        #[arg(long)]
        maturity: Option<usize>,
        /// Product: seg-term, seg-endowment, ul-term, ul-endowment.
        #[arg(long)]
        product: Option<String>,
        /// Age of the insured at model time 0.
        #[arg(long)]
        age: Option<u32>,
        /// Fund units per company (one value broadcasts).
        #[arg(long, allow_hyphen_values = true)]
        fund_units: Option<String>,
        /// Guarantees per company (one value broadcasts).
        #[arg(long, allow_hyphen_values = true)]
        guarantees: Option<String>,
    },
    /// Locally risk-minimizing hedge for an option or insurance claim.
    Hedge {
        /// First information date of the strategy (default: 0).
        #[arg(long)]
        t: Option<usize>,
        /// Hedged claim component (company index, 1-based).
        #[arg(long)]
        company: Option<usize>,
        /// Claim: call, put, seg-term, seg-endowment, ul-term, ul-endowment.
        #[arg(long)]
        claim: Option<String>,
        /// Claim maturity (model period).
        #[arg(long)]
        maturity: Option<usize>,
        /// Option strike(s).
        #[arg(long, allow_hyphen_values = true)]
        strike: Option<String>,
        /// Insured age at model time 0 (insurance claims).
        #[arg(long)]
        age: Option<u32>,
        /// Fund units (insurance claims).
        #[arg(long, allow_hyphen_values = true)]
        fund_units: Option<String>,
        /// Guarantees (insurance claims).
        #[arg(long, allow_hyphen_values = true)]
        guarantees: Option<String>,
    },
    /// Simulate the model and report per-date price summaries.
    Simulate {
        /// Conditioning date (default: 0, the model prior).
        #[arg(long)]
        t: Option<usize>,
        /// Simulation horizon in periods.
        #[arg(long)]
        horizon: Option<usize>,
        /// Measure: real, risk-neutral, or forward.
        #[arg(long)]
        measure: Option<String>,
        /// Numeraire bond maturity (forward measure only).
        #[arg(long)]
        maturity: Option<usize>,
        /// Pair each path with its antithetic mirror.
        #[arg(long)]
        antithetic: Option<bool>,
    },
    /// Run the full self-verification suite and print the pass/fail table.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate { .. } => "estimate",
            Command::Smooth => "smooth",
            Command::Forecast { .. } => "forecast",
            Command::Value => "value",
            Command::PriceOption { .. } => "price-option",
            Command::PriceInsurance { .. } => "price-insurance",
            Command::Hedge { .. } => "hedge",
            Command::Simulate { .. } => "simulate",
            Command::Verify => "verify",
        }
    }
}

/// Builds the effective configuration: defaults, then the config file, then
/// the flags.
fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.common.config {
        cfg.apply_file(path)?;
    }

    let c = &cli.common;
    let mut set = |key: &str, value: Option<String>| -> Result<()> {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set("panel", c.panel.clone())?;
    set("macro", c.macro_file.clone())?;
    set("exog", c.exog.clone())?;
    set("lifetable", c.lifetable.clone())?;
    set("params", c.params.clone())?;
    set("convention", c.convention.clone())?;
    set("seed", c.seed.map(|v| v.to_string()))?;
    set("paths", c.paths.map(|v| v.to_string()))?;
    set("tol", c.tol.map(|v| v.to_string()))?;
    set("max_iter", c.max_iter.map(|v| v.to_string()))?;
    set("out", c.out.clone())?;
    set("p", c.p.map(|v| v.to_string()))?;
    set("b0", c.b0.clone())?;
    set("z0_star", c.z0_star.clone())?;

    match &cli.command {
        Command::Estimate { update_initial } => {
            if *update_initial {
                set("update_initial", Some("true".into()))?;
            }
        }
        Command::Smooth | Command::Value | Command::Verify => {}
        Command::Forecast { horizon } => {
            set("horizon", horizon.map(|v| v.to_string()))?;
        }
        Command::PriceOption { t, maturity, strike } => {
            set("t", t.map(|v| v.to_string()))?;
            set("maturity", maturity.map(|v| v.to_string()))?;
            set("strike", strike.clone())?;
        }
        Command::PriceInsurance { t, maturity, product, age, fund_units, guarantees } => {
            set("t", t.map(|v| v.to_string()))?;
            set("maturity", maturity.map(|v| v.to_string()))?;
            set("claim", product.clone())?;
            set("age", age.map(|v| v.to_string()))?;
            set("fund_units", fund_units.clone())?;
            set("guarantees", guarantees.clone())?;
        }
        Command::Hedge { t, company, claim, maturity, strike, age, fund_units, guarantees } => {
            set("t", t.map(|v| v.to_string()))?;
            set("company", company.map(|v| v.to_string()))?;
            set("claim", claim.clone())?;
            set("maturity", maturity.map(|v| v.to_string()))?;
            set("strike", strike.clone())?;
            set("age", age.map(|v| v.to_string()))?;
            set("fund_units", fund_units.clone())?;
            set("guarantees", guarantees.clone())?;
        }
        Command::Simulate { t, horizon, measure, maturity, antithetic } => {
            set("t", t.map(|v| v.to_string()))?;
            set("horizon", horizon.map(|v| v.to_string()))?;
            set("measure", measure.clone())?;
            set("maturity", maturity.map(|v| v.to_string()))?;
            set("antithetic", antithetic.map(|v| v.to_string()))?;
        }
    }
    Ok(cfg)
}

/// Caps the global worker pool when `PCV_THREADS` is set.
fn init_threads() {
    if let Ok(raw) = std::env::var("PCV_THREADS") {
        match raw.parse::<usize>() {
            Ok(k) if k >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
            _ => eprintln!("warning: ignoring invalid PCV_THREADS value `{raw}`"),
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let cfg = build_config(cli)?;
    log::debug!("effective configuration:\n{}", cfg.canonical());
    match &cli.command {
        Command::Estimate { .. } => commands::cmd_estimate(&cfg),
        Command::Smooth => commands::cmd_smooth(&cfg),
        Command::Forecast { .. } => commands::cmd_forecast(&cfg),
        Command::Value => commands::cmd_value(&cfg),
        Command::PriceOption { .. } => commands::cmd_price_option(&cfg),
        Command::PriceInsurance { .. } => commands::cmd_price_insurance(&cfg),
        Command::Hedge { .. } => commands::cmd_hedge(&cfg),
        Command::Simulate { .. } => commands::cmd_simulate(&cfg),
        Command::Verify => commands::cmd_verify(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    init_threads();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            let payload = serde_json::json!({
                "command": cli.command.name(),
                "error": format!("{err:#}"),
            });
            eprintln!("{payload}");
            ExitCode::from(2)
        }
    }
}
