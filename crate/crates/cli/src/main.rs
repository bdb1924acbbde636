//! `eiv` — elliptical errors-in-variables regression from the command line.
//!
//! Subcommands: `fit` (maximum likelihood), `test` (likelihood ratio test with
//! Skovgaard adjustments), `simulate` (Monte Carlo size/power studies), and
//! `discrepancy` (quantile discrepancy curves from simulated statistics).
//! JSON is the canonical output; tables are a rendering for the terminal.

use eiv_cli::{config, dataio};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use eiv::likelihood::FitResult;
use eiv::simulate::{discrepancy_csv, discrepancy_curve, run_null_study, run_power_study};
use eiv::{EllipticalFamily, FamilyKind, HypothesisSpec};

#[derive(Parser)]
#[command(name = "eiv", version, about = "Elliptical errors-in-variables regression with adjusted likelihood ratio tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Dataset CSV: y_1..y_m, x_1..x_p, vech(sigma_e), sigma_ue, vech(sigma_u).
    #[arg(long)]
    data: PathBuf,
    /// Response dimension.
    #[arg(long)]
    m: usize,
    /// Covariate dimension.
    #[arg(long)]
    p: usize,
    /// Error distribution family.
    #[arg(long, value_parser = ["normal", "student_t", "power_exponential"], default_value = "normal")]
    family: String,
    /// Degrees of freedom (student_t).
    #[arg(long)]
    nu: Option<f64>,
    /// Shape parameter (power_exponential).
    #[arg(long)]
    lambda: Option<f64>,
}

impl ModelArgs {
    fn family(&self) -> Result<EllipticalFamily> {
        let kind = match self.family.as_str() {
            "normal" => FamilyKind::Normal,
            "student_t" => FamilyKind::StudentT,
            "power_exponential" => FamilyKind::PowerExponential,
            _ => unreachable!("clap validates"),
        };
        let shape = match kind {
            FamilyKind::Normal => None,
            FamilyKind::StudentT => Some(self.nu.context("--nu is required for student_t")?),
            FamilyKind::PowerExponential => {
                Some(self.lambda.context("--lambda is required for power_exponential")?)
            }
        };
        EllipticalFamily::new(kind, shape, self.m + self.p).map_err(|e| anyhow::anyhow!(e.to_string()))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model by maximum likelihood and print the estimates.
    Fit {
        #[command(flatten)]
        model: ModelArgs,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Likelihood ratio test of fixed values for entries of vec(beta).
    Test {
        #[command(flatten)]
        model: ModelArgs,
        /// Constraint `index=value` on vec(beta), repeatable.
        #[arg(long = "beta", value_name = "IDX=VALUE", required = true)]
        beta: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo size/power study driven by a key-value config file.
    Simulate {
        /// Flat key = value configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for CSV/JSON reports.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config replication count.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Quantile relative discrepancy curve from a file of statistic values.
    Discrepancy {
        /// Single-column CSV of simulated statistic values.
        #[arg(long)]
        data: PathBuf,
        /// Degrees of freedom of the chi-square reference.
        #[arg(long)]
        q: usize,
        /// Output CSV (asymptotic_quantile, relative_discrepancy).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Fit { model, out } => cmd_fit(model, out),
        Command::Test { model, beta, out } => cmd_test(model, beta, out),
        Command::Simulate { config, out, seed, reps } => cmd_simulate(config, out, seed, reps),
        Command::Discrepancy { data, q, out } => cmd_discrepancy(data, q, out),
    }
}

fn fit_json(fit: &FitResult) -> serde_json::Value {
    let theta = &fit.theta_hat;
    let beta = theta.beta();
    let mat = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
    };
    serde_json::json!({
        "beta": mat(&beta),
        "alpha": theta.alpha().iter().cloned().collect::<Vec<f64>>(),
        "mu_x": theta.mu_x().iter().cloned().collect::<Vec<f64>>(),
        "sigma_q": mat(&theta.sigma_q()),
        "sigma_x": mat(&theta.sigma_x()),
        "loglik": fit.loglik,
        "score_norm": fit.score_norm,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "standard_errors": fit.standard_errors().map(|se| se.iter().cloned().collect::<Vec<f64>>()),
    })
}

fn cmd_fit(model: ModelArgs, out: Option<PathBuf>) -> Result<()> {
    let data = dataio::load_dataset(&model.data, model.m, model.p)?;
    let family = model.family()?;
    let fit = eiv::fit_mle(&data, &family, None, None).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let json = fit_json(&fit);
    let text = serde_json::to_string_pretty(&json)?;
    if let Some(path) = &out {
        std::fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn parse_hypothesis(beta: &[String], dims: eiv::ModelDims) -> Result<HypothesisSpec> {
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for spec in beta {
        let Some((ix, val)) = spec.split_once('=') else {
            bail!("--beta expects IDX=VALUE, got {spec:?}");
        };
        indices.push(ix.trim().parse::<usize>().with_context(|| format!("bad beta index {ix:?}"))?);
        values.push(val.trim().parse::<f64>().with_context(|| format!("bad beta value {val:?}"))?);
    }
    HypothesisSpec::new(indices, values, dims).map_err(|e| anyhow::anyhow!(e.to_string()))
}

fn cmd_test(model: ModelArgs, beta: Vec<String>, out: Option<PathBuf>) -> Result<()> {
    let data = dataio::load_dataset(&model.data, model.m, model.p)?;
    let family = model.family()?;
    let hyp = parse_hypothesis(&beta, data.dims())?;
    let report = eiv::lr_test(&data, &family, &hyp).map_err(|e| anyhow::anyhow!(e.to_string()))?;

    let json = serde_json::json!({
        "hypothesis": &hyp,
        "report": &report,
    });
    let text = serde_json::to_string_pretty(&json)?;
    if let Some(path) = &out {
        std::fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{text}");

    eprintln!();
    eprintln!("{:<10} {:>12} {:>12}", "statistic", "value", "p-value");
    eprintln!("{:<10} {:>12.4} {:>12.4}", "LR", report.lr, report.pvalues.lr);
    eprintln!("{:<10} {:>12.4} {:>12.4}", "LR*_a", report.lr_star, report.pvalues.lr_star);
    eprintln!("{:<10} {:>12.4} {:>12.4}", "LR**_a", report.lr_dstar, report.pvalues.lr_dstar);
    if report.flags.lr_near_zero || report.flags.rho_nonpositive_determinant || report.flags.fit_warning {
        eprintln!("flags: {:?}", report.flags);
    }
    Ok(())
}

fn cmd_simulate(config: PathBuf, out: PathBuf, seed: Option<u64>, reps: Option<usize>) -> Result<()> {
    let mut cfg = config::load_sim_config(&config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(reps) = reps {
        cfg.replications = reps;
    }
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let report = run_null_study(&cfg).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    std::fs::write(out.join("null_rates.csv"), report.rates_csv())?;
    std::fs::write(out.join("null_report.json"), serde_json::to_string_pretty(&report)?)?;
    for stat in &report.statistics {
        let mut csv = String::from("value\n");
        for v in &stat.values_sorted {
            csv.push_str(&format!("{v}\n"));
        }
        std::fs::write(out.join(format!("values_{}.csv", stat.name)), csv)?;
    }
    println!("null study: {} replications, {} fit failures", report.replications, report.fit_failures);
    print!("{}", report.rates_csv());

    if cfg.power_grid.is_some() {
        let power = run_power_study(&cfg).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        std::fs::write(out.join("power_rates.csv"), power.rates_csv())?;
        std::fs::write(out.join("power_report.json"), serde_json::to_string_pretty(&power)?)?;
        println!("power study: {} grid points", power.points.len());
        print!("{}", power.rates_csv());
    }
    Ok(())
}

fn cmd_discrepancy(data: PathBuf, q: usize, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(&data)
        .with_context(|| format!("cannot read {}", data.display()))?;
    let mut values = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let tok = raw.trim();
        if tok.is_empty() || (lineno == 0 && tok.parse::<f64>().is_err()) {
            continue; // optional header
        }
        values.push(
            tok.parse::<f64>()
                .with_context(|| format!("{}:{}: not a number: {tok:?}", data.display(), lineno + 1))?,
        );
    }
    let curve = discrepancy_curve(&values, q).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    let csv = discrepancy_csv(&curve);
    match out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}
