//! Monte Carlo engine for null rejection rates, power curves, and quantile
//! discrepancy data.
//!
//! Replications are independent and scheduled in parallel; every replication
//! derives its own RNG stream from the master seed, so results are bitwise
//! independent of the thread count. The heteroskedastic design (the known
//! per-observation error scales) is generated once per configuration on a
//! dedicated stream and shared by all replications. Power-study streams are
//! laid out so that a grid point at eta = 0 reproduces the null study exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::elliptical::{EllipticalFamily, FamilyKind};
use crate::error::{EivError, Result};
use crate::model::{mu_of, omega_of, Dataset, HypothesisSpec, ModelDims, ParameterVector};
use crate::skovgaard::{lr_test, TestReport};

/// One simulation-study configuration.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub family: FamilyKind,
    /// nu for Student-t, lambda for power exponential, ignored for normal.
    pub shape: Option<f64>,
    pub m: usize,
    pub p: usize,
    /// Dimension of the tested block (leading entries of vec(beta)).
    pub q: usize,
    pub n: usize,
    pub replications: usize,
    pub seed: u64,
    pub true_theta: ParameterVector,
    pub nominal_levels: Vec<f64>,
    /// Alternative values for the power study; each entry fills the tested
    /// block with a common value eta.
    pub power_grid: Option<Vec<f64>>,
}

impl SimConfig {
    /// Defaults mirroring the simulation design: alpha = 0.2, mu_x = -2,
    /// sigma_q = 10 I, sigma_x = 4 I, beta = 0.
    pub fn with_paper_defaults(
        family: FamilyKind,
        shape: Option<f64>,
        m: usize,
        p: usize,
        q: usize,
        n: usize,
        replications: usize,
        seed: u64,
        nominal_levels: Vec<f64>,
    ) -> Result<Self> {
        let true_theta = ParameterVector::from_blocks(
            &DMatrix::zeros(m, p),
            &DVector::from_element(m, 0.2),
            &DVector::from_element(p, -2.0),
            &(DMatrix::identity(m, m) * 10.0),
            &(DMatrix::identity(p, p) * 4.0),
        )?;
        let cfg = Self {
            family,
            shape,
            m,
            p,
            q,
            n,
            replications,
            seed,
            true_theta,
            nominal_levels,
            power_grid: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(EivError::invalid("replications must be >= 1"));
        }
        if self.q == 0 || self.q > self.m * self.p {
            return Err(EivError::invalid(format!(
                "q = {} must satisfy 1 <= q <= m p = {}",
                self.q,
                self.m * self.p
            )));
        }
        if self.n < 2 {
            return Err(EivError::invalid("n must be at least 2"));
        }
        if self.nominal_levels.is_empty()
            || self.nominal_levels.iter().any(|g| !(*g > 0.0 && *g < 1.0))
        {
            return Err(EivError::invalid("nominal levels must lie in (0, 1)"));
        }
        if let Some(grid) = &self.power_grid {
            if grid.is_empty() {
                return Err(EivError::invalid("power_grid must not be empty"));
            }
        }
        let dims = ModelDims::new(self.m, self.p)?;
        if self.true_theta.dims() != dims {
            return Err(EivError::Dimension("true_theta does not match m, p".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Result<EllipticalFamily> {
        EllipticalFamily::new(self.family, self.shape, self.m + self.p)
    }

    fn dims(&self) -> ModelDims {
        ModelDims { m: self.m, p: self.p }
    }
}

/// Known per-observation error scales, fixed across replications.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub sigma_e: Vec<DMatrix<f64>>,
    pub sigma_ue: Vec<DMatrix<f64>>,
    pub sigma_u: Vec<DMatrix<f64>>,
}

/// Draw the heteroskedastic design: diagonal sigma_e and sigma_u whose square
/// roots are U(0,1), zero sigma_ue. Uses stream 0 of the master seed.
pub fn gen_design(config: &SimConfig) -> DesignMatrices {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let (m, p) = (config.m, config.p);
    let mut sigma_e = Vec::with_capacity(config.n);
    let mut sigma_u = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let de = DVector::from_fn(m, |_, _| {
            let r: f64 = rng.gen::<f64>();
            r * r
        });
        let du = DVector::from_fn(p, |_, _| {
            let r: f64 = rng.gen::<f64>();
            r * r
        });
        sigma_e.push(DMatrix::from_diagonal(&de));
        sigma_u.push(DMatrix::from_diagonal(&du));
    }
    DesignMatrices {
        sigma_e,
        sigma_ue: vec![DMatrix::zeros(p, m); config.n],
        sigma_u,
    }
}

/// Per-level rejection summary for one statistic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelRate {
    pub level: f64,
    pub rejections: usize,
    pub rate: f64,
    /// sqrt(rate (1 - rate) / valid).
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatSummary {
    pub name: String,
    /// Replications contributing to this statistic.
    pub valid: usize,
    pub rates: Vec<LevelRate>,
    pub values_sorted: Vec<f64>,
}

/// Aggregated simulation output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimReport {
    pub replications: usize,
    /// Replications where a fit failed outright; excluded from every denominator.
    pub fit_failures: usize,
    /// Replications where the rho adjustment was abandoned; excluded from the
    /// adjusted statistics' denominators only.
    pub rho_guarded: usize,
    pub statistics: Vec<StatSummary>,
}

impl SimReport {
    pub fn statistic(&self, name: &str) -> Option<&StatSummary> {
        self.statistics.iter().find(|s| s.name == name)
    }

    pub fn rate(&self, name: &str, level: f64) -> Option<f64> {
        self.statistic(name)?
            .rates
            .iter()
            .find(|r| (r.level - level).abs() < 1e-12)
            .map(|r| r.rate)
    }

    /// CSV with one row per statistic and level.
    pub fn rates_csv(&self) -> String {
        let mut out = String::from("statistic,level,rejections,valid,rate,mc_se\n");
        for stat in &self.statistics {
            for r in &stat.rates {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    stat.name, r.level, r.rejections, stat.valid, r.rate, r.mc_se
                ));
            }
        }
        out
    }
}

/// One power-curve point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerPoint {
    pub eta: f64,
    pub report: SimReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerReport {
    pub points: Vec<PowerPoint>,
}

impl PowerReport {
    pub fn rates_csv(&self) -> String {
        let mut out = String::from("eta,statistic,level,rejections,valid,rate,mc_se\n");
        for pt in &self.points {
            for stat in &pt.report.statistics {
                for r in &stat.rates {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        pt.eta, stat.name, r.level, r.rejections, stat.valid, r.rate, r.mc_se
                    ));
                }
            }
        }
        out
    }
}

struct RepOutcome {
    lr: Option<f64>,
    lr_star: Option<f64>,
    lr_dstar: Option<f64>,
    failed: bool,
    guarded: bool,
}

/// Null-hypothesis study: data generated with the tested block at zero, the
/// three statistics compared against chi-square critical values.
pub fn run_null_study(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    let design = gen_design(config);
    run_study_at(config, &design, 0.0, 0, false)
}

/// Power study over `power_grid`: data generated with the tested block filled
/// with eta, only the adjusted statistics reported. Requires p = q, the
/// design under which the power tables are defined.
pub fn run_power_study(config: &SimConfig) -> Result<PowerReport> {
    config.validate()?;
    let grid = config
        .power_grid
        .clone()
        .ok_or_else(|| EivError::invalid("power_grid is required for a power study"))?;
    if config.p != config.q {
        return Err(EivError::invalid("power study requires p = q"));
    }
    let design = gen_design(config);
    let points = grid
        .iter()
        .enumerate()
        .map(|(idx, &eta)| {
            let report = run_study_at(config, &design, eta, idx, true)?;
            Ok(PowerPoint { eta, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PowerReport { points })
}

fn run_study_at(
    config: &SimConfig,
    design: &DesignMatrices,
    eta: f64,
    eta_index: usize,
    adjusted_only: bool,
) -> Result<SimReport> {
    let dims = config.dims();
    let family = config.family()?;
    let hyp = HypothesisSpec::new((0..config.q).collect(), vec![0.0; config.q], dims)?;

    // True parameter with the tested block set to eta.
    let mut theta_true = config.true_theta.clone();
    for j in 0..config.q {
        theta_true.theta_mut()[j] = eta;
    }

    // A template dataset carrying the design; z is filled per replication.
    let template = Dataset::new(
        dims,
        vec![DVector::zeros(dims.obs_dim()); config.n],
        design.sigma_e.clone(),
        design.sigma_ue.clone(),
        design.sigma_u.clone(),
    )?;
    let mu = mu_of(&theta_true);
    let chols: Vec<DMatrix<f64>> = (0..config.n)
        .map(|i| {
            let omega = omega_of(&theta_true, i, &template, &family)?;
            crate::chol::chol(&omega)
        })
        .collect::<Result<Vec<_>>>()?;

    let reps = config.replications;
    let stream_base = 1 + (eta_index * reps) as u64;
    let outcomes: Vec<RepOutcome> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream_base + rep as u64);
            let mut data = template.clone();
            for i in 0..config.n {
                match family.sample(&mu, &chols[i], &mut rng) {
                    Ok(z) => data.z[i] = z,
                    Err(_) => {
                        return RepOutcome {
                            lr: None,
                            lr_star: None,
                            lr_dstar: None,
                            failed: true,
                            guarded: false,
                        }
                    }
                }
            }
            match lr_test(&data, &family, &hyp) {
                Ok(report) => outcome_from_report(&report),
                Err(_) => RepOutcome {
                    lr: None,
                    lr_star: None,
                    lr_dstar: None,
                    failed: true,
                    guarded: false,
                },
            }
        })
        .collect();

    let chi = ChiSquared::new(config.q as f64).expect("q >= 1");
    let crits: Vec<f64> = config
        .nominal_levels
        .iter()
        .map(|g| chi.inverse_cdf(1.0 - g))
        .collect();

    let mut names: Vec<(&str, Box<dyn Fn(&RepOutcome) -> Option<f64>>)> = Vec::new();
    if !adjusted_only {
        names.push(("lr", Box::new(|o: &RepOutcome| o.lr)));
    }
    names.push(("lr_star", Box::new(|o: &RepOutcome| o.lr_star)));
    names.push(("lr_dstar", Box::new(|o: &RepOutcome| o.lr_dstar)));

    let statistics = names
        .iter()
        .map(|(name, get)| {
            let mut values: Vec<f64> = outcomes.iter().filter_map(|o| get(o)).collect();
            let valid = values.len();
            let rates = config
                .nominal_levels
                .iter()
                .zip(crits.iter())
                .map(|(&level, &crit)| {
                    let rejections = values.iter().filter(|v| **v > crit).count();
                    let rate = if valid > 0 { rejections as f64 / valid as f64 } else { 0.0 };
                    let mc_se = if valid > 0 {
                        (rate * (1.0 - rate) / valid as f64).sqrt()
                    } else {
                        0.0
                    };
                    LevelRate { level, rejections, rate, mc_se }
                })
                .collect();
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
            StatSummary { name: name.to_string(), valid, rates, values_sorted: values }
        })
        .collect();

    Ok(SimReport {
        replications: reps,
        fit_failures: outcomes.iter().filter(|o| o.failed).count(),
        rho_guarded: outcomes.iter().filter(|o| o.guarded).count(),
        statistics,
    })
}

fn outcome_from_report(report: &TestReport) -> RepOutcome {
    if report.flags.rho_nonpositive_determinant {
        RepOutcome {
            lr: Some(report.lr),
            lr_star: None,
            lr_dstar: None,
            failed: false,
            guarded: true,
        }
    } else {
        RepOutcome {
            lr: Some(report.lr),
            lr_star: Some(report.lr_star),
            lr_dstar: Some(report.lr_dstar),
            failed: false,
            guarded: false,
        }
    }
}

/// Quantile relative discrepancies against the chi-square reference: for the
/// order statistic of rank k out of N, the pair
/// `(Q_k, (value_k - Q_k) / Q_k)` with `Q_k` the chi-square quantile at
/// k / (N + 1).
pub fn discrepancy_curve(statistic_values: &[f64], q: usize) -> Result<Vec<(f64, f64)>> {
    if statistic_values.is_empty() {
        return Err(EivError::invalid("no statistic values supplied"));
    }
    if q == 0 {
        return Err(EivError::invalid("q must be positive"));
    }
    let mut values = statistic_values.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let chi = ChiSquared::new(q as f64).expect("q >= 1");
    let n = values.len();
    Ok(values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let quantile = chi.inverse_cdf((k + 1) as f64 / (n + 1) as f64);
            (quantile, (v - quantile) / quantile)
        })
        .collect())
}

/// Two-column CSV for a discrepancy curve.
pub fn discrepancy_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("asymptotic_quantile,relative_discrepancy\n");
    for (q, d) in curve {
        out.push_str(&format!("{q},{d}\n"));
    }
    out
}

/// Kolmogorov-Smirnov distance between sorted statistic values and the
/// chi-square(q) distribution.
pub fn ks_distance_chi2(values_sorted: &[f64], q: usize) -> f64 {
    let chi = ChiSquared::new(q as f64).expect("q >= 1");
    let n = values_sorted.len();
    let mut ks: f64 = 0.0;
    for (i, v) in values_sorted.iter().enumerate() {
        let cdf = chi.cdf(v.max(0.0));
        ks = ks
            .max((cdf - (i + 1) as f64 / n as f64).abs())
            .max((cdf - i as f64 / n as f64).abs());
    }
    ks
}
