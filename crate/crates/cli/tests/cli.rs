//! End-to-end behavior of the `eiv` binary and the file formats.

use std::path::Path;
use std::process::Command;

use eiv::model::ModelDims;
use eiv::Dataset;
use eiv_cli::dataio::{load_dataset, write_dataset};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eiv"))
}

fn synthetic_csv(path: &Path, n: usize, beta: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("y,x,var_e,cov_ue,var_u\n");
    for _ in 0..n {
        let se: f64 = rng.gen::<f64>().powi(2);
        let su: f64 = rng.gen::<f64>().powi(2);
        let x_true = -2.0 + 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let y_true = 0.2 + beta * x_true + 3.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let y = y_true + se.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        let x = x_true + su.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
        out.push_str(&format!("{y},{x},{se},0.0,{su}\n"));
    }
    std::fs::write(path, out).unwrap();
}

#[test]
fn test_subcommand_emits_full_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    synthetic_csv(&data, 30, 1.0, 5);
    let out = dir.path().join("report.json");
    let status = bin()
        .args(["test", "--m", "1", "--p", "1", "--family", "normal", "--beta", "0=1.0"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let report = &json["report"];
    for field in ["lr", "lr_star", "lr_dstar", "q", "pvalues", "flags", "log_rho"] {
        assert!(!report[field].is_null() || field == "log_rho", "missing field {field}");
    }
    for flag in ["lr_near_zero", "rho_nonpositive_determinant", "fit_warning"] {
        assert!(report["flags"][flag].is_boolean());
    }
    assert_eq!(json["hypothesis"]["indices"][0], 0);
}

#[test]
fn malformed_and_inconsistent_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();

    // Negative error variance: PSD failure naming the line.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "y,x,var_e,cov_ue,var_u\n1.0,2.0,-0.1,0.0,0.2\n").unwrap();
    let out = bin()
        .args(["fit", "--m", "1", "--p", "1"])
        .arg("--data")
        .arg(&bad)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("line 2"), "stderr: {msg}");

    // Non-numeric field names its line and column.
    let nan = dir.path().join("nan.csv");
    std::fs::write(&nan, "y,x,var_e,cov_ue,var_u\n1.0,2.0,0.1,0.0,0.2\n1.0,oops,0.1,0.0,0.2\n")
        .unwrap();
    let out = bin()
        .args(["fit", "--m", "1", "--p", "1"])
        .arg("--data")
        .arg(&nan)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    // Wrong column count for the declared dimensions.
    let narrow = dir.path().join("narrow.csv");
    std::fs::write(&narrow, "y,x\n1.0,2.0\n").unwrap();
    let out = bin()
        .args(["fit", "--m", "1", "--p", "1"])
        .arg("--data")
        .arg(&narrow)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expected 5"));
}

#[test]
fn dataset_roundtrip_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = ModelDims::new(2, 2).unwrap();
    let n = 12;
    let z = (0..n)
        .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0)))
        .collect();
    let sigma_e = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.3..0.3));
            &a * a.transpose() + DMatrix::identity(2, 2) * 0.2
        })
        .collect();
    let sigma_ue = (0..n).map(|_| DMatrix::zeros(2, 2)).collect();
    let sigma_u = (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.3..0.3));
            &a * a.transpose() + DMatrix::identity(2, 2) * 0.2
        })
        .collect();
    let data = Dataset::new(dims, z, sigma_e, sigma_ue, sigma_u).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round.csv");
    write_dataset(&data, &path).unwrap();
    let back = load_dataset(&path, 2, 2).unwrap();
    assert_eq!(back.n(), data.n());
    for i in 0..n {
        assert!((&back.z[i] - &data.z[i]).amax() < 1e-12);
        assert!((&back.sigma_e[i] - &data.sigma_e[i]).amax() < 1e-12);
        assert!((&back.sigma_ue[i] - &data.sigma_ue[i]).amax() < 1e-12);
        assert!((&back.sigma_u[i] - &data.sigma_u[i]).amax() < 1e-12);
    }
}

#[test]
fn simulate_is_deterministic_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.cfg");
    std::fs::write(
        &cfg,
        "# tiny smoke study\nfamily = normal\nm = 1\np = 2\nq = 2\nn = 20\nreps = 12\nseed = 99\nlevels = 0.05, 0.10\n",
    )
    .unwrap();
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        let status = bin()
            .arg("simulate")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["null_rates.csv", "null_report.json", "values_lr.csv", "values_lr_dstar.csv"] {
        let a = std::fs::read_to_string(out1.join(file)).unwrap();
        let b = std::fs::read_to_string(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
        assert!(!a.is_empty());
    }
}

#[test]
fn shipped_table1_config_parses_to_the_reference_study() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/table1_p2.cfg");
    let cfg = eiv_cli::config::load_sim_config(&path).unwrap();
    assert_eq!((cfg.m, cfg.p, cfg.q, cfg.n), (1, 2, 2, 20));
    assert_eq!(cfg.replications, 2000);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.nominal_levels, vec![0.01, 0.05, 0.10]);
    assert!(cfg.power_grid.is_none());
    // The true parameters mirror the reference design.
    assert_eq!(cfg.true_theta.alpha()[0], 0.2);
    assert_eq!(cfg.true_theta.mu_x(), nalgebra::DVector::from_element(2, -2.0));
    assert_eq!(cfg.true_theta.sigma_q()[(0, 0)], 10.0);
    assert_eq!(cfg.true_theta.sigma_x(), nalgebra::DMatrix::identity(2, 2) * 4.0);
}

#[test]
fn simulate_missing_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.cfg");
    std::fs::write(&cfg, "family = normal\nm = 1\np = 2\nq = 2\nn = 20\nreps = 5\nlevels = 0.05\n")
        .unwrap();
    let out = bin()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`seed`"));
}

#[test]
fn discrepancy_subcommand_produces_two_column_csv() {
    let dir = tempfile::tempdir().unwrap();
    let values = dir.path().join("values.csv");
    let mut text = String::from("value\n");
    for k in 1..=50 {
        text.push_str(&format!("{}\n", 0.1 * k as f64));
    }
    std::fs::write(&values, text).unwrap();
    let out = dir.path().join("curve.csv");
    let status = bin()
        .arg("discrepancy")
        .arg("--data")
        .arg(&values)
        .args(["--q", "2"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "asymptotic_quantile,relative_discrepancy");
    assert_eq!(lines.count(), 50);
}

#[test]
fn fit_failure_exits_nonzero() {
    // A nearly noiseless linear dataset whose declared measurement errors are
    // far larger than the residual spread pushes the MLE to the boundary of
    // the positive definite region; the fit must fail cleanly.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("degenerate.csv");
    let mut text = String::from("y,x,var_e,cov_ue,var_u\n");
    for i in 0..12 {
        let x = i as f64 / 3.0;
        text.push_str(&format!("{},{x},0.3,0.0,0.3\n", 2.0 * x));
    }
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .args(["test", "--m", "1", "--p", "1", "--beta", "0=1.0"])
        .arg("--data")
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
