//! Acceptance suite: one test per release criterion, each printing a PASS
//! line with the measured quantities. Run with
//! `cargo test -p eiv-cli --test acceptance -- --nocapture`.

use std::process::Command;

use eiv::elliptical::EllipticalFamily;
use eiv::likelihood::{fit_mle, loglik, observed_info, score};
use eiv::model::{mu_of, omega_of, theta_derivs, Dataset, HypothesisSpec, ModelDims, ParameterVector};
use eiv::simulate::{gen_design, ks_distance_chi2, run_null_study, run_power_study, SimConfig};
use eiv::skovgaard::{ancillary, fit_pair, log_rho, lr_test, sample_space_derivs};
use eiv::FamilyKind;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;

fn families(dim: usize) -> Vec<(&'static str, EllipticalFamily)> {
    vec![
        ("normal", EllipticalFamily::normal(dim).unwrap()),
        ("student_t(5)", EllipticalFamily::student_t(5.0, dim).unwrap()),
        ("power_exponential(0.6)", EllipticalFamily::power_exponential(0.6, dim).unwrap()),
    ]
}

fn random_dataset(m: usize, p: usize, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let dims = ModelDims::new(m, p).unwrap();
    let z = (0..n)
        .map(|_| DVector::from_fn(m + p, |_, _| rng.gen_range(-3.0..3.0)))
        .collect();
    let sigma_e = (0..n)
        .map(|_| DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.gen_range(0.05..0.6))))
        .collect();
    let sigma_ue = (0..n).map(|_| DMatrix::zeros(p, m)).collect();
    let sigma_u = (0..n)
        .map(|_| DMatrix::from_diagonal(&DVector::from_fn(p, |_, _| rng.gen_range(0.05..0.6))))
        .collect();
    Dataset::new(dims, z, sigma_e, sigma_ue, sigma_u).unwrap()
}

fn random_theta(dims: ModelDims, rng: &mut ChaCha8Rng) -> ParameterVector {
    let beta = DMatrix::from_fn(dims.m, dims.p, |_, _| rng.gen_range(-1.0..1.0));
    let alpha = DVector::from_fn(dims.m, |_, _| rng.gen_range(-1.0..1.0));
    let mu_x = DVector::from_fn(dims.p, |_, _| rng.gen_range(-2.0..2.0));
    let pd = |k: usize, rng: &mut ChaCha8Rng| {
        let a = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(k, k) * (1.0 + rng.gen::<f64>())
    };
    let sq = pd(dims.m, rng);
    let sx = pd(dims.p, rng);
    ParameterVector::from_blocks(&beta, &alpha, &mu_x, &sq, &sx).unwrap()
}

fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1e-6)
}

fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / a.amax().max(1e-6)
}

/// Reconstruct the dataset z_i = P_i(theta) a_i + mu(theta) from a
/// reconstruction point and the ancillary.
fn reconstructed(
    theta: &ParameterVector,
    anc: &eiv::skovgaard::Ancillary,
    data: &Dataset,
    fam: &EllipticalFamily,
) -> Dataset {
    let mu = mu_of(theta);
    let z = (0..data.n())
        .map(|i| {
            let omega = omega_of(theta, i, data, fam).unwrap();
            let l = eiv::chol(&omega).unwrap();
            &l * &anc.a[i] + &mu
        })
        .collect();
    Dataset::new(data.dims(), z, data.sigma_e.clone(), data.sigma_ue.clone(), data.sigma_u.clone())
        .unwrap()
}

/// Criterion 1: analytic derivatives against finite differences on random
/// parameter points, for all three families and m, p in {1, 2}.
#[test]
fn criterion_1_derivative_correctness() {
    let mut worst_score = 0.0f64;
    let mut worst_info = 0.0f64;
    let mut worst_ssd = 0.0f64;
    let mut worst_chol = 0.0f64;
    let combos = [(1usize, 1usize), (1, 2), (2, 1), (2, 2)];
    for (fname, _) in families(2) {
        let mut points = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xd1);
        for &(m, p) in &combos {
            let dims = ModelDims::new(m, p).unwrap();
            let fam = match fname {
                "normal" => EllipticalFamily::normal(m + p).unwrap(),
                "student_t(5)" => EllipticalFamily::student_t(5.0, m + p).unwrap(),
                _ => EllipticalFamily::power_exponential(0.6, m + p).unwrap(),
            };
            let data = random_dataset(m, p, 12, &mut rng);
            let fit = fit_mle(&data, &fam, None, None).unwrap();
            let anc = ancillary(&fit, &data, &fam).unwrap();
            for _ in 0..5 {
                points += 1;
                let theta = random_theta(dims, &mut rng);
                let s = dims.s();

                // Score vs finite differences of the log-likelihood.
                let u = score(&theta, &data, &fam).unwrap();
                let mut u_fd = DVector::zeros(s);
                for j in 0..s {
                    let h = 1e-6 * (1.0 + theta.theta()[j].abs());
                    let mut tp = theta.clone();
                    tp.theta_mut()[j] += h;
                    let mut tm = theta.clone();
                    tm.theta_mut()[j] -= h;
                    u_fd[j] = (loglik(&tp, &data, &fam).unwrap()
                        - loglik(&tm, &data, &fam).unwrap())
                        / (2.0 * h);
                }
                let e = rel_err_vec(&u, &u_fd);
                worst_score = worst_score.max(e);
                assert!(e < 1e-6, "{fname} m={m} p={p}: score rel err {e}");

                // Observed information vs finite differences of the score.
                let info = observed_info(&theta, &data, &fam).unwrap();
                let mut info_fd = DMatrix::zeros(s, s);
                for k in 0..s {
                    let h = 1e-6 * (1.0 + theta.theta()[k].abs());
                    let mut tp = theta.clone();
                    tp.theta_mut()[k] += h;
                    let mut tm = theta.clone();
                    tm.theta_mut()[k] -= h;
                    let col = (score(&tm, &data, &fam).unwrap()
                        - score(&tp, &data, &fam).unwrap())
                        / (2.0 * h);
                    info_fd.set_column(k, &col);
                }
                let e = rel_err_mat(&info, &info_fd);
                worst_info = worst_info.max(e);
                assert!(e < 1e-5, "{fname} m={m} p={p}: info rel err {e}");

                // Sample-space derivatives vs finite differences through the
                // ancillary reconstruction.
                let ssd = sample_space_derivs(&theta, &anc, &data, &fam).unwrap();
                let mut lp_fd = DVector::zeros(s);
                let mut up_fd = DMatrix::zeros(s, s);
                for k in 0..s {
                    let h = 1e-6 * (1.0 + fit.theta_hat.theta()[k].abs());
                    let mut hp = fit.theta_hat.clone();
                    hp.theta_mut()[k] += h;
                    let mut hm = fit.theta_hat.clone();
                    hm.theta_mut()[k] -= h;
                    let dp = reconstructed(&hp, &anc, &data, &fam);
                    let dm = reconstructed(&hm, &anc, &data, &fam);
                    lp_fd[k] = (loglik(&theta, &dp, &fam).unwrap()
                        - loglik(&theta, &dm, &fam).unwrap())
                        / (2.0 * h);
                    let col = (score(&theta, &dp, &fam).unwrap()
                        - score(&theta, &dm, &fam).unwrap())
                        / (2.0 * h);
                    up_fd.set_column(k, &col);
                }
                let e = rel_err_vec(&ssd.ell_prime, &lp_fd).max(rel_err_mat(&ssd.u_prime, &up_fd));
                worst_ssd = worst_ssd.max(e);
                assert!(e < 1e-4, "{fname} m={m} p={p}: sample-space rel err {e}");

                // Cholesky factor derivative vs a finite-difference path.
                let omega = omega_of(&theta, 0, &data, &fam).unwrap();
                let l = eiv::chol(&omega).unwrap();
                let derivs = theta_derivs(&theta, &fam);
                let dls = eiv::chol_dtheta(&l, &derivs.omega_d).unwrap();
                for j in 0..s {
                    let h = 1e-6;
                    let lp = eiv::chol(&(&omega + &derivs.omega_d[j] * h)).unwrap();
                    let lm = eiv::chol(&(&omega - &derivs.omega_d[j] * h)).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let e = (&dls[j] - &fd).amax() / dls[j].amax().max(1.0);
                    worst_chol = worst_chol.max(e);
                    assert!(e < 1e-7, "{fname} m={m} p={p}: chol deriv rel err {e}");
                }
            }
        }
        assert_eq!(points, 20, "20 random points per family");
    }
    println!(
        "[acceptance] criterion 1 (derivative correctness): PASS — worst rel err: score {worst_score:.2e}, info {worst_info:.2e}, sample-space {worst_ssd:.2e}, cholesky {worst_chol:.2e}"
    );
}

/// Full sn x s block-matrix assembly of log rho, mirroring the matrix
/// notation (T, R, V, B, C, F, G, M, Q, n*, h, w) literally.
mod block_oracle {
    use super::*;

    struct PointQuantities {
        /// Per-observation inverse scale.
        oinv: Vec<DMatrix<f64>>,
        /// Per-observation residual z_i - mu.
        d: Vec<DVector<f64>>,
        /// W(u_i) and W'(u_i).
        r: Vec<f64>,
        v: Vec<f64>,
        /// Cholesky factors and their theta-derivatives at this point.
        l: Vec<DMatrix<f64>>,
        dl: Vec<Vec<DMatrix<f64>>>,
        derivs: eiv::model::ThetaDerivs,
    }

    fn point(theta: &ParameterVector, data: &Dataset, fam: &EllipticalFamily) -> PointQuantities {
        let n = data.n();
        let mu = mu_of(theta);
        let derivs = theta_derivs(theta, fam);
        let mut oinv = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        let mut dl = Vec::with_capacity(n);
        for i in 0..n {
            let omega = omega_of(theta, i, data, fam).unwrap();
            let li = eiv::chol(&omega).unwrap();
            let inv = omega.clone().try_inverse().unwrap();
            let di = &data.z[i] - &mu;
            let u = (di.transpose() * &inv * &di)[(0, 0)];
            r.push(fam.w(u).unwrap());
            v.push(fam.w_prime(u).unwrap());
            dl.push(eiv::chol_dtheta(&li, &derivs.omega_d).unwrap());
            l.push(li);
            oinv.push(inv);
            d.push(di);
        }
        PointQuantities { oinv, d, r, v, l, dl, derivs }
    }

    /// diag(x, ..., x) stacked s times: an sn x s block-diagonal matrix.
    fn block_diag(x: &[f64], s: usize) -> DMatrix<f64> {
        let n = x.len();
        let mut out = DMatrix::zeros(s * n, s);
        for j in 0..s {
            for i in 0..n {
                out[(j * n + i, j)] = x[i];
            }
        }
        out
    }

    /// Stack per-(j, k) n-vectors into an sn x s block matrix.
    fn block_matrix(entries: &dyn Fn(usize, usize, usize) -> f64, n: usize, s: usize) -> DMatrix<f64> {
        DMatrix::from_fn(s * n, s, |row, k| entries(row / n, k, row % n))
    }

    pub struct OracleParts {
        pub u_tilde: DVector<f64>,
        pub j_hat: DMatrix<f64>,
        pub j_tilde: DMatrix<f64>,
        pub ell_hat: DVector<f64>,
        pub ell_tilde: DVector<f64>,
        pub u_prime_tilde: DMatrix<f64>,
        pub j_bar: DMatrix<f64>,
    }

    pub fn assemble(
        theta_hat: &ParameterVector,
        theta_tilde: &ParameterVector,
        data: &Dataset,
        fam: &EllipticalFamily,
    ) -> OracleParts {
        let s = theta_hat.dims().s();
        let n = data.n();
        let hat = point(theta_hat, data, fam);
        let tilde = point(theta_tilde, data, fam);

        // Ancillary from the unconstrained point.
        let a: Vec<DVector<f64>> = (0..n)
            .map(|i| hat.l[i].clone().solve_lower_triangular(&hat.d[i]).unwrap())
            .collect();
        // ghat_{i,k} = dP_hat_{i,k} a_i + mu_hat_{theta_k}
        let ghat: Vec<Vec<DVector<f64>>> = (0..n)
            .map(|i| (0..s).map(|k| &hat.dl[i][k] * &a[i] + &hat.derivs.mu_d[k]).collect())
            .collect();
        let gtilde: Vec<Vec<DVector<f64>>> = (0..n)
            .map(|i| (0..s).map(|k| &tilde.dl[i][k] * &a[i] + &tilde.derivs.mu_d[k]).collect())
            .collect();

        let h_of = |pt: &PointQuantities, j: usize, i: usize| -> f64 {
            let oinv_d = &pt.oinv[i] * &pt.d[i];
            -(oinv_d.transpose() * &pt.derivs.omega_d[j] * &oinv_d)[(0, 0)]
                - 2.0 * pt.derivs.mu_d[j].dot(&oinv_d)
        };

        // Score at the constrained point: U = -1/2 n* + R' h.
        let r_tilde = block_diag(&tilde.r, s);
        let h_vec = DVector::from_fn(s * n, |row, _| h_of(&tilde, row / n, row % n));
        let n_star = DVector::from_fn(s, |j, _| {
            (0..n)
                .map(|i| (&tilde.oinv[i] * &tilde.derivs.omega_d[j]).trace())
                .sum::<f64>()
        });
        let u_tilde = -0.5 * &n_star + r_tilde.transpose() * &h_vec;

        // Observed information: J = 1/2 T - R'M - V'B.
        let info = |pt: &PointQuantities| -> DMatrix<f64> {
            let t = DMatrix::from_fn(s, s, |j, k| {
                (0..n)
                    .map(|i| {
                        let zero = DMatrix::zeros(pt.oinv[i].nrows(), pt.oinv[i].ncols());
                        let d2 = pt.derivs.omega_d2(j, k).unwrap_or(&zero);
                        (&pt.oinv[i] * d2).trace()
                            - (&pt.oinv[i] * &pt.derivs.omega_d[k] * &pt.oinv[i]
                                * &pt.derivs.omega_d[j])
                                .trace()
                    })
                    .sum::<f64>()
            });
            let m_block = block_matrix(
                &|j, k, i| {
                    let oinv = &pt.oinv[i];
                    let d = &pt.d[i];
                    let od = oinv * d;
                    let om_j = &pt.derivs.omega_d[j];
                    let om_k = &pt.derivs.omega_d[k];
                    let zero_m = DMatrix::zeros(oinv.nrows(), oinv.ncols());
                    let om_jk = pt.derivs.omega_d2(j, k).unwrap_or(&zero_m);
                    let zero_v = DVector::zeros(oinv.nrows());
                    let mu_jk = pt.derivs.mu_d2(j, k).unwrap_or(&zero_v);
                    (d.transpose()
                        * (2.0 * oinv * om_k * oinv * om_j * oinv - oinv * om_jk * oinv)
                        * d)[(0, 0)]
                        + 2.0 * (pt.derivs.mu_d[k].transpose() * oinv * om_j * &od)[(0, 0)]
                        + 2.0 * (pt.derivs.mu_d[j].transpose() * oinv * om_k * &od)[(0, 0)]
                        - 2.0 * mu_jk.dot(&od)
                        + 2.0 * (pt.derivs.mu_d[j].transpose() * oinv * &pt.derivs.mu_d[k])[(0, 0)]
                },
                n,
                s,
            );
            let b_block = block_matrix(&|j, k, i| h_of(pt, k, i) * h_of(pt, j, i), n, s);
            let r_mat = block_diag(&pt.r, s);
            let v_mat = block_diag(&pt.v, s);
            0.5 * t - r_mat.transpose() * m_block - v_mat.transpose() * b_block
        };
        let j_hat = info(&hat);
        let j_tilde = info(&tilde);

        // ell' = 2 R' w with w_i^{(k)} = (dP_hat_k a_i + mu_hat_k)' oinv d_i.
        let ell_prime = |pt: &PointQuantities| -> DVector<f64> {
            let w_vec = DVector::from_fn(s * n, |row, _| {
                let (k, i) = (row / n, row % n);
                (ghat[i][k].transpose() * &pt.oinv[i] * &pt.d[i])[(0, 0)]
            });
            2.0 * block_diag(&pt.r, s).transpose() * w_vec
        };
        let ell_hat = ell_prime(&hat);
        let ell_tilde = ell_prime(&tilde);

        // U' = 2 (R' Q + V' C).
        let q_block = block_matrix(
            &|j, k, i| {
                let oinv = &tilde.oinv[i];
                -(ghat[i][k].transpose() * oinv * &tilde.derivs.omega_d[j] * oinv * &tilde.d[i])
                    [(0, 0)]
                    - (tilde.derivs.mu_d[j].transpose() * oinv * &ghat[i][k])[(0, 0)]
            },
            n,
            s,
        );
        let c_block = block_matrix(
            &|j, k, i| {
                let w_ki = (ghat[i][k].transpose() * &tilde.oinv[i] * &tilde.d[i])[(0, 0)];
                w_ki * h_of(&tilde, j, i)
            },
            n,
            s,
        );
        let u_prime_tilde = 2.0
            * (block_diag(&tilde.r, s).transpose() * q_block
                + block_diag(&tilde.v, s).transpose() * c_block);

        // Jbar = 2 (Rhat' F + Vhat' G): W arguments at |a_i|^2, structure at
        // the constrained point, residual P-tilde a_i.
        let r_bar: Vec<f64> = (0..n).map(|i| fam.w(a[i].norm_squared()).unwrap()).collect();
        let v_bar: Vec<f64> = (0..n).map(|i| fam.w_prime(a[i].norm_squared()).unwrap()).collect();
        let f_block = block_matrix(
            &|j, k, i| {
                let oinv = &tilde.oinv[i];
                let pa = &tilde.l[i] * &a[i];
                -(gtilde[i][k].transpose() * oinv * &tilde.derivs.omega_d[j] * oinv * &pa)[(0, 0)]
                    - (tilde.derivs.mu_d[j].transpose() * oinv * &gtilde[i][k])[(0, 0)]
            },
            n,
            s,
        );
        let g_block = block_matrix(
            &|j, k, i| {
                let oinv = &tilde.oinv[i];
                let pa = &tilde.l[i] * &a[i];
                let lead = (gtilde[i][k].transpose() * oinv * &pa)[(0, 0)];
                let inner = -(pa.transpose() * oinv * &tilde.derivs.omega_d[j] * oinv * &pa)
                    [(0, 0)]
                    - 2.0 * (tilde.derivs.mu_d[j].transpose() * oinv * &pa)[(0, 0)];
                lead * inner
            },
            n,
            s,
        );
        let j_bar = 2.0
            * (block_diag(&r_bar, s).transpose() * f_block
                + block_diag(&v_bar, s).transpose() * g_block);

        OracleParts { u_tilde, j_hat, j_tilde, ell_hat, ell_tilde, u_prime_tilde, j_bar }
    }

    pub fn log_rho_from_parts(
        parts: &OracleParts,
        lr: f64,
        hyp: &HypothesisSpec,
        s: usize,
    ) -> f64 {
        let q = hyp.q() as f64;
        let order = hyp.psi_first_order(s);
        let ww = |m: &DMatrix<f64>| {
            let nw = s - hyp.q();
            DMatrix::from_fn(nw, nw, |r, c| m[(order[hyp.q() + r], order[hyp.q() + c])])
        };
        let ld = |m: &DMatrix<f64>| m.clone().lu().determinant().ln();
        let s1 = parts
            .u_tilde
            .dot(&parts.j_bar.clone().lu().solve(&parts.u_tilde).unwrap());
        let s2 = (&parts.ell_hat - &parts.ell_tilde)
            .dot(&parts.u_prime_tilde.clone().lu().solve(&parts.u_tilde).unwrap());
        0.5 * (ld(&parts.j_hat) + ld(&ww(&parts.j_tilde)) + ld(&parts.j_bar) - ld(&ww(&parts.j_bar)))
            - ld(&parts.u_prime_tilde)
            + 0.5 * q * s1.ln()
            - (0.5 * q - 1.0) * lr.ln()
            - s2.ln()
    }
}

/// Criterion 2: the per-observation accumulation of log rho equals the direct
/// sn x s block-matrix assembly on random small instances.
#[test]
fn criterion_2_rho_block_matrix_oracle() {
    let dims = ModelDims::new(1, 1).unwrap();
    let fam = EllipticalFamily::normal(2).unwrap();
    let theta_true = ParameterVector::from_blocks(
        &DMatrix::from_element(1, 1, 0.8),
        &DVector::from_element(1, 0.2),
        &DVector::from_element(1, -1.0),
        &DMatrix::from_element(1, 1, 2.0),
        &DMatrix::from_element(1, 1, 3.0),
    )
    .unwrap();
    let hyp = HypothesisSpec::new(vec![0], vec![0.0], dims).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut instance = 0u64;
    while checked < 10 {
        instance += 1;
        assert!(instance < 40, "too many degenerate instances");
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xb10c);
        rng.set_stream(instance);
        let n = 10;
        let sigma_e: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_element(1, 1, rng.gen::<f64>().powi(2).max(1e-3)))
            .collect();
        let sigma_u: Vec<DMatrix<f64>> = (0..n)
            .map(|_| DMatrix::from_element(1, 1, rng.gen::<f64>().powi(2).max(1e-3)))
            .collect();
        let mut data = Dataset::new(
            dims,
            vec![DVector::zeros(2); n],
            sigma_e,
            vec![DMatrix::zeros(1, 1); n],
            sigma_u,
        )
        .unwrap();
        let mu = mu_of(&theta_true);
        for i in 0..n {
            let omega = omega_of(&theta_true, i, &data, &fam).unwrap();
            let l = eiv::chol(&omega).unwrap();
            data.z[i] = fam.sample(&mu, &l, &mut rng).unwrap();
        }
        let Ok((fit_hat, fit_tilde, _)) = fit_pair(&data, &fam, &hyp) else {
            continue;
        };
        let lr = 2.0 * (fit_hat.loglik - fit_tilde.loglik);
        if lr < 1e-6 {
            continue;
        }
        let anc = ancillary(&fit_hat, &data, &fam).unwrap();
        let impl_val = match log_rho(&fit_hat, &fit_tilde, &anc, &data, &fam, &hyp).unwrap() {
            Ok(v) => v,
            Err(_) => continue,
        };
        let parts =
            block_oracle::assemble(&fit_hat.theta_hat, &fit_tilde.theta_hat, &data, &fam);
        let oracle_val = block_oracle::log_rho_from_parts(&parts, lr, &hyp, dims.s());
        let diff = (impl_val - oracle_val).abs();
        worst = worst.max(diff);
        assert!(
            diff < 1e-9,
            "instance {instance}: accumulation {impl_val} vs block assembly {oracle_val}"
        );
        checked += 1;
    }
    println!(
        "[acceptance] criterion 2 (rho block-matrix oracle): PASS — 10 instances, worst |diff| {worst:.2e}"
    );
}

/// Criterion 3: Table 1 reproduction at desk scale (normal, p = q = 2,
/// n = 20, 2000 replications).
#[test]
fn criterion_3_table1_reproduction() {
    let cfg = SimConfig::with_paper_defaults(
        FamilyKind::Normal,
        None,
        1,
        2,
        2,
        20,
        2000,
        SEED,
        vec![0.05],
    )
    .unwrap();
    let report = run_null_study(&cfg).unwrap();
    let lr = report.rate("lr", 0.05).unwrap();
    let dstar = report.rate("lr_dstar", 0.05).unwrap();
    assert!(
        (0.063..=0.101).contains(&lr),
        "LR rejection at 5%: {lr:.4} outside 8.2% +/- 1.9%"
    );
    assert!(
        (0.037..=0.067).contains(&dstar),
        "LR**_a rejection at 5%: {dstar:.4} outside 5.2% +/- 1.5%"
    );
    println!(
        "[acceptance] criterion 3 (Table 1, normal p=q=2 n=20): PASS — LR {:.1}% (target 8.2 +/- 1.9), LR**_a {:.1}% (target 5.2 +/- 1.5), {} failures",
        100.0 * lr,
        100.0 * dstar,
        report.fit_failures
    );
}

/// Criterion 4: Table 2 spot check (Student-t(5), p = 3, q = 2, n = 20).
#[test]
fn criterion_4_table2_spot_check() {
    let cfg = SimConfig::with_paper_defaults(
        FamilyKind::StudentT,
        Some(5.0),
        1,
        3,
        2,
        20,
        2000,
        SEED,
        vec![0.01],
    )
    .unwrap();
    let report = run_null_study(&cfg).unwrap();
    let lr = report.rate("lr", 0.01).unwrap();
    let dstar = report.rate("lr_dstar", 0.01).unwrap();
    assert!(
        (0.014..=0.036).contains(&lr),
        "LR rejection at 1%: {lr:.4} outside 2.5% +/- 1.1%"
    );
    assert!(
        (0.004..=0.018).contains(&dstar),
        "LR**_a rejection at 1%: {dstar:.4} outside 1.1% +/- 0.7%"
    );
    println!(
        "[acceptance] criterion 4 (Table 2, t(5) p=3 q=2 n=20): PASS — LR {:.2}% (target 2.5 +/- 1.1), LR**_a {:.2}% (target 1.1 +/- 0.7), {} failures",
        100.0 * lr,
        100.0 * dstar,
        report.fit_failures
    );
}

/// Criterion 5: Table 4 power spot check (normal, n = 20, p = q = 2,
/// eta = 1.0, gamma = 5%).
#[test]
fn criterion_5_table4_power_spot_check() {
    let mut cfg = SimConfig::with_paper_defaults(
        FamilyKind::Normal,
        None,
        1,
        2,
        2,
        20,
        2000,
        SEED,
        vec![0.05],
    )
    .unwrap();
    cfg.power_grid = Some(vec![1.0]);
    let power = run_power_study(&cfg).unwrap();
    let star = power.points[0].report.rate("lr_star", 0.05).unwrap();
    assert!(
        (0.698..=0.758).contains(&star),
        "LR*_a power at eta=1.0: {:.1}% outside 72.8% +/- 3.0%",
        100.0 * star
    );
    println!(
        "[acceptance] criterion 5 (Table 4 power, eta=1.0): PASS — LR*_a {:.1}% (target 72.8 +/- 3.0)",
        100.0 * star
    );
}

/// Criterion 6: asymptotic calibration — at n = 200 the empirical CDF of
/// LR**_a is within KS distance 0.06 of chi-square(q).
#[test]
fn criterion_6_asymptotic_calibration() {
    let cfg = SimConfig::with_paper_defaults(
        FamilyKind::Normal,
        None,
        1,
        2,
        2,
        200,
        1000,
        SEED,
        vec![0.05],
    )
    .unwrap();
    let report = run_null_study(&cfg).unwrap();
    let values = &report.statistic("lr_dstar").unwrap().values_sorted;
    let ks = ks_distance_chi2(values, 2);
    assert!(ks < 0.06, "KS distance {ks:.4} >= 0.06");
    println!(
        "[acceptance] criterion 6 (asymptotic calibration n=200): PASS — KS distance {ks:.4} (< 0.06), {} failures",
        report.fit_failures
    );
}

/// Criterion 7: structural invariants on every test run, including full
/// translation equivariance of the report.
#[test]
fn criterion_7_structural_invariants() {
    let mut runs = 0;
    for (fname, fam) in families(2) {
        for stream in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x51);
            rng.set_stream(100 + stream);
            let data = random_dataset(1, 1, 25, &mut rng);
            let hyp = HypothesisSpec::new(vec![0], vec![0.7], data.dims()).unwrap();
            let report = lr_test(&data, &fam, &hyp).unwrap();
            runs += 1;
            assert!(report.lr >= 0.0, "{fname}: LR < 0");
            assert!(report.lr_star >= 0.0, "{fname}: LR*_a < 0");
            if let Some(lrho) = report.log_rho {
                let gap = (report.lr_star - report.lr_dstar).abs();
                assert!(
                    gap <= lrho * lrho / report.lr + 1e-9,
                    "{fname}: |LR*_a - LR**_a| = {gap} exceeds (log rho)^2 / LR"
                );
            }
            for p in [report.pvalues.lr, report.pvalues.lr_star, report.pvalues.lr_dstar] {
                assert!((0.0..=1.0).contains(&p));
            }

            // Translate every response by a constant.
            let shift = 3.25;
            let shifted = Dataset::new(
                data.dims(),
                data.z
                    .iter()
                    .map(|z| {
                        let mut z2 = z.clone();
                        z2[0] += shift;
                        z2
                    })
                    .collect(),
                data.sigma_e.clone(),
                data.sigma_ue.clone(),
                data.sigma_u.clone(),
            )
            .unwrap();
            let moved = lr_test(&shifted, &fam, &hyp).unwrap();
            assert!((moved.lr - report.lr).abs() < 1e-6, "{fname}: LR not equivariant");
            assert!((moved.lr_star - report.lr_star).abs() < 1e-6);
            assert!((moved.lr_dstar - report.lr_dstar).abs() < 1e-6);
            if let (Some(a), Some(b)) = (moved.log_rho, report.log_rho) {
                assert!((a - b).abs() < 1e-6, "{fname}: log rho not equivariant");
            }
        }
    }
    println!(
        "[acceptance] criterion 7 (structural invariants): PASS — {runs} test runs across 3 families"
    );
}

/// Grid search over the 5 scalar parameters of the m = p = 1 model,
/// refining the box around the best point each round.
fn grid_search_loglik(
    data: &Dataset,
    fam: &EllipticalFamily,
    fixed_beta: Option<f64>,
    start: &ParameterVector,
) -> f64 {
    let dims = data.dims();
    let mut center = [
        start.theta()[0],
        start.theta()[1],
        start.theta()[2],
        start.theta()[3].max(1e-3),
        start.theta()[4].max(1e-3),
    ];
    if let Some(b) = fixed_beta {
        center[0] = b;
    }
    let mut half = [2.0, 3.0, 2.0, center[3] * 0.9 + 0.5, center[4] * 0.9 + 0.5];
    let points = 11;
    let mut best_ll = f64::NEG_INFINITY;
    for _round in 0..24 {
        let mut best = center;
        for i0 in 0..if fixed_beta.is_some() { 1 } else { points } {
            let b = match fixed_beta {
                Some(b) => b,
                None => center[0] - half[0] + 2.0 * half[0] * i0 as f64 / (points - 1) as f64,
            };
            for i1 in 0..points {
                let al = center[1] - half[1] + 2.0 * half[1] * i1 as f64 / (points - 1) as f64;
                for i2 in 0..points {
                    let mx = center[2] - half[2] + 2.0 * half[2] * i2 as f64 / (points - 1) as f64;
                    for i3 in 0..points {
                        let sq = (center[3] - half[3]
                            + 2.0 * half[3] * i3 as f64 / (points - 1) as f64)
                            .max(1e-3);
                        for i4 in 0..points {
                            let sx = (center[4] - half[4]
                                + 2.0 * half[4] * i4 as f64 / (points - 1) as f64)
                                .max(1e-3);
                            let theta = ParameterVector::from_blocks(
                                &DMatrix::from_element(1, 1, b),
                                &DVector::from_element(1, al),
                                &DVector::from_element(1, mx),
                                &DMatrix::from_element(1, 1, sq),
                                &DMatrix::from_element(1, 1, sx),
                            )
                            .unwrap();
                            if let Ok(ll) = loglik(&theta, data, fam) {
                                if ll > best_ll {
                                    best_ll = ll;
                                    best = [b, al, mx, sq, sx];
                                }
                            }
                        }
                    }
                }
            }
        }
        center = best;
        for h in half.iter_mut() {
            *h *= 0.45;
        }
    }
    best_ll
}

/// Criterion 8: the CLI test path on a synthetic m = p = 1 dataset, with the
/// LR confirmed by an optimizer-independent grid search.
#[test]
fn criterion_8_cli_grid_search_validation() {
    // Synthetic dataset from the model (beta = 1.3, so H0: beta = 1 is mildly
    // violated and LR is comfortably positive).
    let dims = ModelDims::new(1, 1).unwrap();
    let fam = EllipticalFamily::normal(2).unwrap();
    let theta_true = ParameterVector::from_blocks(
        &DMatrix::from_element(1, 1, 1.3),
        &DVector::from_element(1, 0.2),
        &DVector::from_element(1, -2.0),
        &DMatrix::from_element(1, 1, 3.0),
        &DMatrix::from_element(1, 1, 4.0),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x8);
    let n = 25;
    let mut data = Dataset::new(
        dims,
        vec![DVector::zeros(2); n],
        (0..n).map(|_| DMatrix::from_element(1, 1, rng.gen::<f64>().powi(2).max(1e-3))).collect(),
        vec![DMatrix::zeros(1, 1); n],
        (0..n).map(|_| DMatrix::from_element(1, 1, rng.gen::<f64>().powi(2).max(1e-3))).collect(),
    )
    .unwrap();
    let mu = mu_of(&theta_true);
    for i in 0..n {
        let omega = omega_of(&theta_true, i, &data, &fam).unwrap();
        let l = eiv::chol(&omega).unwrap();
        data.z[i] = fam.sample(&mu, &l, &mut rng).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("synthetic.csv");
    eiv_cli::dataio::write_dataset(&data, &csv_path).unwrap();
    let json_path = dir.path().join("report.json");

    let status = Command::new(env!("CARGO_BIN_EXE_eiv"))
        .args(["test", "--m", "1", "--p", "1", "--family", "normal", "--beta", "0=1.0"])
        .arg("--data")
        .arg(&csv_path)
        .arg("--out")
        .arg(&json_path)
        .status()
        .unwrap();
    assert!(status.success(), "CLI test run failed");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let lr_cli = json["report"]["lr"].as_f64().unwrap();

    // Optimizer-independent confirmation of both optima.
    let init = eiv::likelihood::default_init(&data, None);
    let ll_hat_grid = grid_search_loglik(&data, &fam, None, &init);
    let ll_tilde_grid = grid_search_loglik(&data, &fam, Some(1.0), &init);
    let lr_grid = 2.0 * (ll_hat_grid - ll_tilde_grid);
    assert!(
        (lr_cli - lr_grid).abs() < 1e-3,
        "CLI LR {lr_cli:.6} vs grid-search LR {lr_grid:.6}"
    );
    println!(
        "[acceptance] criterion 8 (CLI + grid-search validation): PASS — LR {lr_cli:.4} matches brute-force {lr_grid:.4} within 1e-3"
    );
}
