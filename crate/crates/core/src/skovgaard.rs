//! The adjusted likelihood ratio machinery: ancillary statistic, sample-space
//! derivatives, the correction factor rho, and the test statistics
//! LR, LR*_a and LR**_a.
//!
//! The model is a transformation model, so `a_i = P_hat_i^{-1}(z_i - mu_hat)`
//! (with `P_i` the Cholesky factor of `omega_i`) is maximal invariant and
//! serves as the ancillary. Writing the log-likelihood as a function of
//! `(theta; theta_hat, a)` gives the derivatives
//!
//! ```text
//! ell'_k  = 2 sum_i W(u_i) g_k' oinv d_i
//! U'_jk   = 2 sum_i [ W(u_i) (-g_k' oinv om_j oinv d_i - mu_j' oinv g_k)
//!                    + W'(u_i) (g_k' oinv d_i) h_j ]
//! ```
//!
//! with `g_k = dP_hat_k a_i + mu_hat_k` held at the unconstrained MLE, and
//! `Jbar` the same bilinear form with every structural quantity moved to the
//! evaluation point (so `d_i` becomes `P_i a_i`) and the `W` arguments frozen
//! at `|a_i|^2`. Rows of `U'`/`Jbar` index the theta-derivative, columns the
//! theta_hat-derivative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::chol::{chol_dtheta, forward_solve, logdet_from_chol};
use crate::elliptical::EllipticalFamily;
use crate::error::{EivError, Result};
use crate::likelihood::{fit_mle, obs_contexts, FitResult};
use crate::model::{theta_derivs, Dataset, HypothesisSpec, ParameterVector};

/// The ancillary statistic together with the hatted quantities reused by every
/// sample-space derivative evaluation.
#[derive(Debug, Clone)]
pub struct Ancillary {
    /// a_i = P_hat_i^{-1} (z_i - mu_hat).
    pub a: Vec<DVector<f64>>,
    /// Cholesky factors P_hat_i.
    pub p_hat: Vec<DMatrix<f64>>,
    /// mu derivatives at theta_hat.
    pub mu_hat_d: Vec<DVector<f64>>,
    /// g_{i,k} = dP_hat_{i,k} a_i + mu_hat_k.
    pub ghat: Vec<Vec<DVector<f64>>>,
    /// |a_i|^2 (equals the quadratic form at the unconstrained MLE).
    pub a_sq: Vec<f64>,
}

/// Compute the ancillary statistic from a converged unconstrained fit.
pub fn ancillary(fit_hat: &FitResult, data: &Dataset, family: &EllipticalFamily) -> Result<Ancillary> {
    let theta = &fit_hat.theta_hat;
    let obs = obs_contexts(theta, data, family)?;
    let derivs = theta_derivs(theta, family);
    let s = theta.dims().s();
    let n = data.n();
    let mut a = Vec::with_capacity(n);
    let mut p_hat = Vec::with_capacity(n);
    let mut ghat = Vec::with_capacity(n);
    let mut a_sq = Vec::with_capacity(n);
    for o in &obs {
        let ai = forward_solve(&o.l, &o.d);
        let dp = chol_dtheta(&o.l, &derivs.omega_d)?;
        let gi: Vec<DVector<f64>> = (0..s).map(|k| &dp[k] * &ai + &derivs.mu_d[k]).collect();
        a_sq.push(ai.norm_squared());
        a.push(ai);
        p_hat.push(o.l.clone());
        ghat.push(gi);
    }
    Ok(Ancillary { a, p_hat, mu_hat_d: derivs.mu_d.clone(), ghat, a_sq })
}

/// Sample-space derivatives evaluated at one theta.
#[derive(Debug, Clone)]
pub struct SampleSpaceDerivs {
    /// d ell / d theta_hat, holding the ancillary fixed.
    pub ell_prime: DVector<f64>,
    /// d^2 ell / d theta d theta_hat' (rows: theta, cols: theta_hat).
    pub u_prime: DMatrix<f64>,
    /// The same mixed derivative with theta_hat moved to the evaluation point
    /// and the W arguments frozen at |a_i|^2; this is the Jbar of the rho factor when
    /// evaluated at the constrained MLE.
    pub j_bar: DMatrix<f64>,
}

/// Evaluate `ell'`, `U'` and `Jbar` at `theta_eval` given the ancillary from
/// the unconstrained fit.
pub fn sample_space_derivs(
    theta_eval: &ParameterVector,
    anc: &Ancillary,
    data: &Dataset,
    family: &EllipticalFamily,
) -> Result<SampleSpaceDerivs> {
    let s = theta_eval.dims().s();
    let obs = obs_contexts(theta_eval, data, family)?;
    let derivs = theta_derivs(theta_eval, family);

    let mut ell_prime = DVector::zeros(s);
    let mut u_prime = DMatrix::zeros(s, s);
    let mut j_bar = DMatrix::zeros(s, s);

    for (i, o) in obs.iter().enumerate() {
        let w = family.w_raw(o.u.max(0.0));
        let wp = family.w_prime_raw(o.u.max(0.0));

        // ell' and U': structural terms at theta_eval, hats at theta_hat.
        let y: Vec<DVector<f64>> = (0..s).map(|j| &derivs.omega_d[j] * &o.oinv_d).collect();
        let h: Vec<f64> = (0..s)
            .map(|j| -o.oinv_d.dot(&y[j]) - 2.0 * derivs.mu_d[j].dot(&o.oinv_d))
            .collect();
        let gg: Vec<DVector<f64>> = (0..s).map(|k| &o.oinv * &anc.ghat[i][k]).collect();
        let wvec: Vec<f64> = (0..s).map(|k| anc.ghat[i][k].dot(&o.oinv_d)).collect();
        for k in 0..s {
            ell_prime[k] += 2.0 * w * wvec[k];
        }
        for j in 0..s {
            for k in 0..s {
                let q_jk = -gg[k].dot(&y[j]) - derivs.mu_d[j].dot(&gg[k]);
                u_prime[(j, k)] += 2.0 * (w * q_jk + wp * wvec[k] * h[j]);
            }
        }

        // Jbar: all structural terms at theta_eval, W arguments at |a_i|^2.
        let w_bar = family.w_raw(anc.a_sq[i]);
        let wp_bar = family.w_prime_raw(anc.a_sq[i]);
        let d_bar = &o.l * &anc.a[i];
        let oinv_d_bar = &o.oinv * &d_bar;
        let dp_eval = chol_dtheta(&o.l, &derivs.omega_d)?;
        let y_bar: Vec<DVector<f64>> = (0..s).map(|j| &derivs.omega_d[j] * &oinv_d_bar).collect();
        let h_bar: Vec<f64> = (0..s)
            .map(|j| -oinv_d_bar.dot(&y_bar[j]) - 2.0 * derivs.mu_d[j].dot(&oinv_d_bar))
            .collect();
        for k in 0..s {
            let g_k = &dp_eval[k] * &anc.a[i] + &derivs.mu_d[k];
            let gg_k = &o.oinv * &g_k;
            let w_k = g_k.dot(&oinv_d_bar);
            for j in 0..s {
                let f_jk = -gg_k.dot(&y_bar[j]) - derivs.mu_d[j].dot(&gg_k);
                j_bar[(j, k)] += 2.0 * (w_bar * f_jk + wp_bar * w_k * h_bar[j]);
            }
        }
    }
    Ok(SampleSpaceDerivs { ell_prime, u_prime, j_bar })
}

/// Why the rho adjustment was abandoned for a particular test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RhoGuard {
    /// A determinant or log argument that must be positive was not.
    NonPositiveDeterminant,
    /// A linear system inside rho was numerically singular.
    Singular,
}

/// log rho assembled from the fitted quantities. `Ok(Err(guard))` means the
/// inputs were computable but the adjustment is not trustworthy and the caller
/// should fall back to the unadjusted LR.
pub fn log_rho(
    fit_hat: &FitResult,
    fit_tilde: &FitResult,
    anc: &Ancillary,
    data: &Dataset,
    family: &EllipticalFamily,
    hyp: &HypothesisSpec,
) -> Result<std::result::Result<f64, RhoGuard>> {
    let lr = 2.0 * (fit_hat.loglik - fit_tilde.loglik);
    let q = hyp.q() as f64;
    let s = fit_hat.theta_hat.dims().s();

    let u_tilde = crate::likelihood::score(&fit_tilde.theta_hat, data, family)?;
    let ssd_hat = sample_space_derivs(&fit_hat.theta_hat, anc, data, family)?;
    let ssd_tilde = sample_space_derivs(&fit_tilde.theta_hat, anc, data, family)?;

    let order = hyp.psi_first_order(s);
    let omega_block = |mat: &DMatrix<f64>| -> DMatrix<f64> {
        let nw = s - hyp.q();
        DMatrix::from_fn(nw, nw, |r, c| mat[(order[hyp.q() + r], order[hyp.q() + c])])
    };

    let Some(ld_j_hat) = logdet_pd(&fit_hat.observed_info) else {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    };
    let Some(ld_j_tilde_ww) = logdet_pd(&omega_block(&fit_tilde.observed_info)) else {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    };
    let Some(ld_j_bar) = logdet_pos(&ssd_tilde.j_bar) else {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    };
    let Some(ld_j_bar_ww) = logdet_pos(&omega_block(&ssd_tilde.j_bar)) else {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    };
    let Some(ld_u_prime) = logdet_pos(&ssd_tilde.u_prime) else {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    };

    let Some(jbar_inv_u) = ssd_tilde.j_bar.clone().lu().solve(&u_tilde) else {
        return Ok(Err(RhoGuard::Singular));
    };
    let s1 = u_tilde.dot(&jbar_inv_u);
    let Some(uprime_inv_u) = ssd_tilde.u_prime.clone().lu().solve(&u_tilde) else {
        return Ok(Err(RhoGuard::Singular));
    };
    let s2 = (&ssd_hat.ell_prime - &ssd_tilde.ell_prime).dot(&uprime_inv_u);
    if !(s1 > 0.0) || !(s2 > 0.0) || !(lr > 0.0) {
        return Ok(Err(RhoGuard::NonPositiveDeterminant));
    }

    let log_rho = 0.5 * (ld_j_hat + ld_j_tilde_ww + ld_j_bar - ld_j_bar_ww) - ld_u_prime
        + 0.5 * q * s1.ln()
        - (0.5 * q - 1.0) * lr.ln()
        - s2.ln();
    if !log_rho.is_finite() {
        return Ok(Err(RhoGuard::Singular));
    }
    Ok(Ok(log_rho))
}

fn logdet_pd(mat: &DMatrix<f64>) -> Option<f64> {
    crate::chol::chol(mat).ok().map(|l| logdet_from_chol(&l))
}

fn logdet_pos(mat: &DMatrix<f64>) -> Option<f64> {
    let det = mat.clone().lu().determinant();
    (det > 0.0 && det.is_finite()).then(|| det.ln())
}

/// Both Skovgaard adjustments of a likelihood ratio statistic.
pub fn adjusted_statistics(lr: f64, log_rho: f64) -> (f64, f64) {
    let lr_star = lr * (1.0 - log_rho / lr).powi(2);
    let lr_dstar = lr - 2.0 * log_rho;
    (lr_star, lr_dstar)
}

/// Diagnostic flags attached to a test report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestFlags {
    /// LR below the degeneracy guard; adjustments skipped.
    pub lr_near_zero: bool,
    /// rho hit a nonpositive determinant / scalar; adjustments skipped.
    pub rho_nonpositive_determinant: bool,
    /// Sample size is small for the parameter count, or the fits needed a
    /// restart to restore `loglik(hat) >= loglik(tilde)`.
    pub fit_warning: bool,
}

/// Upper-tail chi-square p-values of the three statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PValues {
    pub lr: f64,
    pub lr_star: f64,
    pub lr_dstar: f64,
}

/// Result of a Skovgaard-adjusted likelihood ratio test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub lr: f64,
    /// Present when the adjustment was computed.
    pub log_rho: Option<f64>,
    pub lr_star: f64,
    pub lr_dstar: f64,
    /// Degrees of freedom (dimension of the tested block).
    pub q: usize,
    pub pvalues: PValues,
    pub flags: TestFlags,
}

/// Guard below which LR is treated as zero: the rho assembly divides by
/// LR^{q/2-1} and by score-like quantities that vanish with LR.
pub const LR_NEAR_ZERO: f64 = 1e-10;

/// Full test: unconstrained and constrained fits, LR, and both adjusted
/// statistics with chi-square p-values.
pub fn lr_test(data: &Dataset, family: &EllipticalFamily, hyp: &HypothesisSpec) -> Result<TestReport> {
    let (fit_hat, fit_tilde, mut flags) = fit_pair(data, family, hyp)?;
    report_from_fits(&fit_hat, &fit_tilde, data, family, hyp, &mut flags)
}

/// Fit the unconstrained and constrained models, keeping
/// `loglik(hat) >= loglik(tilde)` by refitting from the other optimum when the
/// warm starts cross.
pub fn fit_pair(
    data: &Dataset,
    family: &EllipticalFamily,
    hyp: &HypothesisSpec,
) -> Result<(FitResult, FitResult, TestFlags)> {
    let mut flags = TestFlags::default();
    let dims = data.dims();
    if data.n() * dims.obs_dim() <= dims.s() {
        flags.fit_warning = true;
    }

    let mut fit_hat = fit_mle(data, family, None, None)?;
    // Warm-start the constrained problem from the unconstrained optimum; fall
    // back to the moment initializer if pinning psi breaks feasibility.
    let fit_tilde = match fit_mle(data, family, Some(&fit_hat.theta_hat), Some(hyp)) {
        Ok(f) => f,
        Err(EivError::NonConvergence { .. }) | Err(EivError::NotPositiveDefinite { .. }) => {
            fit_mle(data, family, None, Some(hyp))?
        }
        Err(e) => return Err(e),
    };
    // The constrained optimum is a feasible point of the unconstrained
    // problem; if it beats the unconstrained fit, the latter found a worse
    // local maximum. Restart it from the constrained solution. Should the
    // restart fail, the report clamps LR at zero.
    if fit_tilde.loglik > fit_hat.loglik + 1e-9 {
        flags.fit_warning = true;
        if let Ok(restart) = fit_mle(data, family, Some(&fit_tilde.theta_hat), None) {
            if restart.loglik > fit_hat.loglik {
                fit_hat = restart;
            }
        }
    }
    Ok((fit_hat, fit_tilde, flags))
}

/// Assemble a [`TestReport`] from an existing fit pair.
pub fn report_from_fits(
    fit_hat: &FitResult,
    fit_tilde: &FitResult,
    data: &Dataset,
    family: &EllipticalFamily,
    hyp: &HypothesisSpec,
    flags: &mut TestFlags,
) -> Result<TestReport> {
    let lr = (2.0 * (fit_hat.loglik - fit_tilde.loglik)).max(0.0);
    let q = hyp.q();

    let (log_rho_opt, lr_star, lr_dstar) = if lr < LR_NEAR_ZERO {
        flags.lr_near_zero = true;
        (None, lr, lr)
    } else {
        let anc = ancillary(fit_hat, data, family)?;
        match log_rho(fit_hat, fit_tilde, &anc, data, family, hyp)? {
            Ok(lrho) => {
                let (a, b) = adjusted_statistics(lr, lrho);
                (Some(lrho), a, b)
            }
            Err(_) => {
                flags.rho_nonpositive_determinant = true;
                (None, lr, lr)
            }
        }
    };

    let chi = ChiSquared::new(q as f64).expect("q >= 1");
    let pval = |stat: f64| chi.sf(stat.max(0.0));
    Ok(TestReport {
        lr,
        log_rho: log_rho_opt,
        lr_star,
        lr_dstar,
        q,
        pvalues: PValues { lr: pval(lr), lr_star: pval(lr_star), lr_dstar: pval(lr_dstar) },
        flags: *flags,
    })
}
