//! Log-likelihood, analytic score, observed information, and maximum
//! likelihood estimation (full and null-constrained).
//!
//! All quantities are accumulated observation by observation from the
//! closed-form derivative blocks in [`crate::model`]; nothing here is
//! finite-differenced. The optimizer is a quasi-Newton ascent on the analytic
//! score with observed-information (Fisher-scoring) restarts whenever the
//! quasi-Newton direction fails, and a backtracking line search that rejects
//! any step where some scale matrix loses positive definiteness.

use nalgebra::{DMatrix, DVector};

use crate::chol::{chol_tagged, inverse_from_chol, logdet_from_chol};
use crate::elliptical::EllipticalFamily;
use crate::error::{EivError, Result};
use crate::model::{theta_derivs, Dataset, HypothesisSpec, ModelDims, ParameterVector, ThetaDerivs};

const GRAD_TOL: f64 = 1e-8;
const REL_F_TOL: f64 = 1e-12;
const MAX_ITER: usize = 500;

/// Everything the likelihood needs about one observation at a fixed theta.
#[derive(Debug, Clone)]
pub(crate) struct ObsContext {
    /// Lower Cholesky factor of omega_i.
    pub l: DMatrix<f64>,
    /// omega_i^{-1}.
    pub oinv: DMatrix<f64>,
    /// Residual z_i - mu(theta).
    pub d: DVector<f64>,
    /// omega_i^{-1} d.
    pub oinv_d: DVector<f64>,
    /// Quadratic form d' omega^{-1} d.
    pub u: f64,
    pub logdet: f64,
}

/// Build per-observation contexts; fails with the observation index when some
/// omega_i is not positive definite.
pub(crate) fn obs_contexts(
    theta: &ParameterVector,
    data: &Dataset,
    family: &EllipticalFamily,
) -> Result<Vec<ObsContext>> {
    let mu = crate::model::mu_of(theta);
    let core = crate::model::omega_core(theta);
    let c_inv = 1.0 / family.c_const();
    (0..data.n())
        .map(|i| {
            let omega = (&core + data.known_block(i)) * c_inv;
            let l = chol_tagged(&omega, "omega", Some(i))?;
            let oinv = inverse_from_chol(&l);
            let d = &data.z[i] - &mu;
            let oinv_d = &oinv * &d;
            let u = d.dot(&oinv_d);
            Ok(ObsContext { logdet: logdet_from_chol(&l), l, oinv, d, oinv_d, u })
        })
        .collect()
}

pub(crate) fn loglik_from(obs: &[ObsContext], family: &EllipticalFamily) -> f64 {
    obs.iter()
        .map(|o| -0.5 * o.logdet + family.log_p0_raw(o.u.max(0.0)))
        .sum()
}

/// Log-likelihood at `theta`.
pub fn loglik(theta: &ParameterVector, data: &Dataset, family: &EllipticalFamily) -> Result<f64> {
    check_family_dim(theta.dims(), family)?;
    Ok(loglik_from(&obs_contexts(theta, data, family)?, family))
}

/// Analytic score vector at `theta`.
pub fn score(theta: &ParameterVector, data: &Dataset, family: &EllipticalFamily) -> Result<DVector<f64>> {
    check_family_dim(theta.dims(), family)?;
    let obs = obs_contexts(theta, data, family)?;
    let derivs = theta_derivs(theta, family);
    Ok(score_from(&obs, &derivs, family))
}

pub(crate) fn score_from(
    obs: &[ObsContext],
    derivs: &ThetaDerivs,
    family: &EllipticalFamily,
) -> DVector<f64> {
    let s = derivs.dims.s();
    let mut u_vec = DVector::zeros(s);
    for o in obs {
        let w = family.w_raw(o.u.max(0.0));
        for j in 0..s {
            let om_j = &derivs.omega_d[j];
            let trace = frob_dot(&o.oinv, om_j);
            let y = om_j * &o.oinv_d;
            let h = -o.oinv_d.dot(&y) - 2.0 * derivs.mu_d[j].dot(&o.oinv_d);
            u_vec[j] += -0.5 * trace + w * h;
        }
    }
    u_vec
}

/// Observed information (negative Hessian of the log-likelihood) at `theta`.
pub fn observed_info(
    theta: &ParameterVector,
    data: &Dataset,
    family: &EllipticalFamily,
) -> Result<DMatrix<f64>> {
    check_family_dim(theta.dims(), family)?;
    let obs = obs_contexts(theta, data, family)?;
    let derivs = theta_derivs(theta, family);
    Ok(info_from(&obs, &derivs, family))
}

pub(crate) fn info_from(
    obs: &[ObsContext],
    derivs: &ThetaDerivs,
    family: &EllipticalFamily,
) -> DMatrix<f64> {
    let s = derivs.dims.s();
    let q = derivs.dims.obs_dim();
    let mut info = DMatrix::zeros(s, s);
    let mut y = vec![DVector::zeros(q); s];
    let mut e = vec![DVector::zeros(q); s];
    let mut g = vec![DVector::zeros(q); s];
    let mut a = vec![DMatrix::zeros(q, q); s];
    let mut h = vec![0.0; s];
    for o in obs {
        let w = family.w_raw(o.u.max(0.0));
        let v = family.w_prime_raw(o.u.max(0.0));
        for j in 0..s {
            let om_j = &derivs.omega_d[j];
            y[j] = om_j * &o.oinv_d;
            e[j] = &o.oinv * &y[j];
            g[j] = &o.oinv * &derivs.mu_d[j];
            a[j] = &o.oinv * om_j;
            h[j] = -o.oinv_d.dot(&y[j]) - 2.0 * derivs.mu_d[j].dot(&o.oinv_d);
        }
        for j in 0..s {
            for k in j..s {
                // t_jk (second-derivative part handled in the sparse loop below)
                let mut t = -trace_prod(&a[k], &a[j]);
                // m_jk without the second-derivative terms
                let mut m_val = 2.0 * e[k].dot(&y[j])
                    + 2.0 * derivs.mu_d[k].dot(&e[j])
                    + 2.0 * derivs.mu_d[j].dot(&e[k])
                    + 2.0 * derivs.mu_d[j].dot(&g[k]);
                if let Some(om_jk) = derivs.omega_d2(j, k) {
                    t += frob_dot(&o.oinv, om_jk);
                    m_val -= o.oinv_d.dot(&(om_jk * &o.oinv_d));
                }
                if let Some(mu_jk) = derivs.mu_d2(j, k) {
                    m_val -= 2.0 * mu_jk.dot(&o.oinv_d);
                }
                info[(j, k)] += 0.5 * t - v * h[k] * h[j] - w * m_val;
            }
        }
    }
    for j in 0..s {
        for k in (j + 1)..s {
            info[(k, j)] = info[(j, k)];
        }
    }
    info
}

/// tr(A B) for symmetric B (elementwise product with A').
#[inline]
fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// tr(A B) for general small matrices.
#[inline]
fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            s += a[(r, c)] * b[(c, r)];
        }
    }
    s
}

fn check_family_dim(dims: ModelDims, family: &EllipticalFamily) -> Result<()> {
    if family.dim() != dims.obs_dim() {
        return Err(EivError::Dimension(format!(
            "family dimension {} does not match m + p = {}",
            family.dim(),
            dims.obs_dim()
        )));
    }
    Ok(())
}

/// Outcome of a maximum likelihood fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ParameterVector,
    pub loglik: f64,
    /// Sup-norm of the (projected, for constrained fits) score at the optimum.
    pub score_norm: f64,
    pub observed_info: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub constrained: Option<HypothesisSpec>,
}

impl FitResult {
    /// Asymptotic standard errors from the inverse observed information, when
    /// it is positive definite.
    pub fn standard_errors(&self) -> Option<DVector<f64>> {
        let l = chol_tagged(&self.observed_info, "observed information", None).ok()?;
        let inv = inverse_from_chol(&l);
        Some(DVector::from_fn(inv.nrows(), |i, _| inv[(i, i)].sqrt()))
    }
}

/// Moment-based starting point: naive least squares of Y on X, sample moments
/// of X, and eigenvalue-floored covariance blocks.
pub fn default_init(data: &Dataset, constraint: Option<&HypothesisSpec>) -> ParameterVector {
    let dims = data.dims();
    let (m, p) = (dims.m, dims.p);
    let n = data.n() as f64;
    let mut ybar = DVector::zeros(m);
    let mut xbar = DVector::zeros(p);
    for z in &data.z {
        ybar += z.rows(0, m);
        xbar += z.rows(m, p);
    }
    ybar /= n;
    xbar /= n;
    let mut s_xx = DMatrix::zeros(p, p);
    let mut s_yx = DMatrix::zeros(m, p);
    for z in &data.z {
        let dy = z.rows(0, m) - &ybar;
        let dx = z.rows(m, p) - &xbar;
        s_xx += &dx * dx.transpose();
        s_yx += &dy * dx.transpose();
    }
    s_xx /= n;
    s_yx /= n;

    // Ridge the X covariance if needed so the naive slope solve is stable.
    let mut s_xx_reg = s_xx.clone();
    let mut ridge = 1e-8 * (s_xx.trace() / p as f64).max(1.0);
    while chol_tagged(&s_xx_reg, "sxx", None).is_err() {
        s_xx_reg = &s_xx + DMatrix::identity(p, p) * ridge;
        ridge *= 10.0;
    }
    let beta = &s_yx
        * s_xx_reg
            .clone()
            .try_inverse()
            .unwrap_or_else(|| DMatrix::identity(p, p));
    let alpha = &ybar - &beta * &xbar;

    let mut resid_cov = DMatrix::zeros(m, m);
    for z in &data.z {
        let r = z.rows(0, m) - &alpha - &beta * z.rows(m, p);
        resid_cov += &r * r.transpose();
    }
    resid_cov /= n;

    let mean_su = data.sigma_u.iter().fold(DMatrix::zeros(p, p), |acc, s| acc + s) / n;
    let sigma_x = floor_pd(&(s_xx - mean_su), 1e-3);
    let sigma_q = floor_pd(&resid_cov, 1e-3);

    let mut theta = ParameterVector::from_blocks(&beta, &alpha, &xbar, &sigma_q, &sigma_x)
        .expect("consistent dimensions");
    if let Some(hyp) = constraint {
        for (ix, val) in hyp.indices.iter().zip(hyp.values.iter()) {
            theta.theta_mut()[*ix] = *val;
        }
    }
    theta
}

/// Clamp the eigenvalues of a symmetric matrix from below.
fn floor_pd(mat: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Maximize the log-likelihood, optionally with the tested block of vec(beta)
/// pinned to its hypothesized values.
///
/// Deterministic given `init` and `data`. Fails with the best iterate attached
/// when the iteration budget is exhausted.
pub fn fit_mle(
    data: &Dataset,
    family: &EllipticalFamily,
    init: Option<&ParameterVector>,
    constraint: Option<&HypothesisSpec>,
) -> Result<FitResult> {
    let dims = data.dims();
    check_family_dim(dims, family)?;
    let s = dims.s();
    let mut theta = match init {
        Some(t) => {
            if t.dims() != dims {
                return Err(EivError::Dimension("init has wrong dimensions".into()));
            }
            let mut t = t.clone();
            if let Some(hyp) = constraint {
                for (ix, val) in hyp.indices.iter().zip(hyp.values.iter()) {
                    t.theta_mut()[*ix] = *val;
                }
            }
            t
        }
        None => default_init(data, constraint),
    };
    let free: Vec<usize> = match constraint {
        Some(hyp) => {
            let pinned: std::collections::HashSet<usize> = hyp.indices.iter().cloned().collect();
            (0..s).filter(|j| !pinned.contains(j)).collect()
        }
        None => (0..s).collect(),
    };

    let mut obs = obs_contexts(&theta, data, family)?; // PD violation at init is an error
    let mut ll = loglik_from(&obs, family);
    let mut derivs = theta_derivs(&theta, family);
    let mut grad = score_from(&obs, &derivs, family);

    let project = |g: &DVector<f64>| DVector::from_iterator(free.len(), free.iter().map(|&j| g[j]));
    let mut h_inv = inv_curvature(&info_from(&obs, &derivs, family), &free);

    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < MAX_ITER {
        let gf = project(&grad);
        if gf.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;

        // Quasi-Newton direction; fall back to a Fisher-scoring step (fresh
        // observed information) and finally scaled steepest ascent.
        let mut accepted = None;
        let mut dir = &h_inv * &gf;
        if dir.dot(&gf) <= 0.0 {
            h_inv = inv_curvature(&info_from(&obs, &derivs, family), &free);
            dir = &h_inv * &gf;
        }
        for attempt in 0..3 {
            if let Some(step) = line_search(&theta, ll, &gf, &dir, &free, data, family) {
                accepted = Some(step);
                break;
            }
            match attempt {
                0 => {
                    h_inv = inv_curvature(&info_from(&obs, &derivs, family), &free);
                    dir = &h_inv * &gf;
                }
                1 => {
                    dir = &gf / gf.norm().max(1.0);
                }
                _ => {}
            }
        }
        let Some((theta_new, obs_new, ll_new)) = accepted else {
            // The likelihood is flat to machine precision; drive the score
            // itself down with damped Newton (Fisher-scoring) steps.
            polish(&mut theta, &mut obs, &mut derivs, &mut grad, &free, data, family);
            break;
        };

        let derivs_new = theta_derivs(&theta_new, family);
        let grad_new = score_from(&obs_new, &derivs_new, family);
        // BFGS update on the free block; gradient of the minimized -loglik is -U.
        let s_vec = DVector::from_iterator(
            free.len(),
            free.iter().map(|&j| theta_new.theta()[j] - theta.theta()[j]),
        );
        let y_vec = project(&grad) - project(&grad_new);
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 * s_vec.norm() * y_vec.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y_vec;
            let yhy = y_vec.dot(&hy);
            // H <- H - rho (H y s' + s y' H) + rho^2 (y' H y) s s' + rho s s'
            let ss = &s_vec * s_vec.transpose();
            h_inv = &h_inv - (&hy * s_vec.transpose() + &s_vec * hy.transpose()) * rho
                + &ss * (rho * rho * yhy + rho);
        }

        let rel_change = (ll_new - ll).abs() / (1.0 + ll.abs());
        theta = theta_new;
        obs = obs_new;
        derivs = derivs_new;
        grad = grad_new;
        ll = ll_new;
        if rel_change < REL_F_TOL {
            if project(&grad).amax() >= GRAD_TOL {
                polish(&mut theta, &mut obs, &mut derivs, &mut grad, &free, data, family);
            }
            converged = project(&grad).amax() < GRAD_TOL;
            break;
        }
    }
    ll = loglik_from(&obs, family);

    let score_norm = project(&grad).amax();
    converged = converged || score_norm < GRAD_TOL;
    let result = FitResult {
        observed_info: info_from(&obs, &derivs, family),
        theta_hat: theta,
        loglik: ll,
        score_norm,
        iterations,
        converged,
        constrained: constraint.cloned(),
    };
    if !converged {
        return Err(EivError::NonConvergence {
            iterations,
            score_norm,
            best: Box::new(result),
        });
    }
    Ok(result)
}

/// Score-chasing refinement for the endgame, where likelihood differences are
/// smaller than double-precision resolution and an Armijo search can no longer
/// certify ascent. Takes damped Newton steps on the score equations and keeps
/// any step that shrinks the projected score norm.
fn polish(
    theta: &mut ParameterVector,
    obs: &mut Vec<ObsContext>,
    derivs: &mut ThetaDerivs,
    grad: &mut DVector<f64>,
    free: &[usize],
    data: &Dataset,
    family: &EllipticalFamily,
) {
    let project = |g: &DVector<f64>| DVector::from_iterator(free.len(), free.iter().map(|&j| g[j]));
    for _ in 0..30 {
        let gf = project(grad);
        let gnorm = gf.amax();
        if gnorm < GRAD_TOL {
            return;
        }
        let h_inv = inv_curvature(&info_from(obs, derivs, family), free);
        let full = &h_inv * &gf;
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let mut cand = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                cand.theta_mut()[j] += scale * full[a];
            }
            if let Ok(obs_new) = obs_contexts(&cand, data, family) {
                let derivs_new = theta_derivs(&cand, family);
                let grad_new = score_from(&obs_new, &derivs_new, family);
                if project(&grad_new).amax() < gnorm * (1.0 - 1e-3) {
                    *theta = cand;
                    *obs = obs_new;
                    *derivs = derivs_new;
                    *grad = grad_new;
                    improved = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !improved {
            return;
        }
    }
}

/// Inverse of the (ridged) free-block observed information; used both as the
/// initial quasi-Newton curvature and as the Fisher-scoring fallback.
fn inv_curvature(info: &DMatrix<f64>, free: &[usize]) -> DMatrix<f64> {
    let nf = free.len();
    let mut jf = DMatrix::zeros(nf, nf);
    for (a, &j) in free.iter().enumerate() {
        for (b, &k) in free.iter().enumerate() {
            jf[(a, b)] = info[(j, k)];
        }
    }
    let scale = (0..nf).map(|i| jf[(i, i)].abs()).fold(1e-8, f64::max);
    for tau in [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2, 1.0, 1e2] {
        let cand = &jf + DMatrix::identity(nf, nf) * (tau * scale);
        if let Ok(l) = chol_tagged(&cand, "curvature", None) {
            return inverse_from_chol(&l);
        }
    }
    DMatrix::identity(nf, nf) / scale
}

/// Backtracking Armijo line search along `dir` (in free coordinates).
/// Steps where any omega_i loses positive definiteness are rejected.
fn line_search(
    theta: &ParameterVector,
    ll: f64,
    gf: &DVector<f64>,
    dir: &DVector<f64>,
    free: &[usize],
    data: &Dataset,
    family: &EllipticalFamily,
) -> Option<(ParameterVector, Vec<ObsContext>, f64)> {
    let slope = gf.dot(dir);
    if !(slope > 0.0) {
        return None;
    }
    let mut alpha = 1.0f64;
    for _ in 0..40 {
        let mut cand = theta.clone();
        for (a, &j) in free.iter().enumerate() {
            cand.theta_mut()[j] += alpha * dir[a];
        }
        if let Ok(obs) = obs_contexts(&cand, data, family) {
            let ll_new = loglik_from(&obs, family);
            if ll_new.is_finite() && ll_new >= ll + 1e-4 * alpha * slope {
                return Some((cand, obs, ll_new));
            }
        }
        alpha *= 0.5;
    }
    None
}
