//! Elliptical family abstraction: density generator `p0`, its log-derivatives
//! `W` and `W'`, the variance normalization constant `c`, and exact sampling.
//!
//! A q-dimensional elliptical vector with location `mu` and scale `omega` has
//! density `|omega|^{-1/2} p0((z-mu)' omega^{-1} (z-mu))`. Three members ship:
//! normal, Student-t(nu) and power exponential(lambda) in the Gomez et al.
//! parameterization. The generator includes its normalization constant, so
//! log-likelihood differences across families are exact and AIC-style
//! comparisons are meaningful.
//!
//! Shape parameters (`nu`, `lambda`) are user-fixed inputs and never estimated.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{EivError, Result};

/// Which member of the elliptical class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Normal,
    StudentT,
    PowerExponential,
}

/// An elliptical family pinned to an ambient dimension `q`.
///
/// The dimension is part of the family because `p0` depends on it for the
/// Student-t and power exponential members. Immutable after construction and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct EllipticalFamily {
    kind: FamilyKind,
    /// Degrees of freedom (Student-t only).
    nu: f64,
    /// Shape parameter (power exponential only).
    lambda: f64,
    dim: usize,
    /// Var(Z) = c * Omega.
    c: f64,
    /// log of the normalization constant of p0 in dimension `dim`.
    log_norm: f64,
    /// Cached radial inverse-CDF table (power exponential only).
    pe_radial: Option<PeRadialTable>,
}

impl EllipticalFamily {
    /// Multivariate normal in dimension `dim`.
    pub fn normal(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            kind: FamilyKind::Normal,
            nu: f64::NAN,
            lambda: f64::NAN,
            dim,
            c: 1.0,
            log_norm: -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln(),
            pe_radial: None,
        })
    }

    /// Multivariate Student-t with `nu` degrees of freedom in dimension `dim`.
    /// Requires `nu > 2` so the variance (and hence `c`) exists.
    pub fn student_t(nu: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if !nu.is_finite() || nu <= 2.0 {
            return Err(EivError::invalid(format!(
                "student_t requires nu > 2 for a finite variance, got {nu}"
            )));
        }
        let q = dim as f64;
        let log_norm = ln_gamma((nu + q) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * q * (nu * std::f64::consts::PI).ln();
        Ok(Self {
            kind: FamilyKind::StudentT,
            nu,
            lambda: f64::NAN,
            dim,
            c: nu / (nu - 2.0),
            log_norm,
            pe_radial: None,
        })
    }

    /// Multivariate power exponential with shape `lambda` in dimension `dim`
    /// (Gomez et al. parameterization). Requires `0 < lambda <= 1`.
    pub fn power_exponential(lambda: f64, dim: usize) -> Result<Self> {
        check_dim(dim)?;
        if !lambda.is_finite() || lambda <= 0.0 || lambda > 1.0 {
            return Err(EivError::invalid(format!(
                "power_exponential requires 0 < lambda <= 1, got {lambda}"
            )));
        }
        let q = dim as f64;
        // p0(u) = k * exp(-u^lambda / 2) with
        // k = lambda * Gamma(q/2) / (pi^{q/2} Gamma(q/(2 lambda)) 2^{q/(2 lambda)}).
        let a = q / (2.0 * lambda);
        let log_norm = lambda.ln() + ln_gamma(q / 2.0)
            - 0.5 * q * std::f64::consts::PI.ln()
            - ln_gamma(a)
            - a * std::f64::consts::LN_2;
        // Var(Z) = c * Omega with c = 2^{1/lambda} Gamma((q+2)/(2 lambda)) / (q Gamma(q/(2 lambda))).
        let c = ((1.0 / lambda) * std::f64::consts::LN_2 + ln_gamma((q + 2.0) / (2.0 * lambda))
            - ln_gamma(a)
            - q.ln())
        .exp();
        let pe_radial = Some(PeRadialTable::build(lambda, dim, log_norm));
        Ok(Self {
            kind: FamilyKind::PowerExponential,
            nu: f64::NAN,
            lambda,
            dim,
            c,
            log_norm,
            pe_radial,
        })
    }

    /// Build from a kind plus its shape parameter.
    pub fn new(kind: FamilyKind, shape: Option<f64>, dim: usize) -> Result<Self> {
        match kind {
            FamilyKind::Normal => Self::normal(dim),
            FamilyKind::StudentT => {
                let nu = shape.ok_or_else(|| EivError::invalid("student_t requires nu"))?;
                Self::student_t(nu, dim)
            }
            FamilyKind::PowerExponential => {
                let lambda =
                    shape.ok_or_else(|| EivError::invalid("power_exponential requires lambda"))?;
                Self::power_exponential(lambda, dim)
            }
        }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    /// Ambient dimension q.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalization constant of the variance: Var(Z) = c * Omega.
    pub fn c_const(&self) -> f64 {
        self.c
    }

    /// log p0(u), normalization constant included.
    pub fn log_p0(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        Ok(self.log_p0_raw(u))
    }

    /// W(u) = d log p0(u) / du.
    pub fn w(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        Ok(self.w_raw(u))
    }

    /// W'(u) = d W(u) / du.
    pub fn w_prime(&self, u: f64) -> Result<f64> {
        check_u(u)?;
        Ok(self.w_prime_raw(u))
    }

    #[inline]
    pub(crate) fn log_p0_raw(&self, u: f64) -> f64 {
        match self.kind {
            FamilyKind::Normal => self.log_norm - 0.5 * u,
            FamilyKind::StudentT => {
                let q = self.dim as f64;
                self.log_norm - 0.5 * (self.nu + q) * (u / self.nu).ln_1p()
            }
            FamilyKind::PowerExponential => self.log_norm - 0.5 * u.powf(self.lambda),
        }
    }

    #[inline]
    pub(crate) fn w_raw(&self, u: f64) -> f64 {
        match self.kind {
            FamilyKind::Normal => -0.5,
            FamilyKind::StudentT => {
                let q = self.dim as f64;
                -0.5 * (self.nu + q) / (self.nu + u)
            }
            FamilyKind::PowerExponential => -0.5 * self.lambda * u.powf(self.lambda - 1.0),
        }
    }

    #[inline]
    pub(crate) fn w_prime_raw(&self, u: f64) -> f64 {
        match self.kind {
            FamilyKind::Normal => 0.0,
            FamilyKind::StudentT => {
                let q = self.dim as f64;
                let t = self.nu + u;
                0.5 * (self.nu + q) / (t * t)
            }
            FamilyKind::PowerExponential => {
                -0.5 * self.lambda * (self.lambda - 1.0) * u.powf(self.lambda - 2.0)
            }
        }
    }

    /// One draw with location `mu` and scale `P P'` where `P = scale_chol`,
    /// via the stochastic representation `mu + P * r * S` with `S` uniform on
    /// the unit sphere and `r` the radial law matching `p0`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        mu: &DVector<f64>,
        scale_chol: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        let q = self.dim;
        if mu.len() != q || scale_chol.nrows() != q || scale_chol.ncols() != q {
            return Err(EivError::Dimension(format!(
                "sample expects dimension {q}, got mu len {} and chol {}x{}",
                mu.len(),
                scale_chol.nrows(),
                scale_chol.ncols()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) || scale_chol.iter().any(|v| !v.is_finite()) {
            return Err(EivError::invalid("sample requires finite mu and scale_chol"));
        }
        if (0..q).any(|i| scale_chol[(i, i)] <= 0.0) {
            return Err(EivError::invalid(
                "scale_chol must have a strictly positive diagonal",
            ));
        }
        // Direction uniform on the sphere.
        let mut s = DVector::<f64>::zeros(q);
        loop {
            for v in s.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let norm = s.norm();
            if norm > 1e-12 {
                s /= norm;
                break;
            }
        }
        let r = self.sample_radius(rng);
        Ok(mu + scale_chol * (s * r))
    }

    /// Radius draw: r such that r^2 has the law of the squared Mahalanobis
    /// norm under this family with identity scale.
    pub(crate) fn sample_radius<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let q = self.dim as f64;
        match self.kind {
            FamilyKind::Normal => {
                // r^2 ~ chi^2_q
                let g = Gamma::new(q / 2.0, 2.0).expect("valid gamma");
                g.sample(rng).sqrt()
            }
            FamilyKind::StudentT => {
                // r^2 ~ nu * chi^2_q / chi^2_nu
                let gq = Gamma::new(q / 2.0, 2.0).expect("valid gamma");
                let gn = Gamma::new(self.nu / 2.0, 2.0).expect("valid gamma");
                let num: f64 = gq.sample(rng);
                let den: f64 = gn.sample(rng);
                (self.nu * num / den.max(f64::MIN_POSITIVE)).sqrt()
            }
            FamilyKind::PowerExponential => {
                let table = self.pe_radial.as_ref().expect("PE table built at construction");
                table.invert(rng.gen::<f64>())
            }
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 {
        return Err(EivError::invalid("dimension must be positive"));
    }
    Ok(())
}

fn check_u(u: f64) -> Result<()> {
    if !(u >= 0.0) {
        return Err(EivError::invalid(format!(
            "quadratic form argument must be nonnegative, got {u}"
        )));
    }
    Ok(())
}

/// Cached inverse-CDF table for the power exponential radius.
///
/// The radial density of r = ||Z|| under identity scale is
/// `f_R(r) = 2 pi^{q/2} / Gamma(q/2) * r^{q-1} p0(r^2)`.
/// The table integrates `f_R` by composite Simpson quadrature on a grid that
/// is uniform in `t = r^{2 lambda}` (which matches where the mass lives for
/// every admissible lambda); inversion does a bracketed Newton refinement off
/// the cached cumulative values, so interpolation error is negligible.
#[derive(Debug, Clone)]
struct PeRadialTable {
    lambda: f64,
    dim: usize,
    /// log of the constant in f_R(r) = C * r^{q-1} * exp(-r^{2 lambda}/2).
    log_coef: f64,
    /// Grid radii (ascending, starts at 0).
    r: Vec<f64>,
    /// Cumulative integral of f_R up to each grid radius.
    cum: Vec<f64>,
    /// Total mass captured by the grid; should be 1 to quadrature accuracy.
    total: f64,
}

impl PeRadialTable {
    const PANELS: usize = 4096;

    fn build(lambda: f64, dim: usize, log_norm_p0: f64) -> Self {
        let q = dim as f64;
        let log_coef = std::f64::consts::LN_2 + 0.5 * q * std::f64::consts::PI.ln()
            - ln_gamma(q / 2.0)
            + log_norm_p0;
        let mut table = Self {
            lambda,
            dim,
            log_coef,
            r: Vec::new(),
            cum: Vec::new(),
            total: 0.0,
        };

        // Upper limit in t = r^{2 lambda} space: extend until the remaining
        // tail is negligible.
        let a = q / (2.0 * lambda);
        let mut t_hi = 16.0 * (a + 4.0);
        loop {
            let tail = table.integrate_t_range(t_hi, 4.0 * t_hi, 256);
            if tail < 1e-14 || t_hi > 1e300 {
                break;
            }
            t_hi *= 2.0;
        }

        let mut r = Vec::with_capacity(Self::PANELS + 1);
        let mut cum = Vec::with_capacity(Self::PANELS + 1);
        r.push(0.0);
        cum.push(0.0);
        let mut acc = 0.0;
        for k in 1..=Self::PANELS {
            let t = t_hi * k as f64 / Self::PANELS as f64;
            let rk = t.powf(1.0 / (2.0 * lambda));
            acc += table.simpson(*r.last().unwrap(), rk, 8);
            r.push(rk);
            cum.push(acc);
        }
        table.r = r;
        table.cum = cum;
        table.total = acc;
        debug_assert!(
            (table.total - 1.0).abs() < 1e-8,
            "PE radial quadrature mass {} != 1",
            table.total
        );
        table
    }

    #[inline]
    fn pdf(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return if self.dim == 1 { self.log_coef.exp() } else { 0.0 };
        }
        let q = self.dim as f64;
        (self.log_coef + (q - 1.0) * r.ln() - 0.5 * r.powf(2.0 * self.lambda)).exp()
    }

    /// Composite Simpson over [a, b] with `n` (even) subintervals.
    fn simpson(&self, a: f64, b: f64, n: usize) -> f64 {
        debug_assert!(n % 2 == 0);
        let h = (b - a) / n as f64;
        if h <= 0.0 {
            return 0.0;
        }
        let mut s = self.pdf(a) + self.pdf(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * self.pdf(a + h * k as f64);
        }
        s * h / 3.0
    }

    fn integrate_t_range(&self, t_lo: f64, t_hi: f64, panels: usize) -> f64 {
        let mut acc = 0.0;
        let inv = 1.0 / (2.0 * self.lambda);
        let mut prev = t_lo.powf(inv);
        for k in 1..=panels {
            let t = t_lo + (t_hi - t_lo) * k as f64 / panels as f64;
            let rk = t.powf(inv);
            acc += self.simpson(prev, rk, 4);
            prev = rk;
        }
        acc
    }

    /// Inverse CDF at `v` in [0, 1).
    fn invert(&self, v: f64) -> f64 {
        let target = v.clamp(0.0, 1.0 - 1e-16) * self.total;
        // Find the panel containing the target.
        let idx = match self
            .cum
            .binary_search_by(|c| c.partial_cmp(&target).expect("cum is finite"))
        {
            Ok(i) => i.min(self.cum.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.cum.len() - 2),
        };
        let (mut lo, mut hi) = (self.r[idx], self.r[idx + 1]);
        let base = self.cum[idx];
        let span = (self.cum[idx + 1] - base).max(f64::MIN_POSITIVE);
        // Initial guess by linear interpolation, then safeguarded Newton on
        // G(x) = base + int_{lo}^{x} f - target.
        let mut x = lo + (hi - lo) * ((target - base) / span).clamp(0.0, 1.0);
        for _ in 0..40 {
            let g = base + self.simpson(lo, x, 4) - target;
            if g > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let f = self.pdf(x);
            let step = if f > 0.0 { g / f } else { 0.0 };
            let mut next = x - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-14 * (1.0 + x.abs()) {
                x = next;
                break;
            }
            x = next;
        }
        x
    }
}
