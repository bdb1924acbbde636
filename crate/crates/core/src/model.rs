//! Model structure: parameter packing, the location vector and per-observation
//! scale matrices, and their first and second derivatives in the raw
//! vech coordinates.
//!
//! The parameter vector is
//! `theta = (vec(beta), alpha, mu_x, vech(sigma_q), vech(sigma_x))`
//! of dimension `s = m p + m + p + m(m+1)/2 + p(p+1)/2`. vech stacks the
//! lower triangle column by column; `mu(theta) = (alpha + beta mu_x, mu_x)` and
//!
//! ```text
//! omega_i(theta) = c^{-1} [ beta sigma_x beta' + sigma_q + sigma_e_i   beta sigma_x + sigma_ue_i' ]
//!                         [ sigma_x beta' + sigma_ue_i                 sigma_x + sigma_u_i        ]
//! ```
//!
//! The derivatives of `omega_i` do not depend on `i` (the per-observation
//! matrices are known constants), which the evaluation code exploits heavily.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chol::chol_tagged;
use crate::elliptical::EllipticalFamily;
use crate::error::{EivError, Result};

/// Number of free entries in a k x k symmetric matrix.
pub fn tri(k: usize) -> usize {
    k * (k + 1) / 2
}

/// Lower-triangle column-major pairs (r, c) with r >= c, in vech order.
pub fn vech_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |c| (c..k).map(move |r| (r, c)))
}

/// Stack the lower triangle of a symmetric matrix, column-major.
pub fn vech(mat: &DMatrix<f64>) -> DVector<f64> {
    let k = mat.nrows();
    DVector::from_iterator(tri(k), vech_pairs(k).map(|(r, c)| mat[(r, c)]))
}

/// Rebuild a symmetric matrix from its vech.
pub fn unvech(v: &[f64], k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k, k);
    for (idx, (r, c)) in vech_pairs(k).enumerate() {
        out[(r, c)] = v[idx];
        out[(c, r)] = v[idx];
    }
    out
}

/// Response/covariate dimensions and the parameter-block layout they induce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub m: usize,
    pub p: usize,
}

/// Which block of theta an index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaBlock {
    /// Entry (row, col) of beta.
    Beta(usize, usize),
    Alpha(usize),
    MuX(usize),
    /// Entry (row, col), row >= col, of sigma_q.
    SigmaQ(usize, usize),
    /// Entry (row, col), row >= col, of sigma_x.
    SigmaX(usize, usize),
}

impl ModelDims {
    pub fn new(m: usize, p: usize) -> Result<Self> {
        if m == 0 || p == 0 {
            return Err(EivError::invalid("m and p must be positive"));
        }
        Ok(Self { m, p })
    }

    /// Dimension of the parameter space.
    pub fn s(&self) -> usize {
        self.m * self.p + self.m + self.p + tri(self.m) + tri(self.p)
    }

    /// Dimension of one observation z_i = (y_i, x_i).
    pub fn obs_dim(&self) -> usize {
        self.m + self.p
    }

    pub fn beta_offset(&self) -> usize {
        0
    }
    pub fn alpha_offset(&self) -> usize {
        self.m * self.p
    }
    pub fn mu_x_offset(&self) -> usize {
        self.alpha_offset() + self.m
    }
    pub fn sigma_q_offset(&self) -> usize {
        self.mu_x_offset() + self.p
    }
    pub fn sigma_x_offset(&self) -> usize {
        self.sigma_q_offset() + tri(self.m)
    }

    /// Classify a theta index.
    pub fn block_of(&self, j: usize) -> ThetaBlock {
        let (m, p) = (self.m, self.p);
        if j < self.alpha_offset() {
            ThetaBlock::Beta(j % m, j / m)
        } else if j < self.mu_x_offset() {
            ThetaBlock::Alpha(j - self.alpha_offset())
        } else if j < self.sigma_q_offset() {
            ThetaBlock::MuX(j - self.mu_x_offset())
        } else if j < self.sigma_x_offset() {
            let (r, c) = nth_vech_pair(m, j - self.sigma_q_offset());
            ThetaBlock::SigmaQ(r, c)
        } else {
            let (r, c) = nth_vech_pair(p, j - self.sigma_x_offset());
            ThetaBlock::SigmaX(r, c)
        }
    }
}

fn nth_vech_pair(k: usize, idx: usize) -> (usize, usize) {
    let mut rem = idx;
    for c in 0..k {
        let len = k - c;
        if rem < len {
            return (c + rem, c);
        }
        rem -= len;
    }
    unreachable!("vech index out of range")
}

/// Packed parameter vector with typed block views.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    dims: ModelDims,
    theta: DVector<f64>,
}

impl ParameterVector {
    pub fn from_theta(dims: ModelDims, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != dims.s() {
            return Err(EivError::Dimension(format!(
                "theta length {} does not match s = {}",
                theta.len(),
                dims.s()
            )));
        }
        Ok(Self { dims, theta })
    }

    pub fn from_blocks(
        beta: &DMatrix<f64>,
        alpha: &DVector<f64>,
        mu_x: &DVector<f64>,
        sigma_q: &DMatrix<f64>,
        sigma_x: &DMatrix<f64>,
    ) -> Result<Self> {
        let dims = ModelDims::new(alpha.len(), mu_x.len())?;
        if beta.nrows() != dims.m
            || beta.ncols() != dims.p
            || sigma_q.nrows() != dims.m
            || sigma_q.ncols() != dims.m
            || sigma_x.nrows() != dims.p
            || sigma_x.ncols() != dims.p
        {
            return Err(EivError::Dimension("inconsistent block shapes".into()));
        }
        let mut theta = DVector::zeros(dims.s());
        for c in 0..dims.p {
            for r in 0..dims.m {
                theta[c * dims.m + r] = beta[(r, c)];
            }
        }
        theta.rows_mut(dims.alpha_offset(), dims.m).copy_from(alpha);
        theta.rows_mut(dims.mu_x_offset(), dims.p).copy_from(mu_x);
        theta
            .rows_mut(dims.sigma_q_offset(), tri(dims.m))
            .copy_from(&vech(sigma_q));
        theta
            .rows_mut(dims.sigma_x_offset(), tri(dims.p))
            .copy_from(&vech(sigma_x));
        Ok(Self { dims, theta })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut DVector<f64> {
        &mut self.theta
    }

    pub fn beta(&self) -> DMatrix<f64> {
        let (m, p) = (self.dims.m, self.dims.p);
        DMatrix::from_fn(m, p, |r, c| self.theta[c * m + r])
    }

    pub fn alpha(&self) -> DVector<f64> {
        self.theta.rows(self.dims.alpha_offset(), self.dims.m).into_owned()
    }

    pub fn mu_x(&self) -> DVector<f64> {
        self.theta.rows(self.dims.mu_x_offset(), self.dims.p).into_owned()
    }

    pub fn sigma_q(&self) -> DMatrix<f64> {
        unvech(
            self.theta.rows(self.dims.sigma_q_offset(), tri(self.dims.m)).as_slice(),
            self.dims.m,
        )
    }

    pub fn sigma_x(&self) -> DMatrix<f64> {
        unvech(
            self.theta.rows(self.dims.sigma_x_offset(), tri(self.dims.p)).as_slice(),
            self.dims.p,
        )
    }
}

/// Observed data: z_i = (y_i, x_i) plus the known per-observation error scales.
#[derive(Debug, Clone)]
pub struct Dataset {
    dims: ModelDims,
    pub z: Vec<DVector<f64>>,
    pub sigma_e: Vec<DMatrix<f64>>,
    /// p x m cross-covariance between u and e.
    pub sigma_ue: Vec<DMatrix<f64>>,
    pub sigma_u: Vec<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(
        dims: ModelDims,
        z: Vec<DVector<f64>>,
        sigma_e: Vec<DMatrix<f64>>,
        sigma_ue: Vec<DMatrix<f64>>,
        sigma_u: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = z.len();
        if n == 0 {
            return Err(EivError::InvalidData("dataset is empty".into()));
        }
        if sigma_e.len() != n || sigma_ue.len() != n || sigma_u.len() != n {
            return Err(EivError::Dimension(
                "per-observation matrices must match the number of observations".into(),
            ));
        }
        let (m, p) = (dims.m, dims.p);
        for i in 0..n {
            if z[i].len() != m + p {
                return Err(EivError::Dimension(format!(
                    "observation {i}: z has length {}, expected {}",
                    z[i].len(),
                    m + p
                )));
            }
            if z[i].iter().any(|v| !v.is_finite()) {
                return Err(EivError::InvalidData(format!("observation {i}: non-finite z")));
            }
            check_shape(&sigma_e[i], m, m, i, "sigma_e")?;
            check_shape(&sigma_ue[i], p, m, i, "sigma_ue")?;
            check_shape(&sigma_u[i], p, p, i, "sigma_u")?;
            check_symmetric(&sigma_e[i], i, "sigma_e")?;
            check_symmetric(&sigma_u[i], i, "sigma_u")?;
            // Joint error scale [[sigma_e, sigma_ue'], [sigma_ue, sigma_u]] must be PSD.
            let mut joint = DMatrix::zeros(m + p, m + p);
            joint.view_mut((0, 0), (m, m)).copy_from(&sigma_e[i]);
            joint.view_mut((m, 0), (p, m)).copy_from(&sigma_ue[i]);
            joint.view_mut((0, m), (m, p)).copy_from(&sigma_ue[i].transpose());
            joint.view_mut((m, m), (p, p)).copy_from(&sigma_u[i]);
            let scale = joint.amax().max(1.0);
            let min_eig = joint
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if min_eig < -1e-10 * scale {
                return Err(EivError::InvalidData(format!(
                    "observation {i}: joint error scale is not positive semidefinite (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(Self { dims, z, sigma_e, sigma_ue, sigma_u })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// The known error block of observation i, assembled as one matrix.
    pub(crate) fn known_block(&self, i: usize) -> DMatrix<f64> {
        let (m, p) = (self.dims.m, self.dims.p);
        let mut out = DMatrix::zeros(m + p, m + p);
        out.view_mut((0, 0), (m, m)).copy_from(&self.sigma_e[i]);
        out.view_mut((m, 0), (p, m)).copy_from(&self.sigma_ue[i]);
        out.view_mut((0, m), (m, p)).copy_from(&self.sigma_ue[i].transpose());
        out.view_mut((m, m), (p, p)).copy_from(&self.sigma_u[i]);
        out
    }
}

fn check_shape(mat: &DMatrix<f64>, r: usize, c: usize, i: usize, name: &str) -> Result<()> {
    if mat.nrows() != r || mat.ncols() != c {
        return Err(EivError::Dimension(format!(
            "observation {i}: {name} is {}x{}, expected {r}x{c}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(EivError::InvalidData(format!("observation {i}: non-finite {name}")));
    }
    Ok(())
}

fn check_symmetric(mat: &DMatrix<f64>, i: usize, name: &str) -> Result<()> {
    let tol = 1e-8 * mat.amax().max(1.0);
    for r in 0..mat.nrows() {
        for c in 0..r {
            if (mat[(r, c)] - mat[(c, r)]).abs() > tol {
                return Err(EivError::InvalidData(format!(
                    "observation {i}: {name} is not symmetric"
                )));
            }
        }
    }
    Ok(())
}

/// Null-hypothesis specification: pin `q` entries of vec(beta) to fixed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSpec {
    /// Indices into vec(beta) (column-major), all distinct.
    pub indices: Vec<usize>,
    /// The hypothesized values, one per index.
    pub values: Vec<f64>,
}

impl HypothesisSpec {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, dims: ModelDims) -> Result<Self> {
        if indices.is_empty() {
            return Err(EivError::invalid("hypothesis needs at least one constraint"));
        }
        if indices.len() != values.len() {
            return Err(EivError::Dimension("indices/values length mismatch".into()));
        }
        let mp = dims.m * dims.p;
        let mut seen = vec![false; mp];
        for &ix in &indices {
            if ix >= mp {
                return Err(EivError::invalid(format!(
                    "beta index {ix} out of range (vec(beta) has {mp} entries)"
                )));
            }
            if seen[ix] {
                return Err(EivError::invalid(format!("beta index {ix} repeated")));
            }
            seen[ix] = true;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EivError::invalid("hypothesis values must be finite"));
        }
        Ok(Self { indices, values })
    }

    /// Dimension of the tested parameter.
    pub fn q(&self) -> usize {
        self.indices.len()
    }

    /// Theta permutation putting the tested block first: psi indices in order,
    /// then the remaining (nuisance) indices in their natural order.
    pub fn psi_first_order(&self, s: usize) -> Vec<usize> {
        let mut order: Vec<usize> = self.indices.clone();
        let mut is_psi = vec![false; s];
        for &ix in &self.indices {
            is_psi[ix] = true;
        }
        order.extend((0..s).filter(|j| !is_psi[*j]));
        order
    }
}

/// Location vector mu(theta) = (alpha + beta mu_x, mu_x).
pub fn mu_of(theta: &ParameterVector) -> DVector<f64> {
    let dims = theta.dims();
    let mut mu = DVector::zeros(dims.obs_dim());
    let top = theta.alpha() + theta.beta() * theta.mu_x();
    mu.rows_mut(0, dims.m).copy_from(&top);
    mu.rows_mut(dims.m, dims.p).copy_from(&theta.mu_x());
    mu
}

/// The parameter-dependent part of `c * omega_i` (everything except the known
/// per-observation block).
pub(crate) fn omega_core(theta: &ParameterVector) -> DMatrix<f64> {
    let dims = theta.dims();
    let (m, p) = (dims.m, dims.p);
    let beta = theta.beta();
    let sx = theta.sigma_x();
    let bsx = &beta * &sx;
    let mut core = DMatrix::zeros(m + p, m + p);
    core.view_mut((0, 0), (m, m)).copy_from(&(&bsx * beta.transpose() + theta.sigma_q()));
    core.view_mut((0, m), (m, p)).copy_from(&bsx);
    core.view_mut((m, 0), (p, m)).copy_from(&bsx.transpose());
    core.view_mut((m, m), (p, p)).copy_from(&sx);
    core
}

/// Scale matrix of observation `i`. Errors if the result is not positive
/// definite.
pub fn omega_of(
    theta: &ParameterVector,
    i: usize,
    data: &Dataset,
    family: &EllipticalFamily,
) -> Result<DMatrix<f64>> {
    let omega = (omega_core(theta) + data.known_block(i)) / family.c_const();
    chol_tagged(&omega, "omega", Some(i))?;
    Ok(omega)
}

/// mu, omega and all their first/second theta-derivatives at one point.
///
/// First derivatives are dense (s entries); second derivatives are stored
/// sparsely, keyed by the unordered index pair, because only the
/// (beta, beta), (beta, sigma_x) and (beta, mu_x) interactions are nonzero.
#[derive(Debug, Clone)]
pub struct ThetaDerivs {
    pub dims: ModelDims,
    pub mu: DVector<f64>,
    pub mu_d: Vec<DVector<f64>>,
    /// d omega / d theta_j; identical for every observation.
    pub omega_d: Vec<DMatrix<f64>>,
    mu_d2: HashMap<(usize, usize), DVector<f64>>,
    omega_d2: HashMap<(usize, usize), DMatrix<f64>>,
}

impl ThetaDerivs {
    /// Second derivative of mu; `None` means identically zero.
    pub fn mu_d2(&self, j: usize, k: usize) -> Option<&DVector<f64>> {
        self.mu_d2.get(&key(j, k))
    }

    /// Second derivative of omega; `None` means identically zero.
    pub fn omega_d2(&self, j: usize, k: usize) -> Option<&DMatrix<f64>> {
        self.omega_d2.get(&key(j, k))
    }
}

fn key(j: usize, k: usize) -> (usize, usize) {
    (j.min(k), j.max(k))
}

/// Assemble all analytic derivatives of mu and omega at `theta`.
pub fn theta_derivs(theta: &ParameterVector, family: &EllipticalFamily) -> ThetaDerivs {
    let dims = theta.dims();
    let (m, p) = (dims.m, dims.p);
    let s = dims.s();
    let c_inv = 1.0 / family.c_const();
    let beta = theta.beta();
    let sx = theta.sigma_x();
    let mu_x = theta.mu_x();
    let obs = m + p;

    let mut mu_d = Vec::with_capacity(s);
    let mut omega_d = Vec::with_capacity(s);
    for j in 0..s {
        let mut dmu = DVector::zeros(obs);
        let mut dom = DMatrix::zeros(obs, obs);
        match dims.block_of(j) {
            ThetaBlock::Beta(r, c) => {
                // mu: selector E_rc applied to mu_x lands mu_x[c] in response row r.
                dmu[r] = mu_x[c];
                // omega: c^{-1} [E S_x b' + b S_x E', E S_x; S_x E', 0].
                for b in 0..p {
                    let v = c_inv * sx[(c, b)];
                    dom[(r, m + b)] += v;
                    dom[(m + b, r)] += v;
                }
                for a in 0..m {
                    for b in 0..p {
                        // (E S_x b')_{r a} = sum_b S_x[c b] beta[a b]
                        let v = c_inv * sx[(c, b)] * beta[(a, b)];
                        dom[(r, a)] += v;
                        dom[(a, r)] += v;
                    }
                }
            }
            ThetaBlock::Alpha(a) => {
                dmu[a] = 1.0;
            }
            ThetaBlock::MuX(b) => {
                for r in 0..m {
                    dmu[r] = beta[(r, b)];
                }
                dmu[m + b] = 1.0;
            }
            ThetaBlock::SigmaQ(r, c) => {
                dom[(r, c)] += c_inv;
                if r != c {
                    dom[(c, r)] += c_inv;
                }
            }
            ThetaBlock::SigmaX(r, c) => {
                // S = symmetric unit at (r, c).
                let pairs: &[(usize, usize)] = if r == c { &[(r, c)] } else { &[(r, c), (c, r)] };
                for &(a, b) in pairs {
                    // bottom-right S
                    dom[(m + a, m + b)] += c_inv;
                    // top-right beta S and its transpose
                    for row in 0..m {
                        dom[(row, m + b)] += c_inv * beta[(row, a)];
                        dom[(m + b, row)] += c_inv * beta[(row, a)];
                    }
                    // top-left beta S beta'
                    for row in 0..m {
                        for col in 0..m {
                            dom[(row, col)] += c_inv * beta[(row, a)] * beta[(col, b)];
                        }
                    }
                }
            }
        }
        mu_d.push(dmu);
        omega_d.push(dom);
    }

    // Second derivatives. mu is bilinear in (beta, mu_x); omega is quadratic in
    // beta and bilinear in (beta, sigma_x). Everything else vanishes.
    let mut mu_d2 = HashMap::new();
    let mut omega_d2 = HashMap::new();
    let beta_at = |j: usize| dims.beta_offset() + j;
    for c in 0..p {
        for r in 0..m {
            let jb = beta_at(c * m + r);
            // (beta_rc, mu_x_c): unit response vector in row r.
            let jm = dims.mu_x_offset() + c;
            let mut v = DVector::zeros(obs);
            v[r] = 1.0;
            mu_d2.insert(key(jb, jm), v);

            // (beta_rc, beta_r'c'): top-left sigma_x[c, c'] (e_r e_{r'}' + e_{r'} e_r').
            for c2 in 0..p {
                for r2 in 0..m {
                    let jb2 = beta_at(c2 * m + r2);
                    if jb2 < jb {
                        continue;
                    }
                    let mut dom = DMatrix::zeros(obs, obs);
                    let v = c_inv * sx[(c, c2)];
                    dom[(r, r2)] += v;
                    dom[(r2, r)] += v;
                    if dom.amax() != 0.0 {
                        omega_d2.insert(key(jb, jb2), dom);
                    }
                }
            }

            // (beta_rc, sigma_x_{ab}): c^{-1} [E S b' + b S E', E S; S E', 0].
            for (idx, (a, b)) in vech_pairs(p).enumerate() {
                let js = dims.sigma_x_offset() + idx;
                let pairs: &[(usize, usize)] = if a == b { &[(a, b)] } else { &[(a, b), (b, a)] };
                let mut dom = DMatrix::zeros(obs, obs);
                for &(sa, sb) in pairs {
                    // E = E_{rc} (m x p): E S has row r equal to S[c, :].
                    if sa == c {
                        // (E S)_{r, sb} = 1
                        dom[(r, m + sb)] += c_inv;
                        dom[(m + sb, r)] += c_inv;
                        // E S beta' contributes row r: beta[:, sb]
                        for col in 0..m {
                            dom[(r, col)] += c_inv * beta[(col, sb)];
                            dom[(col, r)] += c_inv * beta[(col, sb)];
                        }
                    }
                }
                if dom.amax() != 0.0 {
                    omega_d2.insert(key(jb, js), dom);
                }
            }
        }
    }

    ThetaDerivs {
        dims,
        mu: mu_of(theta),
        mu_d,
        omega_d,
        mu_d2,
        omega_d2,
    }
}
