//! Heteroskedastic multivariate errors-in-variables regression under
//! elliptical error distributions.
//!
//! The crate fits the structural model
//!
//! ```text
//! y_i = alpha + beta x_i + q_i,    Y_i = y_i + e_i,    X_i = x_i + u_i,
//! ```
//!
//! where the stacked observation `Z_i = (Y_i, X_i)` is elliptical with
//! location `mu(theta)` and scale `omega_i(theta)`, the per-observation error
//! scales are known, and the parameter is
//! `theta = (vec(beta), alpha, mu_x, vech(sigma_q), vech(sigma_x))`.
//!
//! On top of maximum likelihood estimation it provides the likelihood ratio
//! statistic for hypotheses on entries of `beta` together with both Skovgaard
//! adjustments (`LR*_a`, `LR**_a`), which need the observed information, an
//! ancillary statistic, and sample-space derivatives — all computed here in
//! closed form. A Monte Carlo module reproduces size and power studies.
//!
//! Modules follow the pipeline: [`elliptical`] (density generators and exact
//! sampling), [`model`] (parameters, data, analytic derivatives),
//! [`chol`](mod@chol) (factorization and its derivative), [`likelihood`]
//! (loglik/score/information and the fitter), [`skovgaard`] (adjusted tests),
//! [`simulate`] (Monte Carlo harness).

pub mod chol;
pub mod elliptical;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod simulate;
pub mod skovgaard;

pub use chol::{chol, chol_dtheta, CholPair};
pub use elliptical::{EllipticalFamily, FamilyKind};
pub use error::{EivError, Result};
pub use likelihood::{fit_mle, loglik, observed_info, score, FitResult};
pub use model::{Dataset, HypothesisSpec, ModelDims, ParameterVector};
pub use simulate::{run_null_study, run_power_study, SimConfig, SimReport};
pub use skovgaard::{ancillary, lr_test, sample_space_derivs, TestReport};
