//! Terminal-node Gaussian processes: the anisotropic exponentiated-quadratic
//! kernel, the node likelihood with the constant node mean integrated out,
//! the full conditional of the node predictions and out-of-sample
//! conditioning.
//!
//! With `Omega` the kernel matrix of a node, `Lambda = tau_mu^-1 11' + Omega`
//! is the marginal prior covariance of the node predictions `psi` and the
//! partial residuals satisfy `r ~ MVN(0, tau^-1 I + Lambda)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Starting nugget, relative to `nu^-1`.
pub const DEFAULT_NUGGET: f64 = 1e-8;
/// Largest nugget tried before a factorisation failure is reported.
pub const MAX_NUGGET: f64 = 1e-4;

/// Kernel parameters of one tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    /// One length-scale per kernel dimension.
    pub length_scales: Vec<f64>,
    /// Precision of the GP.
    pub nu: f64,
    /// Precision of the constant node mean.
    pub tau_mu: f64,
    /// Diagonal inflation relative to `nu^-1`.
    pub nugget: f64,
}

impl KernelState {
    pub fn new(length_scales: Vec<f64>, nu: f64, tau_mu: f64) -> Self {
        KernelState {
            length_scales,
            nu,
            tau_mu,
            nugget: DEFAULT_NUGGET,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.length_scales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidInput(
                "length-scales must be finite and positive".into(),
            ));
        }
        if !(self.nu > 0.0) || !(self.tau_mu > 0.0) {
            return Err(Error::InvalidInput("nu and tau_mu must be positive".into()));
        }
        Ok(())
    }
}

fn inverse_sq_scales(length_scales: &[f64], p: usize) -> Result<Vec<f64>> {
    if length_scales.len() != p {
        return Err(Error::InvalidInput(format!(
            "{} length-scales for {p} kernel dimensions",
            length_scales.len()
        )));
    }
    length_scales
        .iter()
        .map(|&l| {
            if l > 0.0 && l.is_finite() {
                Ok(1.0 / (l * l))
            } else {
                Err(Error::InvalidInput(format!("length-scale {l} is not positive")))
            }
        })
        .collect()
}

/// Kernel matrix of the rows of `x`: `nu^-1 exp(-1/2 sum_j (x_ij - x_kj)^2 / phi_j^2)`
/// off the diagonal and `nu^-1 (1 + nugget)` on it.
pub fn build_omega(
    x: &DMatrix<f64>,
    length_scales: &[f64],
    nu: f64,
    nugget: f64,
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let w = inverse_sq_scales(length_scales, x.ncols())?;
    let mut s = DMatrix::<f64>::zeros(n, n);
    for (j, &wj) in w.iter().enumerate() {
        let col = x.column(j);
        for k in 0..n {
            let xk = col[k];
            let mut dst = s.column_mut(k);
            for (i, d) in dst.iter_mut().enumerate().skip(k + 1) {
                let diff = col[i] - xk;
                *d += diff * diff * wj;
            }
        }
    }
    let scale = 1.0 / nu;
    for k in 0..n {
        s[(k, k)] = scale * (1.0 + nugget);
        for i in (k + 1)..n {
            let v = scale * (-0.5 * s[(i, k)]).exp();
            s[(i, k)] = v;
            s[(k, i)] = v;
        }
    }
    Ok(s)
}

/// Cross-covariance between the rows of `a` and the rows of `b` (no nugget).
pub fn cross_omega(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    length_scales: &[f64],
    nu: f64,
) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput("kernel inputs differ in dimension".into()));
    }
    let w = inverse_sq_scales(length_scales, a.ncols())?;
    let mut s = DMatrix::<f64>::zeros(a.nrows(), b.nrows());
    for (j, &wj) in w.iter().enumerate() {
        let ca = a.column(j);
        let cb = b.column(j);
        for k in 0..b.nrows() {
            let xk = cb[k];
            for (i, d) in s.column_mut(k).iter_mut().enumerate() {
                let diff = ca[i] - xk;
                *d += diff * diff * wj;
            }
        }
    }
    let scale = 1.0 / nu;
    s.apply(|v| *v = scale * (-0.5 * *v).exp());
    Ok(s)
}

fn lambda_from_omega(mut omega: DMatrix<f64>, tau_mu: f64) -> DMatrix<f64> {
    omega.add_scalar_mut(1.0 / tau_mu);
    omega
}

fn factor_failure(m: &DMatrix<f64>, nugget: f64) -> Error {
    let d = m.diagonal();
    Error::NotPositiveDefinite {
        size: m.nrows(),
        nugget,
        min_diag: d.min(),
        max_diag: d.max(),
    }
}

/// Covariance quantities of one terminal node for fixed kernel parameters
/// and residual precision, with the Cholesky factor of `tau^-1 I + Lambda`.
#[derive(Clone, Debug)]
pub struct CovarianceBundle {
    lambda: DMatrix<f64>,
    noisy: Cholesky<f64, Dyn>,
    log_det: f64,
    nugget: f64,
    nu: f64,
    tau_mu: f64,
    tau: f64,
}

impl CovarianceBundle {
    /// Build the bundle for the node rows `x`, escalating the nugget tenfold
    /// (up to [`MAX_NUGGET`]) until `tau^-1 I + Lambda` factorises.
    pub fn new(x: &DMatrix<f64>, kernel: &KernelState, tau: f64) -> Result<Self> {
        kernel.validate()?;
        if !(tau > 0.0) {
            return Err(Error::InvalidInput("tau must be positive".into()));
        }
        let omega = build_omega(x, &kernel.length_scales, kernel.nu, kernel.nugget)?;
        Self::from_lambda(
            lambda_from_omega(omega, kernel.tau_mu),
            kernel.nugget,
            kernel.nu,
            kernel.tau_mu,
            tau,
        )
    }

    fn from_lambda(
        mut lambda: DMatrix<f64>,
        mut nugget: f64,
        nu: f64,
        tau_mu: f64,
        tau: f64,
    ) -> Result<Self> {
        loop {
            let mut a = lambda.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += 1.0 / tau;
            }
            if let Some(chol) = Cholesky::new(a) {
                let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                return Ok(CovarianceBundle {
                    lambda,
                    noisy: chol,
                    log_det,
                    nugget,
                    nu,
                    tau_mu,
                    tau,
                });
            }
            if nugget * 10.0 > MAX_NUGGET * (1.0 + 1e-9) {
                return Err(factor_failure(&lambda, nugget));
            }
            add_nugget(&mut lambda, nu, nugget, nugget * 10.0);
            nugget *= 10.0;
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn omega(&self) -> DMatrix<f64> {
        self.lambda.add_scalar(-1.0 / self.tau_mu)
    }

    /// `tau^-1 I + Omega`.
    pub fn gamma(&self) -> DMatrix<f64> {
        let mut g = self.omega();
        for i in 0..g.nrows() {
            g[(i, i)] += 1.0 / self.tau;
        }
        g
    }

    /// `log det(tau^-1 I + Lambda)`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Cholesky factor of `Lambda`, raising the nugget of this bundle if the
    /// current one is too small for `Lambda` on its own.
    fn lambda_factor(&mut self) -> Result<Cholesky<f64, Dyn>> {
        loop {
            if let Some(chol) = Cholesky::new(self.lambda.clone()) {
                return Ok(chol);
            }
            let next = self.nugget * 10.0;
            if next > MAX_NUGGET * (1.0 + 1e-9) {
                return Err(factor_failure(&self.lambda, self.nugget));
            }
            let mut lambda = self.lambda.clone();
            add_nugget(&mut lambda, self.nu, self.nugget, next);
            *self = Self::from_lambda(lambda, next, self.nu, self.tau_mu, self.tau)?;
        }
    }
}

fn add_nugget(m: &mut DMatrix<f64>, nu: f64, from: f64, to: f64) {
    let delta = (to - from) / nu;
    for i in 0..m.nrows() {
        m[(i, i)] += delta;
    }
}

/// `log MVN(r; 0, tau^-1 I + Lambda)`.
pub fn log_marginal_node_likelihood(r: &[f64], bundle: &CovarianceBundle) -> Result<f64> {
    if r.len() != bundle.dim() {
        return Err(Error::InvalidInput(format!(
            "residual length {} does not match node size {}",
            r.len(),
            bundle.dim()
        )));
    }
    let rv = DVector::from_column_slice(r);
    let mut z = rv.clone();
    bundle.noisy.l_dirty().solve_lower_triangular_mut(&mut z);
    // l_dirty leaves garbage above the diagonal; the lower solve only reads
    // the lower triangle.
    let quad = z.norm_squared();
    let n = r.len() as f64;
    let ll = -0.5 * (n * (2.0 * PI).ln() + bundle.log_det + quad);
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!(
            "node log-likelihood for a node of size {}",
            r.len()
        )));
    }
    Ok(ll)
}

/// Mean and covariance of the full conditional of the node predictions:
/// `Lambda (tau^-1 I + Lambda)^-1 r` and `Lambda - Lambda (tau^-1 I + Lambda)^-1 Lambda`.
pub fn psi_posterior(r: &[f64], bundle: &CovarianceBundle) -> (DVector<f64>, DMatrix<f64>) {
    let rv = DVector::from_column_slice(r);
    let solved_r = bundle.noisy.solve(&rv);
    let mean = &bundle.lambda * solved_r;
    let solved_l = bundle.noisy.solve(&bundle.lambda);
    let mut cov = &bundle.lambda - &bundle.lambda * solved_l;
    symmetrize(&mut cov);
    (mean, cov)
}

/// One draw from the full conditional of the node predictions.
///
/// Drawn as `f + Lambda (tau^-1 I + Lambda)^-1 (r - f - e)` with
/// `f ~ MVN(0, Lambda)` and `e ~ MVN(0, tau^-1 I)`, which has exactly the
/// moments returned by [`psi_posterior`]. The bundle's nugget may be raised
/// when `Lambda` alone needs it.
pub fn sample_psi<R: Rng + ?Sized>(
    r: &[f64],
    bundle: &mut CovarianceBundle,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = bundle.dim();
    if r.len() != n {
        return Err(Error::InvalidInput("residual length does not match node".into()));
    }
    let chol_lambda = bundle.lambda_factor()?;
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = chol_lambda.l() * z;
    let noise_sd = bundle.tau.recip().sqrt();
    let mut target = DVector::from_column_slice(r) - &f;
    for v in target.iter_mut() {
        *v -= noise_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let correction = &bundle.lambda * bundle.noisy.solve(&target);
    Ok(f + correction)
}

/// Draw node predictions from their prior: the node mean from
/// `N(0, tau_mu^-1)`, then `psi ~ MVN(mean 1, Omega)`.
pub fn sample_prior_psi<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    kernel: &KernelState,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = omega_factor(x, &kernel.length_scales, kernel.nu, kernel.nugget)?;
    let n = x.nrows();
    let mean = rng.sample::<f64, _>(StandardNormal) / kernel.tau_mu.sqrt();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z + DVector::from_element(n, mean))
}

/// Cholesky factor of the kernel matrix with nugget escalation.
pub fn omega_factor(
    x: &DMatrix<f64>,
    length_scales: &[f64],
    nu: f64,
    nugget: f64,
) -> Result<Cholesky<f64, Dyn>> {
    let mut nugget = nugget;
    let mut omega = build_omega(x, length_scales, nu, nugget)?;
    loop {
        if let Some(chol) = Cholesky::new(omega.clone()) {
            return Ok(chol);
        }
        if nugget * 10.0 > MAX_NUGGET * (1.0 + 1e-9) {
            return Err(factor_failure(&omega, nugget));
        }
        add_nugget(&mut omega, nu, nugget, nugget * 10.0);
        nugget *= 10.0;
    }
}

fn lambda_with_factor(
    x_node: &DMatrix<f64>,
    kernel: &KernelState,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
    kernel.validate()?;
    let mut nugget = kernel.nugget;
    let omega = build_omega(x_node, &kernel.length_scales, kernel.nu, nugget)?;
    let mut lambda = lambda_from_omega(omega, kernel.tau_mu);
    loop {
        if let Some(chol) = Cholesky::new(lambda.clone()) {
            return Ok((lambda, chol));
        }
        if nugget * 10.0 > MAX_NUGGET * (1.0 + 1e-9) {
            return Err(factor_failure(&lambda, nugget));
        }
        add_nugget(&mut lambda, kernel.nu, nugget, nugget * 10.0);
        nugget *= 10.0;
    }
}

fn cross_lambda(
    x_node: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    kernel: &KernelState,
) -> Result<DMatrix<f64>> {
    let mut cross = cross_omega(x_node, x_star, &kernel.length_scales, kernel.nu)?;
    cross.add_scalar_mut(1.0 / kernel.tau_mu);
    Ok(cross)
}

/// Condition the node GP on its predictions `psi` at `x_node` and return the
/// predictive mean and covariance at `x_star`.
pub fn gp_predict(
    psi: &[f64],
    x_node: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    kernel: &KernelState,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x_star.nrows() == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    check_node_inputs(psi, x_node)?;
    let (whitened, cross) = whitened_cross(psi, x_node, x_star, kernel)?;
    let mean = cross.transpose() * whitened;
    let star = lambda_from_omega(
        build_omega(x_star, &kernel.length_scales, kernel.nu, kernel.nugget)?,
        kernel.tau_mu,
    );
    let mut cov = star - cross.transpose() * &cross;
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Predictive mean only; the covariance is not formed.
pub fn gp_predict_mean(
    psi: &[f64],
    x_node: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    kernel: &KernelState,
) -> Result<DVector<f64>> {
    if x_star.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    check_node_inputs(psi, x_node)?;
    let (whitened, cross) = whitened_cross(psi, x_node, x_star, kernel)?;
    Ok(cross.transpose() * whitened)
}

/// `L⁻¹ψ` and `L⁻¹Λ*` for `Λ = LLᵀ`. Both stay O(1) when `Λ` is nearly
/// singular, unlike `Λ⁻¹ψ`.
fn whitened_cross(
    psi: &[f64],
    x_node: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    kernel: &KernelState,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (_, chol) = lambda_with_factor(x_node, kernel)?;
    let l = chol.l_dirty();
    let mut cross = cross_lambda(x_node, x_star, kernel)?;
    let mut v = DVector::from_column_slice(psi);
    let ok = l.solve_lower_triangular_mut(&mut v) && l.solve_lower_triangular_mut(&mut cross);
    if !ok {
        return Err(Error::NonFinite("triangular solve".into()));
    }
    Ok((v, cross))
}

fn check_node_inputs(psi: &[f64], x_node: &DMatrix<f64>) -> Result<()> {
    if x_node.nrows() == 0 {
        return Err(Error::InvalidInput("node has no training rows".into()));
    }
    if psi.len() != x_node.nrows() {
        return Err(Error::InvalidInput(
            "psi length does not match node rows".into(),
        ));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Node likelihood when the node carries a single constant (no kernel):
/// `log MVN(r; 0, tau^-1 I + tau_mu^-1 11')`, in closed form.
pub fn constant_node_log_likelihood(r: &[f64], tau: f64, tau_mu: f64) -> f64 {
    let n = r.len() as f64;
    let sum: f64 = r.iter().sum();
    let ss: f64 = r.iter().map(|v| v * v).sum();
    let noise = 1.0 / tau;
    let mean_var = 1.0 / tau_mu;
    let log_det = (n - 1.0) * noise.ln() + (noise + n * mean_var).ln();
    let quad = (ss - mean_var * sum * sum / (noise + n * mean_var)) / noise;
    -0.5 * (n * (2.0 * PI).ln() + log_det + quad)
}

/// Posterior mean and variance of a constant node value under a
/// `N(0, tau_mu^-1)` prior and `N(value, tau^-1)` observations.
pub fn constant_node_posterior(r: &[f64], tau: f64, tau_mu: f64) -> (f64, f64) {
    let precision = tau * r.len() as f64 + tau_mu;
    let mean = tau * r.iter().sum::<f64>() / precision;
    (mean, 1.0 / precision)
}

pub fn sample_constant_node<R: Rng + ?Sized>(r: &[f64], tau: f64, tau_mu: f64, rng: &mut R) -> f64 {
    let (mean, var) = constant_node_posterior(r, tau, tau_mu);
    mean + var.sqrt() * rng.sample::<f64, _>(StandardNormal)
}
