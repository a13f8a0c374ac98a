//! Kernel functions and their local profile at the distance concentration point.
//!
//! All spectral predictions depend on the kernel only through the profile
//! `(tau, f(0), f(tau), f'(tau), f''(tau))` and a branch flag that selects the
//! generic formulas or the vanishing-first-derivative ones.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Relative threshold on |f'(tau)| below which the vanishing-derivative branch applies.
pub const ZERO_DERIVATIVE_TOL: f64 = 1e-8;

/// Which asymptotic regime the profile is evaluated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// f'(tau) != 0; predictions use the full low-rank structure.
    Generic,
    /// f'(tau) = 0; the mean structure decouples and only traces survive.
    ZeroDerivative,
}

/// Analytic kernel families with exact derivatives.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFamily {
    /// f(x) = exp(-x / (2 sigma2)).
    Exponential { sigma2: f64 },
    /// f(x) = a (x - center)^2 + b (x - center) + c.
    Quadratic { a: f64, b: f64, c: f64, center: f64 },
    /// f(x) = a exp(-b (x - center)^2), b > 0.
    GeneralizedGaussian { a: f64, b: f64, center: f64 },
}

impl KernelFamily {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            KernelFamily::Exponential { sigma2 } => (-x / (2.0 * sigma2)).exp(),
            KernelFamily::Quadratic { a, b, c, center } => {
                let d = x - center;
                a * d * d + b * d + c
            }
            KernelFamily::GeneralizedGaussian { a, b, center } => {
                let d = x - center;
                a * (-b * d * d).exp()
            }
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            KernelFamily::Exponential { sigma2 } => -self.eval(x) / (2.0 * sigma2),
            KernelFamily::Quadratic { a, b, center, .. } => 2.0 * a * (x - center) + b,
            KernelFamily::GeneralizedGaussian { b, center, .. } => {
                -2.0 * b * (x - center) * self.eval(x)
            }
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            KernelFamily::Exponential { sigma2 } => self.eval(x) / (4.0 * sigma2 * sigma2),
            KernelFamily::Quadratic { a, .. } => 2.0 * a,
            KernelFamily::GeneralizedGaussian { b, center, .. } => {
                let d = x - center;
                (4.0 * b * b * d * d - 2.0 * b) * self.eval(x)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelFamily::Exponential { sigma2 } => {
                if !(sigma2 > 0.0) {
                    return Err(Error::Invalid(format!(
                        "exponential kernel needs sigma2 > 0, got {sigma2}"
                    )));
                }
            }
            KernelFamily::GeneralizedGaussian { b, .. } => {
                if !(b > 0.0) {
                    return Err(Error::Invalid(format!(
                        "generalized Gaussian kernel needs b > 0, got {b}"
                    )));
                }
            }
            KernelFamily::Quadratic { .. } => {}
        }
        Ok(())
    }
}

/// A callable kernel: an analytic family or an arbitrary closure.
#[derive(Clone)]
pub enum KernelFn {
    Family(KernelFamily),
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for KernelFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelFn::Family(fam) => write!(f, "KernelFn::Family({fam:?})"),
            KernelFn::Custom(_) => write!(f, "KernelFn::Custom(..)"),
        }
    }
}

impl KernelFn {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        KernelFn::Custom(Arc::new(f))
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            KernelFn::Family(fam) => fam.eval(x),
            KernelFn::Custom(f) => f(x),
        }
    }
}

/// Local description of the kernel at the concentration point of squared distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelProfile {
    pub tau: f64,
    pub f0: f64,
    pub f_tau: f64,
    pub f1: f64,
    pub f2: f64,
    pub branch: Branch,
}

impl KernelProfile {
    /// Assembles and validates a profile, selecting the branch automatically
    /// unless an override is supplied.
    pub fn new(
        tau: f64,
        f0: f64,
        f_tau: f64,
        f1: f64,
        f2: f64,
        branch_override: Option<Branch>,
    ) -> Result<Self> {
        if !tau.is_finite() || ![f0, f_tau, f1, f2].iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("kernel profile values must be finite".into()));
        }
        if f_tau.abs() < 1e-12 * f0.abs().max(1.0) {
            return Err(Error::Kernel(format!(
                "f(tau) = {f_tau:.3e} is (numerically) zero; the Laplacian scaling is undefined"
            )));
        }
        let nearly_flat = f1.abs() < ZERO_DERIVATIVE_TOL * f_tau.abs().max(1.0);
        let branch = match branch_override {
            Some(b) => b,
            None => {
                if nearly_flat {
                    Branch::ZeroDerivative
                } else {
                    Branch::Generic
                }
            }
        };
        if branch == Branch::Generic && nearly_flat {
            return Err(Error::Kernel(format!(
                "generic branch requested but f'(tau) = {f1:.3e} is numerically zero"
            )));
        }
        Ok(KernelProfile { tau, f0, f_tau, f1, f2, branch })
    }

    /// Profile of an analytic family, with exact derivatives.
    pub fn from_family(
        family: &KernelFamily,
        tau: f64,
        branch_override: Option<Branch>,
    ) -> Result<Self> {
        family.validate()?;
        Self::new(
            tau,
            family.eval(0.0),
            family.eval(tau),
            family.d1(tau),
            family.d2(tau),
            branch_override,
        )
    }

    /// Profile of an arbitrary smooth kernel via central finite differences.
    ///
    /// The default step is max(1e-5, 1e-5 tau); pass `step` to override.
    pub fn from_closure(
        f: &dyn Fn(f64) -> f64,
        tau: f64,
        step: Option<f64>,
        branch_override: Option<Branch>,
    ) -> Result<Self> {
        let h = step.unwrap_or_else(|| (1e-5f64).max(1e-5 * tau.abs()));
        if !(h > 0.0) {
            return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
        }
        let (fp, fm, ft) = (f(tau + h), f(tau - h), f(tau));
        let f1 = (fp - fm) / (2.0 * h);
        let f2 = (fp - 2.0 * ft + fm) / (h * h);
        Self::new(tau, f(0.0), ft, f1, f2, branch_override)
    }

    /// The combination 5 f'/(8 f) - f''/(2 f') entering the generic low-rank structure.
    pub fn coef(&self) -> f64 {
        5.0 * self.f1 / (8.0 * self.f_tau) - self.f2 / (2.0 * self.f1)
    }

    /// F(tau) = (f(0) - f(tau) + tau f'(tau)) / (2 f'(tau)): the point at which the
    /// deterministic zero eigenvalue of the centered Laplacian sits before mapping.
    pub fn f_cap(&self) -> f64 {
        (self.f0 - self.f_tau + self.tau * self.f1) / (2.0 * self.f1)
    }

    /// Overall spectral scale -2 f'(tau)/f(tau) of the generic equivalent.
    pub fn scale(&self) -> f64 {
        -2.0 * self.f1 / self.f_tau
    }

    /// Additive constant of the vanishing-derivative equivalent.
    pub fn zero_shift(&self) -> f64 {
        (self.f0 - self.f_tau) / self.f_tau
    }

    /// Maps an isolated point of the underlying low-rank-plus-bulk spectrum to an
    /// eigenvalue of the centered normalized Laplacian.
    pub fn map_to_l(&self, rho: f64) -> f64 {
        match self.branch {
            Branch::Generic => self.scale() * (rho - self.f_cap()),
            Branch::ZeroDerivative => rho + self.zero_shift(),
        }
    }

    /// Inverse of [`map_to_l`].
    pub fn map_from_l(&self, lambda: f64) -> f64 {
        match self.branch {
            Branch::Generic => lambda / self.scale() + self.f_cap(),
            Branch::ZeroDerivative => lambda - self.zero_shift(),
        }
    }
}

/// Plug-in estimator of the distance concentration point from a p x n data matrix:
/// (2/(n p)) sum_i ||x_i - mean||^2.
pub fn estimate_tau_hat(x: &nalgebra::DMatrix<f64>) -> f64 {
    let (p, n) = x.shape();
    assert!(n > 0 && p > 0, "empty data matrix");
    let mean = x.column_mean();
    let mut acc = 0.0;
    for j in 0..n {
        acc += (x.column(j) - &mean).norm_squared();
    }
    2.0 * acc / (n as f64 * p as f64)
}
