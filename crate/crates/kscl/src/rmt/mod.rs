//! Deterministic spectral machinery: coupled Stieltjes fixed point, support
//! geometry, the small determinant bundles characterizing isolated eigenvalues,
//! and two-point resolvent blocks for eigenvector fluctuation statistics.

mod bundle;
mod cross;
mod eigvecs;
mod solve;
mod spikes;
mod support;

pub use bundle::{
    gamma_z, h0_z, h_tau, h_z, GBundle, ZeroBundle,
};
pub use cross::{cross_blocks, fd_g_derivative, g_derivative, CrossBlocks};
pub use eigvecs::{
    eigvec_covariance, projection_estimate, u1_cross_covariance, u1_statistics,
    ProjectionEstimate, NULL_TOL,
};
pub use solve::{solve_g, StieltjesSolution, SOLVER_CAP, SOLVER_TOL};
pub use spikes::{
    default_scan_interval, find_spikes, SpikeLocation, SpikeOrigin, SpikeReport,
    MULTIPLICITY_TOL,
};
pub use support::{augment_with_kernel, scan_support, SpectralSupport, SUPPORT_EPS};

use crate::covariance::ResolventEngine;
use crate::error::Result;
use crate::model::MixtureModel;
use nalgebra::{DMatrix, DVector};

/// Everything the deterministic layer needs about a model: dimension ratio,
/// class proportions, trace statistics, and the resolvent engine.
#[derive(Debug, Clone)]
pub struct SpectralContext {
    pub c0: f64,
    pub c: DVector<f64>,
    pub t: DVector<f64>,
    pub t_mat: DMatrix<f64>,
    /// (2/p) tr C_a^2 per class.
    pub trace_sq: DVector<f64>,
    /// Upper bound on the class covariance operator norms (drives scan windows).
    pub cov_norm_bound: f64,
    pub engine: ResolventEngine,
}

impl SpectralContext {
    pub fn from_model(model: &MixtureModel) -> Result<Self> {
        let stats = model.compute_statistics()?;
        let k = model.k();
        let bound = model
            .classes
            .iter()
            .map(|cl| cl.covariance.op_norm(model.p, k))
            .fold(0.0, f64::max);
        Ok(SpectralContext {
            c0: model.c0(),
            c: model.proportions(),
            t: stats.t,
            t_mat: stats.t_mat,
            trace_sq: stats.trace_sq,
            cov_norm_bound: bound,
            engine: model.engine()?,
        })
    }

    /// Direct construction from already-known limit statistics (used to evaluate
    /// the generic machinery exactly at an asymptotic parameter point).
    pub fn synthetic(
        c0: f64,
        c: DVector<f64>,
        t: DVector<f64>,
        t_mat: DMatrix<f64>,
        trace_sq: DVector<f64>,
        cov_norm_bound: f64,
        engine: ResolventEngine,
    ) -> Self {
        SpectralContext { c0, c, t, t_mat, trace_sq, cov_norm_bound, engine }
    }

    pub fn k(&self) -> usize {
        self.c.len()
    }

    /// S_2 = sum_a (c_a/c_0) (2/p) tr C_a^2, the trace scale of the flat-kernel branch.
    pub fn s2(&self) -> f64 {
        self.c
            .iter()
            .zip(self.trace_sq.iter())
            .map(|(ca, ts)| ca * ts)
            .sum::<f64>()
            / self.c0
    }

    /// Orthonormal basis of the hyperplane orthogonal to a vector (k x (k-1)).
    pub(crate) fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
        let k = v.len();
        let unit = v / v.norm();
        // Householder reflector mapping e_1 to `unit`; its trailing columns span the complement.
        let mut e1 = DVector::zeros(k);
        e1[0] = 1.0;
        let mut u = &e1 - &unit;
        let un = u.norm();
        let full = if un < 1e-14 {
            DMatrix::identity(k, k)
        } else {
            u /= un;
            DMatrix::identity(k, k) - 2.0 * &u * u.transpose()
        };
        full.columns(1, k - 1).into_owned()
    }
}
